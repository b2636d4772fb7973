"""Evaluation of policies over recipes and seeds, with curve and battery tables."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import groupby
from operator import attrgetter
from pathlib import Path
from typing import Sequence

import numpy as np

from src.config import settings
from src.exceptions import ConfigurationError
from src.repositories.checkpoint import load_checkpoint
from src.schemas.harness import EpisodeResult, EvalReport, PolicySummary, ScenarioRecipe, SwapMark
from src.services.baselines import greedy_policy, random_policy
from src.services.gridworld import Policy, completion_curve, completion_rate, run_episode
from src.services.manf_nets import PolicyCheckpoint
from src.services.scenarios import generate_seeded
from src.services.training import greedy_policy as checkpoint_policy

logger = logging.getLogger(__name__)

BUILTIN_POLICIES = ("greedy", "random")
POWER_FORMAT = "{:.4f}"
SWAP_MARK = "*"


class PolicyFactory:
    """Turns a policy name into a fresh policy per episode.

    ``greedy`` and ``random`` are built in; anything else is a checkpoint path, loaded
    once and then only read.
    """

    def __init__(self, names: Sequence[str]):
        self.checkpoints: dict[str, PolicyCheckpoint] = {}
        for name in names:
            if name not in BUILTIN_POLICIES and name not in self.checkpoints:
                self.checkpoints[name] = load_checkpoint(name)

    def check(self, name: str, recipe: ScenarioRecipe) -> None:
        checkpoint = self.checkpoints.get(name)
        if checkpoint is None:
            return
        topology = checkpoint.topology
        if (topology.height, topology.width, topology.agent_count) != (
            recipe.height,
            recipe.width,
            recipe.agent_count,
        ):
            raise ConfigurationError(
                f"Checkpoint {name} was trained on a {topology.height}x{topology.width} grid with "
                f"{topology.agent_count} agents; recipe {recipe.name} has {recipe.height}x{recipe.width} "
                f"and {recipe.agent_count}"
            )

    def build(self, name: str, seed: int) -> Policy:
        if name == "greedy":
            return greedy_policy()
        if name == "random":
            return random_policy(np.random.default_rng(seed))
        return checkpoint_policy(self.checkpoints[name])


def run_episode_result(
    factory: PolicyFactory, policy: str, recipe: ScenarioRecipe, seed: int, time_limit: int
) -> EpisodeResult:
    scenario = generate_seeded(recipe, seed, time_limit)
    world, agents = scenario.build()
    trace, _, _ = run_episode(world, agents, factory.build(policy, seed), time_limit + 1)
    return EpisodeResult(
        policy=policy,
        recipe=recipe.name,
        seed=seed,
        initial_tasks=world.initial_task_count,
        completed=trace.completed,
        rate=completion_rate(trace, world),
        curve=completion_curve(trace),
        routes=trace.routes,
        powers=trace.powers,
        swaps=[
            SwapMark(moment=t, uav_id=swap.uav_id, car_id=swap.car_id, prev_pow=swap.prev_pow)
            for t, swaps in enumerate(trace.per_step_swaps)
            for swap in swaps
        ],
    )


def summarize(episodes: Sequence[EpisodeResult]) -> list[PolicySummary]:
    summaries = []
    for (policy, recipe), group in groupby(episodes, key=attrgetter("policy", "recipe")):
        group = list(group)
        rates = np.array([e.rate for e in group])
        curves = np.array([e.curve for e in group], dtype=float)
        summaries.append(
            PolicySummary(
                policy=policy,
                recipe=recipe,
                episodes=len(group),
                mean_rate=float(rates.mean()),
                std_rate=float(rates.std()),
                total_swaps=sum(len(e.swaps) for e in group),
                mean_curve=curves.mean(axis=0).tolist(),
            )
        )
    return summaries


def run_eval(
    policies: Sequence[str], recipes: Sequence[ScenarioRecipe], seeds: Sequence[int], time_limit: int
) -> EvalReport:
    """Greedy (epsilon zero) episodes for every (policy, recipe, seed), in that order."""
    factory = PolicyFactory(policies)
    jobs = []
    for policy in policies:
        for recipe in recipes:
            factory.check(policy, recipe)
            jobs.extend((policy, recipe, seed) for seed in seeds)

    threads = settings.evaluation_threads()
    logger.info(f"Evaluating {len(jobs)} episodes on {threads} thread(s), time limit {time_limit}")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        episodes = list(pool.map(lambda job: run_episode_result(factory, *job, time_limit), jobs))

    report = EvalReport(time_limit=time_limit, episodes=episodes, summaries=summarize(episodes))
    for summary in report.summaries:
        logger.info(
            f"{summary.policy} on {summary.recipe}: mean rate {summary.mean_rate:.4f} "
            f"(std {summary.std_rate:.4f}), {summary.total_swaps} swaps"
        )
    return report


def curves_csv(report: EvalReport) -> str:
    """Per-episode completions per moment, one row per episode."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    moments = report.time_limit + 2
    writer.writerow(["policy", "recipe", "seed", *(f"t{m}" for m in range(moments))])
    for e in report.episodes:
        writer.writerow([e.policy, e.recipe, e.seed, *e.curve])
    return buffer.getvalue()


def battery_table_csv(report: EvalReport) -> str:
    """UAV power at every moment, swaps marked with ``*``, and swap totals per policy.

    Column ``m<k>`` holds the power after step k-1 (``m0`` is the start), so a swap at
    step t is marked in column ``m<t+1>``.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    moments = report.time_limit + 2
    writer.writerow(["policy", "recipe", "seed", "uav", *(f"m{k}" for k in range(moments))])
    for e in report.episodes:
        marked = {(s.uav_id, s.moment + 1) for s in e.swaps}
        uav_count = len(e.powers[0]) if e.powers else 0
        for uav in range(uav_count):
            cells = [
                POWER_FORMAT.format(row[uav]) + (SWAP_MARK if (uav, k) in marked else "")
                for k, row in enumerate(e.powers)
            ]
            writer.writerow([e.policy, e.recipe, e.seed, uav, *cells])
    for summary in report.summaries:
        writer.writerow([summary.policy, summary.recipe, "total_swaps", "", summary.total_swaps])
    return buffer.getvalue()


def swaps_at_cars(episode: EpisodeResult, car_ids: Sequence[int]) -> bool:
    """True when every recorded swap happened on a cell a car occupied at that moment."""
    for swap in episode.swaps:
        cell = episode.routes[swap.uav_id][swap.moment + 1]
        if not any(episode.routes[car][swap.moment + 1] == cell for car in car_ids):
            return False
    return True


def car_ids(recipe: ScenarioRecipe) -> list[int]:
    start = recipe.uavs + recipe.workers
    return list(range(start, start + recipe.cars))


def write_report(report: EvalReport, path: Path | str) -> list[Path]:
    """The JSON report plus ``<stem>_curves.csv`` and ``<stem>_battery.csv`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n")
    curves = path.with_name(f"{path.stem}_curves.csv")
    curves.write_text(curves_csv(report))
    battery = path.with_name(f"{path.stem}_battery.csv")
    battery.write_text(battery_table_csv(report))
    return [path, curves, battery]

