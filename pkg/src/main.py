"""Command-line surface: generate scenarios, train, evaluate, solve exactly and report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from src.config import settings
from src.exceptions import ConfigurationError, ReliefSwarmError
from src.repositories.run import RunRepository, read_document, write_document
from src.schemas.harness import PRESETS, OracleReport, ScenarioRecipe
from src.schemas.scenario import ScenarioDocument
from src.schemas.training import TrainConfig
from src.services.baselines import solve_exact
from src.services.evaluation import run_eval, write_report
from src.services.scenarios import generate_seeded
from src.services.training import FixedScenarioSource, ManfTrainer, RecipeScenarioSource, ScenarioSource

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(message)s (%(filename)s:%(lineno)s)"


def load_recipe(name_or_path: str) -> ScenarioRecipe:
    """A preset name (``row1``, ``desk8``...) or a recipe JSON file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    return read_document(ScenarioRecipe, name_or_path)


def scenario_source(config: TrainConfig, config_dir: Path) -> ScenarioSource:
    if config.recipe is not None:
        return RecipeScenarioSource(config.recipe)
    if config.scenario is None:
        raise ConfigurationError("Training config needs a scenario file or a recipe")
    path = Path(config.scenario)
    if not path.is_absolute() and not path.exists():
        path = config_dir / path
    return FixedScenarioSource(read_document(ScenarioDocument, path))


def cmd_gen(args: argparse.Namespace) -> int:
    recipe = load_recipe(args.recipe)
    scenario = generate_seeded(recipe, args.seed)
    write_document(scenario, args.out)
    logger.info(f"Wrote {recipe.name} scenario with seed {args.seed} to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    config = read_document(TrainConfig, config_path)
    source = scenario_source(config, config_path.parent)
    run = RunRepository(args.out)
    run.start(config)
    trainer = ManfTrainer(config, source, on_record=run.append_log, on_checkpoint=run.save_checkpoint)
    checkpoint, log = trainer.fit()
    rates = [r.eval_rate for r in log if r.eval_rate is not None]
    summary = f", last greedy rate {rates[-1]:.4f}" if rates else ""
    logger.info(f"{config.label} trained for {checkpoint.step} steps{summary}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    recipe = load_recipe(args.recipe)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    time_limit = args.time_limit if args.time_limit is not None else recipe.time_limit
    report = run_eval(args.policy, [recipe], seeds, time_limit)
    for path in write_report(report, args.out):
        logger.info(f"Wrote {path}")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    scenario = read_document(ScenarioDocument, args.scenario)
    horizon = args.horizon if args.horizon is not None else scenario.time_limit + 1
    world, agents = scenario.build()
    result = solve_exact(world, agents, horizon)
    report = OracleReport(optimal=result.optimal, plan=result.plan, nodes=result.nodes, runtime=result.runtime)
    text = report.model_dump_json(indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def render_run(run: RunRepository, fmt: str) -> str:
    config = run.load_config()
    log = run.load_log()
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss", "epsilon", "eval_rate"])
        for record in log:
            writer.writerow(
                [record.step, record.loss, record.epsilon, "" if record.eval_rate is None else record.eval_rate]
            )
        return buffer.getvalue()
    rates = [r.eval_rate for r in log if r.eval_rate is not None]
    summary = {
        "label": config.label,
        "steps": log[-1].step if log else 0,
        "final_loss": log[-1].loss if log else None,
        "last_eval_rate": rates[-1] if rates else None,
        "best_eval_rate": max(rates) if rates else None,
        "checkpoints": run.checkpoints.names(),
        "config": config.model_dump(mode="json"),
    }
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    text = render_run(RunRepository(args.run), args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relief-swarm", description="Heterogeneous agent route planning workbench.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate a scenario from a recipe")
    gen.add_argument("--recipe", required=True, help="Preset name or recipe JSON file")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    train = commands.add_parser("train", help="Train a MANF policy")
    train.add_argument("--config", required=True, help="Training config JSON file")
    train.add_argument("--out", required=True, help="Run directory")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate policies on a recipe")
    evaluate.add_argument(
        "--policy", nargs="+", required=True, help="greedy, random or a checkpoint file, one or more"
    )
    evaluate.add_argument("--recipe", required=True, help="Preset name or recipe JSON file")
    evaluate.add_argument("--seeds", type=int, required=True, help="Number of evaluation seeds")
    evaluate.add_argument("--first-seed", type=int, default=0)
    evaluate.add_argument("--time-limit", type=int, default=None)
    evaluate.add_argument("--out", required=True, help="Report JSON file; CSV tables are written beside it")
    evaluate.set_defaults(handler=cmd_eval)

    oracle = commands.add_parser("oracle", help="Solve a tiny scenario exactly")
    oracle.add_argument("--scenario", required=True)
    oracle.add_argument("--horizon", type=int, default=None, help="Steps to plan; defaults to time limit + 1")
    oracle.add_argument("--out", default=None)
    oracle.set_defaults(handler=cmd_oracle)

    report = commands.add_parser("report", help="Summarize a training run")
    report.add_argument("--run", required=True)
    report.add_argument("--format", choices=["csv", "json"], default="json")
    report.add_argument("--out", default=None)
    report.set_defaults(handler=cmd_report)
    return parser


def cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.handler(args)
    except (ReliefSwarmError, ValidationError, OSError, json.JSONDecodeError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format=LOG_FORMAT)
    sys.exit(cli())


if __name__ == "__main__":
    main()
