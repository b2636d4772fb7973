"""Experience collection, replay and the two MANF learning loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from src.exceptions import ConfigurationError, NumericError, PreconditionError
from src.models.observation import ObservationBundle
from src.models.world import AgentState, EpisodeTrace, GridWorld, StepOutcome
from src.schemas.checkpoint import NetTopology
from src.schemas.harness import ScenarioRecipe
from src.schemas.scenario import ScenarioDocument
from src.schemas.training import TrainConfig, TrainLogRecord
from src.services import neuralcore as nc
from src.services.gridworld import completion_rate, run_episode
from src.services.manf_nets import (
    PolicyCheckpoint,
    bundle_q_values,
    masked_argmax,
    masked_max_batch,
    sync_targets,
)
from src.services.observation import build_bundle
from src.services.scenarios import generate_seeded

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransitionRecord:
    """One replay entry. Channels are stored raw so the extractor keeps learning."""

    channels: np.ndarray
    local: np.ndarray
    actions: np.ndarray
    reward: float
    next_channels: np.ndarray
    next_local: np.ndarray
    next_masks: np.ndarray
    terminal_factor: int


@dataclass(frozen=True)
class TransitionBatch:
    channels: np.ndarray
    local: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_channels: np.ndarray
    next_local: np.ndarray
    next_masks: np.ndarray
    terminal_factors: np.ndarray

    @classmethod
    def stack(cls, records: Sequence[TransitionRecord]) -> "TransitionBatch":
        if not records:
            raise PreconditionError("Cannot train on an empty batch")
        return cls(
            channels=np.stack([r.channels for r in records]),
            local=np.stack([r.local for r in records]),
            actions=np.stack([r.actions for r in records]),
            rewards=np.array([r.reward for r in records], dtype=float),
            next_channels=np.stack([r.next_channels for r in records]),
            next_local=np.stack([r.next_local for r in records]),
            next_masks=np.stack([r.next_masks for r in records]),
            terminal_factors=np.array([r.terminal_factor for r in records], dtype=float),
        )


class ReplayBuffer:
    """Ring buffer of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise PreconditionError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self._records: list[TransitionRecord] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._records)

    def add(self, record: TransitionRecord) -> None:
        if len(self._records) < self.capacity:
            self._records.append(record)
        else:
            self._records[self._next] = record
        self._next = (self._next + 1) % self.capacity

    def extend(self, records: Iterable[TransitionRecord]) -> None:
        for record in records:
            self.add(record)

    def sample(self, batch_size: int) -> list[TransitionRecord]:
        if not self._records:
            raise PreconditionError("Cannot sample from an empty replay buffer")
        replace = batch_size > len(self._records)
        indices = self.rng.choice(len(self._records), size=batch_size, replace=replace)
        return [self._records[i] for i in indices]


def epsilon_at(step: int, start: float = 1.0, end: float = 0.1, decay_steps: int = 1024) -> float:
    """Linear annealing from ``start`` to ``end`` over ``decay_steps`` trainer steps."""
    if step < 0:
        raise PreconditionError(f"Trainer step must be nonnegative, got {step}")
    if decay_steps == 0 or step >= decay_steps:
        return end
    return start + (end - start) * step / decay_steps


def select_actions(
    q_per_agent: np.ndarray,
    masks: Sequence[Sequence[int]],
    epsilon: float,
    rng: np.random.Generator,
) -> list[int]:
    """Epsilon-greedy choice restricted to each agent's mask."""
    actions = []
    for q, mask in zip(q_per_agent, masks):
        if rng.random() < epsilon:
            actions.append(int(mask[int(rng.integers(len(mask)))]))
        else:
            actions.append(masked_argmax(q, mask))
    return actions


def reward(outcome: StepOutcome, mode: str) -> float:
    """Immediate reward: completed tasks, optionally plus relieved battery urgency."""
    if mode == "task_only":
        return float(outcome.task_cpt)
    if mode == "task_plus_mitig":
        return outcome.task_cpt + outcome.mitig_sum
    raise PreconditionError(f"Unknown reward mode {mode}")


def check_compatible(topology: NetTopology, world: GridWorld, agents: Sequence[AgentState]) -> None:
    if (world.height, world.width, len(agents)) != (topology.height, topology.width, topology.agent_count):
        raise ConfigurationError(
            f"Checkpoint expects a {topology.height}x{topology.width} grid with {topology.agent_count} "
            f"agents, scenario has {world.height}x{world.width} with {len(agents)}"
        )


def collect_episode(
    world: GridWorld,
    agents: Sequence[AgentState],
    checkpoint: PolicyCheckpoint,
    time_limit: int,
    epsilon: float,
    reward_mode: str,
    rng: np.random.Generator,
) -> tuple[list[TransitionRecord], EpisodeTrace]:
    """Run moments 0..time_limit with epsilon-greedy actions, recording every step."""
    check_compatible(checkpoint.topology, world, agents)
    cells = world.size
    transitions: list[TransitionRecord] = []
    pending: dict[str, object] = {}

    def policy(current_world: GridWorld, current: Sequence[AgentState], t: int) -> dict[int, int]:
        bundle = pending["bundle"] if "bundle" in pending else build_bundle(current_world, current)
        q = bundle_q_values(bundle, checkpoint)
        actions = select_actions(q, bundle.masks, epsilon, rng)
        pending["bundle"] = bundle
        pending["actions"] = actions
        return {agent.id: action for agent, action in zip(current, actions)}

    def on_step(t: int, outcome: StepOutcome, next_world: GridWorld, moved: Sequence[AgentState]) -> None:
        bundle: ObservationBundle = pending["bundle"]
        next_bundle = build_bundle(next_world, moved)
        transitions.append(
            TransitionRecord(
                channels=bundle.channels.stack(),
                local=bundle.local_matrix(),
                actions=np.array(pending["actions"], dtype=int),
                reward=reward(outcome, reward_mode),
                next_channels=next_bundle.channels.stack(),
                next_local=next_bundle.local_matrix(),
                next_masks=next_bundle.mask_matrix(cells),
                terminal_factor=0 if t == time_limit else 1,
            )
        )
        pending["bundle"] = next_bundle

    trace, _, _ = run_episode(world, agents, policy, time_limit + 1, on_step=on_step)
    return transitions, trace


def greedy_policy(checkpoint: PolicyCheckpoint) -> Callable[[GridWorld, Sequence[AgentState], int], dict[int, int]]:
    """Epsilon-zero policy of a checkpoint, usable with ``run_episode``."""

    def act(world: GridWorld, agents: Sequence[AgentState], _t: int) -> dict[int, int]:
        bundle = build_bundle(world, agents)
        q = bundle_q_values(bundle, checkpoint)
        return {agent.id: masked_argmax(q[i], bundle.masks[i]) for i, agent in enumerate(agents)}

    return act


def evaluate_greedy(checkpoint: PolicyCheckpoint, scenarios: Sequence[ScenarioDocument]) -> float:
    """Mean completion rate of the epsilon-zero policy over ``scenarios``."""
    rates = []
    for scenario in scenarios:
        world, agents = scenario.build()
        check_compatible(checkpoint.topology, world, agents)
        trace, _, _ = run_episode(world, agents, greedy_policy(checkpoint), scenario.time_limit + 1)
        rates.append(completion_rate(trace, world))
    return float(np.mean(rates))


class ManfLearner:
    """Gradient steps on a checkpoint's eval networks."""

    def __init__(self, checkpoint: PolicyCheckpoint, lr: float, rho: float = nc.RMS_RHO, eps: float = nc.RMS_EPS):
        self.checkpoint = checkpoint
        self.lr = lr
        self.rho = rho
        self.eps = eps

    def _apply(self, batch: TransitionBatch, targets: np.ndarray) -> float:
        checkpoint = self.checkpoint
        loss, grads = checkpoint.network.loss_and_grads(
            checkpoint.eval_params, batch.channels, batch.local, batch.actions, targets
        )
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            largest = max(float(np.abs(checkpoint.eval_params[n]).max()) for n in checkpoint.eval_params)
            raise NumericError(
                f"Training diverged at step {checkpoint.step}: loss={loss}, largest |param|={largest:.3e}, "
                f"targets in [{targets.min():.3e}, {targets.max():.3e}]"
            )
        nc.rmsprop_step(checkpoint.eval_params, grads, self.lr, self.rho, self.eps)
        checkpoint.step += 1
        return loss

    def td_targets(self, batch: TransitionBatch, gamma: float) -> np.ndarray:
        """r + gamma * te * tgtMixing(s', max over legal cells of tgtAgent(o'))."""
        checkpoint = self.checkpoint
        network = checkpoint.network
        target = checkpoint.target_params
        s_next, _ = network.cnn.forward(target, batch.next_channels)
        q_next, _ = network.agent.forward(target, s_next, batch.next_local)
        best_next = masked_max_batch(q_next, batch.next_masks)
        mixed, _ = network.mixer.forward(target, s_next, best_next)
        return batch.rewards + gamma * batch.terminal_factors * mixed

    def train_step_dnn(self, records: Sequence[TransitionRecord]) -> float:
        """Regress the mixed value onto the immediate reward; no target networks."""
        batch = TransitionBatch.stack(records)
        return self._apply(batch, batch.rewards)

    def train_step_rl(self, records: Sequence[TransitionRecord], gamma: float, period: int) -> float:
        """One TD step on the eval networks; targets are synced every ``period`` steps."""
        batch = TransitionBatch.stack(records)
        loss = self._apply(batch, self.td_targets(batch, gamma))
        if self.checkpoint.step % period == 0:
            sync_targets(self.checkpoint)
        return loss


class ScenarioSource(Protocol):
    def sample(self, episode: int) -> ScenarioDocument: ...

    def evaluation_set(self, count: int) -> list[ScenarioDocument]: ...


class FixedScenarioSource:
    """Every episode starts from the same scenario."""

    def __init__(self, scenario: ScenarioDocument):
        self.scenario = scenario

    def sample(self, episode: int) -> ScenarioDocument:
        return self.scenario

    def evaluation_set(self, count: int) -> list[ScenarioDocument]:
        return [self.scenario]


class RecipeScenarioSource:
    """A fresh scenario per episode, seeded by the recipe seed plus the episode index."""

    EVAL_SEED_OFFSET = 1_000_000

    def __init__(self, recipe: ScenarioRecipe):
        self.recipe = recipe

    def _generate(self, seed: int) -> ScenarioDocument:
        return generate_seeded(self.recipe, seed)

    def sample(self, episode: int) -> ScenarioDocument:
        return self._generate(self.recipe.seed + episode)

    def evaluation_set(self, count: int) -> list[ScenarioDocument]:
        return [self._generate(self.recipe.seed + self.EVAL_SEED_OFFSET + k) for k in range(count)]


class ManfTrainer:
    """Alternates episode collection with one gradient step per collected transition."""

    def __init__(
        self,
        config: TrainConfig,
        source: ScenarioSource,
        checkpoint: PolicyCheckpoint | None = None,
        on_record: Callable[[TrainLogRecord], None] | None = None,
        on_checkpoint: Callable[[PolicyCheckpoint, str], None] | None = None,
    ):
        self.config = config
        self.source = source
        first = source.sample(0)
        if checkpoint is None:
            topology = NetTopology(
                height=first.height,
                width=first.width,
                agent_count=first.agent_count,
                embed_dim=config.embed_dim,
                hidden_mult=config.hidden_mult,
                use_cnn=config.use_cnn,
            )
            checkpoint = PolicyCheckpoint.initialize(topology, config.seed)
        self.checkpoint = checkpoint
        self.learner = ManfLearner(checkpoint, config.lr, config.rms_rho, config.rms_eps)
        self.rng = np.random.default_rng(config.seed)
        self.buffer = ReplayBuffer(config.replay_capacity, np.random.default_rng(config.seed + 1))
        self.eval_scenarios = source.evaluation_set(config.eval_episodes)
        self.on_record = on_record
        self.on_checkpoint = on_checkpoint
        self.log: list[TrainLogRecord] = []

    def epsilon(self) -> float:
        c = self.config
        return epsilon_at(self.checkpoint.step, c.epsilon_start, c.epsilon_end, c.epsilon_decay_steps)

    def train_step(self, records: Sequence[TransitionRecord]) -> float:
        if self.config.algorithm == "dnn":
            return self.learner.train_step_dnn(records)
        return self.learner.train_step_rl(records, self.config.gamma, self.config.target_period)

    def fit(self) -> tuple[PolicyCheckpoint, list[TrainLogRecord]]:
        config = self.config
        logger.info(
            f"Training {config.label} for {config.max_steps} steps "
            f"(reward {config.reward_mode}, batch {config.batch_size}, lr {config.lr})"
        )
        episode = 0
        while self.checkpoint.step < config.max_steps:
            scenario = self.source.sample(episode)
            world, agents = scenario.build()
            epsilon = self.epsilon()
            transitions, trace = collect_episode(
                world, agents, self.checkpoint, scenario.time_limit, epsilon, config.reward_mode, self.rng
            )
            logger.debug(f"Episode {episode}: epsilon {epsilon:.3f}, completed {trace.completed} tasks")
            episode += 1
            for record in transitions:
                self.buffer.add(record)
                if len(self.buffer) < config.batch_size or self.checkpoint.step >= config.max_steps:
                    continue
                loss = self.train_step(self.buffer.sample(config.batch_size))
                self._log_step(loss, epsilon)
        if self.on_checkpoint:
            self.on_checkpoint(self.checkpoint, "final")
        logger.info(f"Training finished after {self.checkpoint.step} steps and {episode} episodes")
        return self.checkpoint, self.log

    def _log_step(self, loss: float, epsilon: float) -> None:
        step = self.checkpoint.step
        entry = TrainLogRecord(step=step, loss=loss, epsilon=epsilon)
        if self.config.eval_every and step % self.config.eval_every == 0:
            entry.eval_rate = evaluate_greedy(self.checkpoint, self.eval_scenarios)
            logger.info(f"Step {step}: loss {loss:.5f}, greedy completion rate {entry.eval_rate:.4f}")
        self.log.append(entry)
        if self.on_record:
            self.on_record(entry)
        if self.on_checkpoint and self.config.checkpoint_every and step % self.config.checkpoint_every == 0:
            self.on_checkpoint(self.checkpoint, f"step_{step}")


def fit(
    config: TrainConfig,
    source: ScenarioSource,
    on_record: Callable[[TrainLogRecord], None] | None = None,
    on_checkpoint: Callable[[PolicyCheckpoint, str], None] | None = None,
) -> tuple[PolicyCheckpoint, list[TrainLogRecord]]:
    return ManfTrainer(config, source, on_record=on_record, on_checkpoint=on_checkpoint).fit()
