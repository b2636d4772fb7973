from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import ConfigurationError, PreconditionError
from src.models.world import StepOutcome
from src.repositories.checkpoint import decode_checkpoint, encode_checkpoint
from src.schemas.checkpoint import NetTopology
from src.schemas.harness import PRESETS
from src.schemas.scenario import GroundAgentSpec, ScenarioDocument, UavSpec
from src.schemas.training import TrainConfig
from src.services.baselines import greedy_policy, solve_exact
from src.services.gridworld import completion_rate, run_episode
from src.services.manf_nets import PolicyCheckpoint
from src.services.observation import build_bundle
from src.services.training import (
    FixedScenarioSource,
    ManfLearner,
    ManfTrainer,
    RecipeScenarioSource,
    ReplayBuffer,
    TransitionBatch,
    TransitionRecord,
    collect_episode,
    epsilon_at,
    evaluate_greedy,
    reward,
    select_actions,
)


def small_config(**overrides) -> TrainConfig:
    fields = dict(
        max_steps=30,
        batch_size=4,
        replay_capacity=50,
        target_period=5,
        eval_every=10,
        eval_episodes=1,
        checkpoint_every=0,
        embed_dim=4,
        hidden_mult=1,
        lr=1e-3,
        seed=3,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def collected(tiny_scenario, checkpoint, epsilon=0.5, seed=0):
    world, agents = tiny_scenario.build()
    return collect_episode(
        world, agents, checkpoint, tiny_scenario.time_limit, epsilon, "task_only", np.random.default_rng(seed)
    )


class TestEpsilonGreedy:
    def test_zero_epsilon_is_the_masked_argmax(self, rng):
        """Without exploration each agent takes its best legal cell."""
        q = np.array([[0.0, 5.0, 1.0, 9.0], [3.0, 2.0, 1.0, 0.0]])
        assert select_actions(q, [(0, 1, 2), (1, 2)], 0.0, rng) == [1, 1]

    def test_singleton_masks_are_forced(self, rng):
        """An agent with one legal move takes it at any epsilon."""
        q = rng.normal(size=(2, 4))
        for epsilon in (0.0, 0.5, 1.0):
            assert select_actions(q, [(3,), (0,)], epsilon, rng) == [3, 0]

    def test_full_exploration_is_uniform_within_the_mask(self, rng):
        """At epsilon one the draws are uniform over the mask, checked with a chi-square bound."""
        mask = (1, 4, 6, 7, 9)
        q = np.zeros((1, 10))
        q[0, 9] = 100.0
        draws = [select_actions(q, [mask], 1.0, rng)[0] for _ in range(10_000)]
        counts = np.array([draws.count(cell) for cell in mask])
        assert counts.sum() == 10_000
        expected = 10_000 / 5
        chi_square = float(((counts - expected) ** 2 / expected).sum())
        # 4 degrees of freedom; 18.47 is the 0.999 quantile
        assert chi_square < 18.47


class TestReward:
    def test_modes(self):
        """The bonus mode adds the relief sum to the task count."""
        outcome = StepOutcome(completed_cells=(1, 2), task_cpt=2, mitig_sum=0.318)
        assert reward(outcome, "task_only") == 2
        assert reward(outcome, "task_plus_mitig") == pytest.approx(2.318)

    def test_empty_outcome(self):
        """An empty step earns nothing in either mode."""
        assert reward(StepOutcome(), "task_only") == 0
        assert reward(StepOutcome(), "task_plus_mitig") == 0

    def test_unknown_mode(self):
        """Unknown reward modes are rejected."""
        with pytest.raises(PreconditionError):
            reward(StepOutcome(), "bonus")


class TestEpsilonSchedule:
    def test_linear_annealing(self):
        """Epsilon falls linearly from 1.0 to 0.1 over 1024 steps and then holds."""
        assert epsilon_at(0) == 1.0
        assert epsilon_at(512) == pytest.approx(0.55)
        assert epsilon_at(1024) == pytest.approx(0.1)
        assert epsilon_at(50_000) == pytest.approx(0.1)

    def test_negative_step(self):
        """Epsilon is undefined before step zero."""
        with pytest.raises(PreconditionError):
            epsilon_at(-1)


class TestTrainConfig:
    def test_defaults(self):
        """The default config carries the published hyperparameters."""
        config = TrainConfig()
        assert (config.gamma, config.lr, config.target_period) == (0.7, 1e-4, 200)
        assert (config.replay_capacity, config.batch_size) == (5000, 32)
        assert config.reward_mode == "task_only"
        assert config.label == "MANF-RL-RP"

    def test_variant_labels(self):
        """The algorithm, reward mode and extractor switch pick the report label."""
        assert TrainConfig(algorithm="dnn").reward_mode == "task_plus_mitig"
        assert TrainConfig(algorithm="dnn").label == "MANF-DNN-RP"
        assert TrainConfig(algorithm="dnn", use_cnn=False).label == "MANF-DNN-RP-temp"
        assert TrainConfig(reward_mode="task_plus_mitig").label == "MANF-RL-RP-temp"

    def test_discount_must_be_inside_the_unit_interval(self):
        """A discount of one fails validation."""
        with pytest.raises(ValidationError):
            TrainConfig(gamma=1.0)

    def test_one_scenario_source_only(self):
        """A config cannot name both a scenario and a recipe."""
        with pytest.raises(ValidationError):
            TrainConfig(scenario="a.json", recipe=PRESETS["oracle4"])


class TestReplayBuffer:
    def test_overwrites_the_oldest(self, rng):
        """A full buffer drops its oldest records first."""
        buffer = ReplayBuffer(3, rng)
        records = [TransitionRecord(*[np.zeros(1)] * 3, float(i), *[np.zeros(1)] * 3, 1) for i in range(5)]
        buffer.extend(records)
        assert len(buffer) == 3
        assert sorted(r.reward for r in buffer.sample(3)) == [2.0, 3.0, 4.0]

    def test_sampling_is_seeded(self):
        """Two buffers with the same seed sample the same records."""
        records = [TransitionRecord(*[np.zeros(1)] * 3, float(i), *[np.zeros(1)] * 3, 1) for i in range(20)]
        draws = []
        for _ in range(2):
            buffer = ReplayBuffer(20, np.random.default_rng(5))
            buffer.extend(records)
            draws.append([r.reward for r in buffer.sample(8)])
        assert draws[0] == draws[1]

    def test_empty_buffer(self, rng):
        """Sampling an empty buffer is a precondition failure."""
        with pytest.raises(PreconditionError):
            ReplayBuffer(2, rng).sample(1)


class TestCollection:
    def test_one_transition_per_moment(self, tiny_scenario, small_checkpoint):
        """An episode yields one transition per step and only the last is terminal."""
        transitions, trace = collected(tiny_scenario, small_checkpoint)
        assert len(transitions) == tiny_scenario.time_limit + 1
        assert [t.terminal_factor for t in transitions] == [1, 1, 0]
        assert trace.horizon == tiny_scenario.time_limit + 1

    def test_actions_stay_inside_the_masks(self, tiny_scenario, small_checkpoint):
        """Exploratory actions respect the mask of the state they were taken in."""
        world, agents = tiny_scenario.build()
        transitions, _ = collected(tiny_scenario, small_checkpoint, epsilon=1.0)
        masks = build_bundle(world, agents).mask_matrix(world.size)
        for record in transitions:
            assert all(masks[i, a] for i, a in enumerate(record.actions))
            masks = record.next_masks

    def test_collection_is_deterministic(self, tiny_scenario, small_checkpoint):
        """Collection with the same seed repeats routes and transitions."""
        first, trace_a = collected(tiny_scenario, small_checkpoint, seed=9)
        second, trace_b = collected(tiny_scenario, small_checkpoint, seed=9)
        assert trace_a.routes == trace_b.routes
        for a, b in zip(first, second):
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.next_channels, b.next_channels)

    def test_task_rewards_add_up_to_the_completion_rate(self, tiny_scenario, small_checkpoint):
        """Task rewards over an episode add up to the completed count."""
        world, _ = tiny_scenario.build()
        transitions, trace = collected(tiny_scenario, small_checkpoint, epsilon=1.0, seed=4)
        assert trace.sweep_cpt == 0
        total = sum(t.reward for t in transitions)
        assert total == pytest.approx(world.initial_task_count * completion_rate(trace, world))

    def test_incompatible_checkpoint(self, tiny_scenario):
        """A checkpoint for five agents cannot drive a three-agent scenario."""
        checkpoint = PolicyCheckpoint.initialize(NetTopology(height=4, width=4, agent_count=5), seed=0)
        with pytest.raises(ConfigurationError):
            collected(tiny_scenario, checkpoint)


class TestLearningSteps:
    def perfect_record(self, checkpoint, transition):
        """A copy of ``transition`` whose reward equals the network's own mixed value."""
        network = checkpoint.network
        channels = transition.channels[None]
        q_all = network.q_values(checkpoint.eval_params, channels, transition.local[None])
        chosen = np.take_along_axis(q_all, transition.actions[None, :, None], axis=2)[:, :, 0]
        q_tot = float(network.q_tot(checkpoint.eval_params, channels, chosen)[0])
        return replace(transition, reward=q_tot)

    def test_perfect_prediction_has_zero_loss(self, tiny_scenario, small_checkpoint):
        """A record the network already predicts leaves the parameters unchanged."""
        transitions, _ = collected(tiny_scenario, small_checkpoint)
        record = self.perfect_record(small_checkpoint, transitions[0])
        before = small_checkpoint.eval_params.copy()
        loss = ManfLearner(small_checkpoint, lr=1e-4).train_step_dnn([record])
        assert loss < 1e-20
        for name in before:
            assert np.allclose(small_checkpoint.eval_params[name], before[name], atol=1e-9)

    def test_single_record_loss(self, tiny_scenario, small_checkpoint):
        """A record off by 1.5 has a loss of 2.25 and counts as one step."""
        transitions, _ = collected(tiny_scenario, small_checkpoint)
        perfect = self.perfect_record(small_checkpoint, transitions[1])
        shifted = replace(perfect, reward=perfect.reward + 1.5)
        loss = ManfLearner(small_checkpoint, lr=1e-4).train_step_dnn([shifted])
        assert loss == pytest.approx(1.5**2, rel=1e-9)
        assert small_checkpoint.step == 1

    def test_loss_ignores_batch_order(self, tiny_scenario, small_checkpoint):
        """The loss of a batch does not depend on record order."""
        transitions, _ = collected(tiny_scenario, small_checkpoint)
        twin = PolicyCheckpoint(
            small_checkpoint.topology,
            small_checkpoint.eval_params.copy(),
            small_checkpoint.target_params.copy(),
        )
        forward = ManfLearner(small_checkpoint, lr=1e-4).train_step_rl(transitions, 0.7, 200)
        backward = ManfLearner(twin, lr=1e-4).train_step_rl(transitions[::-1], 0.7, 200)
        assert forward == pytest.approx(backward, rel=1e-12)

    def test_td_target_arithmetic(self, tiny_scenario, small_checkpoint):
        """TD targets are reward plus gamma times the target value, and just the reward at the end."""
        transitions, _ = collected(tiny_scenario, small_checkpoint)
        target = small_checkpoint.target_params
        for name in target:
            target[name][...] = 0
        target["mix.b2.b2"][...] = 2.0
        records = [replace(t, reward=1.0) for t in transitions]
        targets = ManfLearner(small_checkpoint, lr=1e-4).td_targets(TransitionBatch.stack(records), gamma=0.7)
        assert targets[0] == pytest.approx(2.4)
        assert targets[-1] == 1.0

    def test_targets_sync_every_period(self, tiny_scenario, small_checkpoint):
        """Targets stay stale until the sync period is reached."""
        transitions, _ = collected(tiny_scenario, small_checkpoint)
        learner = ManfLearner(small_checkpoint, lr=1e-3)
        for _ in range(2):
            learner.train_step_rl(transitions, 0.7, 3)
        assert not small_checkpoint.eval_params.equals(small_checkpoint.target_params)
        learner.train_step_rl(transitions, 0.7, 3)
        assert small_checkpoint.eval_params.equals(small_checkpoint.target_params)

    def test_empty_batch(self, small_checkpoint):
        """An empty batch cannot be trained on."""
        with pytest.raises(PreconditionError):
            ManfLearner(small_checkpoint, lr=1e-4).train_step_dnn([])


class TestFit:
    def test_log_has_one_record_per_step(self, tiny_scenario):
        """Fit logs every step and evaluates on the configured period."""
        checkpoint, log = ManfTrainer(small_config(), FixedScenarioSource(tiny_scenario)).fit()
        assert checkpoint.step == 30
        assert [r.step for r in log] == list(range(1, 31))
        assert [r.step for r in log if r.eval_rate is not None] == [10, 20, 30]
        assert all(r.loss >= 0 for r in log)
        assert all(0.0 <= r.eval_rate <= 1.0 for r in log if r.eval_rate is not None)

    def test_dnn_fit(self, tiny_scenario):
        """The one-step variant trains without the extractor."""
        checkpoint, log = ManfTrainer(
            small_config(algorithm="dnn", use_cnn=False, max_steps=8), FixedScenarioSource(tiny_scenario)
        ).fit()
        assert len(log) == 8
        assert not checkpoint.topology.use_cnn

    def test_fit_is_reproducible_and_reloadable(self, tiny_scenario):
        """Same config and seed give the same parameters, and a reloaded checkpoint evaluates the same."""
        first, _ = ManfTrainer(small_config(max_steps=12), FixedScenarioSource(tiny_scenario)).fit()
        second, _ = ManfTrainer(small_config(max_steps=12), FixedScenarioSource(tiny_scenario)).fit()
        assert first.eval_params.equals(second.eval_params)

        restored = decode_checkpoint(encode_checkpoint(first))
        assert evaluate_greedy(restored, [tiny_scenario]) == evaluate_greedy(first, [tiny_scenario])

    def test_checkpoint_callback(self, tiny_scenario):
        """Checkpoints are handed out on the period and once more at the end."""
        saved = []
        trainer = ManfTrainer(
            small_config(max_steps=10, checkpoint_every=4),
            FixedScenarioSource(tiny_scenario),
            on_checkpoint=lambda checkpoint, name: saved.append((name, checkpoint.step)),
        )
        trainer.fit()
        assert saved == [("step_4", 4), ("step_8", 8), ("final", 10)]

    def test_recipe_source_varies_scenarios(self):
        """Recipe sources draw a fresh scenario per episode and keep the evaluation seeds apart."""
        source = RecipeScenarioSource(PRESETS["oracle4"])
        first, second = source.sample(0), source.sample(1)
        assert first.seed != second.seed
        assert source.sample(0) == first
        assert {s.seed for s in source.evaluation_set(3)}.isdisjoint({first.seed, second.seed})


@pytest.mark.slow
class TestLearningAtDeskScale:
    """Training runs with the default optimizer settings on narrow networks; minutes each."""

    # The agents start two cells apart and can finish both tasks by meeting on 1 then 5.
    two_task_scenario = ScenarioDocument(
        width=4,
        height=4,
        tasks=[1, 5],
        uavs=[UavSpec(loc=0, radius=1, csp=0.3)],
        workers=[GroundAgentSpec(loc=2, radius=1)],
        cars=[GroundAgentSpec(loc=15, radius=1)],
        time_limit=2,
    )

    @staticmethod
    def narrow_config(**overrides) -> TrainConfig:
        fields = dict(hidden_mult=2, embed_dim=8, eval_every=0, checkpoint_every=0)
        fields.update(overrides)
        return TrainConfig(**fields)

    def test_reaches_the_oracle_optimum(self):
        """TD training completes both tasks of the two-task instance in most seeds."""
        world, agents = self.two_task_scenario.build()
        optimum = solve_exact(world, agents, self.two_task_scenario.time_limit + 1).optimal
        assert optimum == 2
        hits = 0
        for seed in range(10):
            checkpoint, _ = ManfTrainer(
                self.narrow_config(seed=seed, max_steps=5000),
                FixedScenarioSource(self.two_task_scenario),
            ).fit()
            rate = evaluate_greedy(checkpoint, [self.two_task_scenario])
            hits += round(rate * world.initial_task_count) == optimum
        assert hits >= 8

    def desk_rates(self, config: TrainConfig, scenarios) -> list[float]:
        checkpoint, _ = ManfTrainer(config, RecipeScenarioSource(PRESETS["desk8"])).fit()
        return [evaluate_greedy(checkpoint, [scenario]) for scenario in scenarios]

    def test_td_learning_beats_the_greedy_planner(self):
        """On desk8 the TD learner beats greedy on average and matches or beats the one-step learner."""
        scenarios = RecipeScenarioSource(PRESETS["desk8"]).evaluation_set(20)
        rl = self.desk_rates(self.narrow_config(max_steps=10_000), scenarios)
        dnn = self.desk_rates(self.narrow_config(algorithm="dnn", max_steps=10_000), scenarios)
        greedy = []
        for scenario in scenarios:
            world, agents = scenario.build()
            trace, _, _ = run_episode(world, agents, greedy_policy(), scenario.time_limit + 1)
            greedy.append(completion_rate(trace, world))
        assert np.mean(rl) > np.mean(greedy)
        assert np.mean(rl) >= np.mean(dnn)
        assert sum(r >= g for r, g in zip(rl, greedy)) >= 16

    def test_task_only_reward_beats_the_mitigation_bonus(self):
        """Dropping the battery bonus from the reward does not lower the mean completion rate."""
        scenarios = RecipeScenarioSource(PRESETS["desk8"]).evaluation_set(20)
        plain, bonus = [], []
        for seed in range(5):
            base = dict(seed=seed, max_steps=4000)
            plain.append(np.mean(self.desk_rates(self.narrow_config(**base), scenarios)))
            bonus.append(np.mean(self.desk_rates(self.narrow_config(reward_mode="task_plus_mitig", **base), scenarios)))
        assert np.mean(plain) >= np.mean(bonus)
