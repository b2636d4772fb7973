import csv
import io

import pytest

from src.config import settings
from src.exceptions import ConfigurationError
from src.repositories.checkpoint import CheckpointRepository
from src.schemas.harness import PRESETS, EpisodeResult, SwapMark
from src.services.evaluation import (
    battery_table_csv,
    car_ids,
    curves_csv,
    run_eval,
    swaps_at_cars,
    write_report,
)


@pytest.fixture
def checkpoint_path(tmp_path, small_checkpoint):
    """A 4x4, three-agent checkpoint on disk, matching the oracle4 recipe."""
    return str(CheckpointRepository(tmp_path / "checkpoints").save(small_checkpoint, "tiny"))


def episode(routes, swaps) -> EpisodeResult:
    return EpisodeResult(
        policy="greedy",
        recipe="hand",
        seed=0,
        initial_tasks=1,
        completed=0,
        rate=0.0,
        curve=[0, 0, 0],
        routes=routes,
        powers=[[1.0], [0.7], [1.0]],
        swaps=swaps,
    )


class TestRunEval:
    def test_every_policy_recipe_and_seed(self, checkpoint_path):
        """Episodes come out grouped by policy then seed, with full-length curves and routes."""
        report = run_eval(["greedy", "random", checkpoint_path], [PRESETS["oracle4"]], range(4), 2)
        assert len(report.episodes) == 12
        assert [e.policy for e in report.episodes[:4]] == ["greedy"] * 4
        assert [e.seed for e in report.episodes[:4]] == [0, 1, 2, 3]
        assert [s.policy for s in report.summaries] == ["greedy", "random", checkpoint_path]
        for e in report.episodes:
            assert 0.0 <= e.rate <= 1.0
            assert len(e.curve) == 2 + 2
            assert all(len(route) == 2 + 2 for route in e.routes)

    def test_completion_accounting(self):
        """Per-step counts add up to the total and the rate is exact."""
        report = run_eval(["greedy"], [PRESETS["desk8"]], range(5), 6)
        for e in report.episodes:
            assert sum(e.curve) == e.completed
            assert e.rate == e.completed / e.initial_tasks

    def test_summary_statistics(self):
        """Summaries report the episode count, mean rate, swap total and mean curve."""
        report = run_eval(["greedy"], [PRESETS["oracle4"]], range(6), 2)
        (summary,) = report.summaries
        rates = [e.rate for e in report.episodes]
        assert summary.episodes == 6
        assert summary.mean_rate == pytest.approx(sum(rates) / 6)
        assert summary.total_swaps == sum(len(e.swaps) for e in report.episodes)
        assert len(summary.mean_curve) == 4

    def test_checkpoint_for_another_grid(self, checkpoint_path):
        """Evaluating a checkpoint on a grid of another size is a configuration error."""
        with pytest.raises(ConfigurationError):
            run_eval([checkpoint_path], [PRESETS["desk8"]], range(1), 6)

    def test_thread_count_does_not_change_the_report(self, monkeypatch):
        """Serial and threaded evaluation give byte-identical reports."""
        serial = run_eval(["greedy", "random"], [PRESETS["desk8"]], range(4), 6)
        monkeypatch.setattr(settings, "RELIEF_SWARM_THREADS", 4)
        parallel = run_eval(["greedy", "random"], [PRESETS["desk8"]], range(4), 6)
        assert parallel.model_dump_json() == serial.model_dump_json()


class TestSwapAccounting:
    def test_recorded_swaps_happen_on_car_cells(self):
        """Every recorded swap puts the UAV on its car's cell."""
        recipe = PRESETS["desk8"]
        report = run_eval(["greedy", "random"], [recipe], range(10), 6)
        for e in report.episodes:
            assert swaps_at_cars(e, car_ids(recipe))

    def test_swap_away_from_every_car_is_caught(self):
        """A swap whose UAV and car are apart fails the check."""
        swap = SwapMark(moment=1, uav_id=0, car_id=1, prev_pow=0.1)
        assert swaps_at_cars(episode([[0, 1, 2], [0, 1, 2]], [swap]), [1])
        assert not swaps_at_cars(episode([[0, 1, 2], [0, 1, 3]], [swap]), [1])

    def test_car_ids_follow_the_numbering(self):
        """Cars take the ids after all UAVs and workers."""
        assert car_ids(PRESETS["desk8"]) == [6]
        assert car_ids(PRESETS["row1"]) == [35, 36, 37, 38, 39]


class TestTables:
    def test_battery_table_marks_every_swap(self):
        """The battery table starts full, stars each swap and ends with a swap total per policy."""
        report = run_eval(["greedy"], [PRESETS["desk8"]], range(6), 6)
        rows = list(csv.reader(io.StringIO(battery_table_csv(report))))
        assert rows[0] == ["policy", "recipe", "seed", "uav", *(f"m{k}" for k in range(8))]
        body, footer = rows[1:-1], rows[-1]
        assert len(body) == 6 * PRESETS["desk8"].uavs
        assert sum(cell.endswith("*") for row in body for cell in row[4:]) == report.summaries[0].total_swaps
        assert footer == ["greedy", "desk8", "total_swaps", "", str(report.summaries[0].total_swaps)]
        assert all(row[4] == "1.0000" for row in body)

    def test_swap_mark_column(self):
        """A swap at step 0 marks column m1 only."""
        report = run_eval(["greedy"], [PRESETS["oracle4"]], range(1), 2)
        e = report.episodes[0]
        e.swaps = [SwapMark(moment=0, uav_id=0, car_id=2, prev_pow=0.2)]
        rows = list(csv.reader(io.StringIO(battery_table_csv(report))))
        assert rows[1][5].endswith("*")
        assert not any(cell.endswith("*") for cell in rows[1][6:])

    def test_curve_rows(self):
        """Curve rows list per-step completions after the episode keys."""
        report = run_eval(["greedy"], [PRESETS["oracle4"]], range(3), 2)
        rows = list(csv.reader(io.StringIO(curves_csv(report))))
        assert rows[0] == ["policy", "recipe", "seed", "t0", "t1", "t2", "t3"]
        assert [int(x) for x in rows[1][3:]] == report.episodes[0].curve

    def test_reruns_write_identical_files(self, tmp_path, checkpoint_path):
        """Writing the same evaluation twice gives identical files."""
        outputs = []
        for run in ("a", "b"):
            report = run_eval(["greedy", checkpoint_path], [PRESETS["oracle4"]], range(3), 2)
            outputs.append([p.read_bytes() for p in write_report(report, tmp_path / run / "report.json")])
        assert outputs[0] == outputs[1]
        assert (tmp_path / "a" / "report_curves.csv").exists()
        assert (tmp_path / "a" / "report_battery.csv").exists()
