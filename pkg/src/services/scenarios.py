"""Seeded scenario generation from recipes, with uniform or density-weighted placement."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from src.exceptions import DimensionError, GenerationError
from src.models.density import DensityGrid
from src.schemas.harness import RangeSpec, ScenarioRecipe
from src.schemas.scenario import GroundAgentSpec, ScenarioDocument, UavSpec

logger = logging.getLogger(__name__)

ATTRIBUTE_DECIMALS = 2


def draw(spec: RangeSpec, rng: np.random.Generator) -> float:
    """A fixed value, or a draw from ``[lo, hi]``: integers if both bounds are whole."""
    if not isinstance(spec, tuple):
        return float(spec)
    lo, hi = spec
    if float(lo).is_integer() and float(hi).is_integer():
        return float(rng.integers(int(lo), int(hi) + 1))
    return round(float(rng.uniform(lo, hi)), ATTRIBUTE_DECIMALS)


def load_density(path: str | Path, height: int, width: int) -> DensityGrid:
    """Read a density grid from a JSON list of rows (or ``{"density": rows}``) or a CSV file."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as handle:
            rows = [[float(x) for x in row] for row in csv.reader(handle) if row]
    else:
        document = json.loads(path.read_text())
        rows = document["density"] if isinstance(document, dict) else document
    try:
        values = np.array(rows, dtype=float)
    except ValueError as e:
        raise DimensionError(f"Density file {path} is not a rectangular grid") from e
    if values.shape != (height, width):
        raise DimensionError(f"Density file {path} is {values.shape}, recipe grid is {(height, width)}")
    return DensityGrid.normalized(values)


def synth_density(height: int, width: int, seed: int, obst: np.ndarray | None = None) -> DensityGrid:
    """A few seeded Gaussian bumps standing in for check-in data."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:height, 0:width]
    values = np.zeros((height, width))
    for _ in range(int(rng.integers(2, 5))):
        center_row = rng.uniform(0, height)
        center_col = rng.uniform(0, width)
        sigma = rng.uniform(1.0, max(height, width) / 4 + 1.0)
        weight = rng.uniform(0.5, 1.5)
        values += weight * np.exp(-((rows - center_row) ** 2 + (cols - center_col) ** 2) / (2 * sigma**2))
    density = DensityGrid.normalized(values)
    return density.masked(obst) if obst is not None else density


def _density_for(recipe: ScenarioRecipe, obst: np.ndarray) -> DensityGrid:
    if recipe.density_file:
        density = load_density(recipe.density_file, recipe.height, recipe.width)
    else:
        density = synth_density(recipe.height, recipe.width, recipe.seed)
    return density.masked(obst)


def _place_tasks(
    recipe: ScenarioRecipe, free: np.ndarray, density: DensityGrid | None, rng: np.random.Generator
) -> np.ndarray:
    if recipe.tasks > len(free):
        raise GenerationError(f"{recipe.tasks} tasks do not fit {len(free)} free cells")
    if density is None:
        return rng.choice(free, size=recipe.tasks, replace=False)
    weights = density.probabilities()[free]
    available = int(np.count_nonzero(weights))
    if recipe.tasks > available:
        raise GenerationError(f"{recipe.tasks} tasks but only {available} cells have nonzero density")
    return rng.choice(free, size=recipe.tasks, replace=False, p=weights / weights.sum())


def _place_agents(
    recipe: ScenarioRecipe, free: np.ndarray, density: DensityGrid | None, rng: np.random.Generator
) -> list[int]:
    count = recipe.agent_count
    if count and len(free) == 0:
        raise GenerationError("There is no free cell to place agents on")
    if recipe.start_placement == "same":
        return [int(rng.choice(free))] * count
    if recipe.start_placement == "random":
        return [int(c) for c in rng.choice(free, size=count, replace=True)]
    weights = density.probabilities()[free]
    return [int(c) for c in rng.choice(free, size=count, replace=True, p=weights / weights.sum())]


def generate(recipe: ScenarioRecipe) -> ScenarioDocument:
    """Sample one scenario. Every quantity is a function of the recipe and its seed.

    Draw order: obstacles, tasks, start cells, then radii and consumption per agent.
    """
    rng = np.random.default_rng(recipe.seed)
    size = recipe.width * recipe.height
    if recipe.obstacles + recipe.tasks > size:
        raise GenerationError(f"{recipe.obstacles + recipe.tasks} obstacles and tasks exceed {size} cells")
    obstacles = np.sort(rng.choice(size, size=recipe.obstacles, replace=False))
    obst = np.zeros(size, dtype=bool)
    obst[obstacles] = True
    free = np.flatnonzero(~obst)

    density = None
    if "checkin" in (recipe.task_placement, recipe.start_placement):
        density = _density_for(recipe, obst)
    tasks = np.sort(_place_tasks(recipe, free, density if recipe.task_placement == "checkin" else None, rng))
    starts = iter(_place_agents(recipe, free, density, rng))

    uavs = [
        UavSpec(loc=next(starts), radius=draw(recipe.uav_radius, rng), csp=draw(recipe.csp, rng), pow=1.0)
        for _ in range(recipe.uavs)
    ]
    workers = [GroundAgentSpec(loc=next(starts), radius=draw(recipe.worker_radius, rng)) for _ in range(recipe.workers)]
    cars = [GroundAgentSpec(loc=next(starts), radius=draw(recipe.car_radius, rng)) for _ in range(recipe.cars)]

    scenario = ScenarioDocument(
        width=recipe.width,
        height=recipe.height,
        obstacles=[int(c) for c in obstacles],
        tasks=[int(c) for c in tasks],
        uavs=uavs,
        workers=workers,
        cars=cars,
        time_limit=recipe.time_limit,
        seed=recipe.seed,
    )
    logger.debug(
        f"Generated {recipe.name} seed {recipe.seed}: {len(scenario.tasks)} tasks, {scenario.agent_count} agents"
    )
    return scenario


def generate_seeded(recipe: ScenarioRecipe, seed: int, time_limit: int | None = None) -> ScenarioDocument:
    """``generate`` with the recipe's seed (and optionally time limit) replaced."""
    update: dict = {"seed": seed}
    if time_limit is not None:
        update["time_limit"] = time_limit
    return generate(recipe.model_copy(update=update))
