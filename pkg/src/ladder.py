"""Energy-ladder helpers shared by the scaling studies."""

from dataclasses import dataclass
from multiprocessing import Pool
from typing import Callable, Iterable

import numpy as np
from loguru import logger
from scipy.stats import linregress

from src.errors import ConfigError

DEFAULT_LADDER = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def validate_ladder(ladder: Iterable[float]) -> list[float]:
    """Strictly decreasing list of positive energies."""
    try:
        values = [float(mu) for mu in ladder]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Energy ladder must be a list of numbers: {e}") from e
    if not values:
        raise ConfigError("Energy ladder is empty")
    if any(mu <= 0 for mu in values):
        raise ConfigError(f"Energy ladder must be positive, got {values}")
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"Energy ladder must be strictly decreasing, got {values}")
    return values


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    rvalue: float
    stderr: float

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "rvalue": self.rvalue, "stderr": self.stderr}


def loglog_fit(xs, ys) -> LogLogFit:
    """Least-squares line through (log x, log y)."""
    xs, ys = np.asarray(xs, dtype=float), np.abs(np.asarray(ys, dtype=float))
    if len(xs) < 2:
        raise ValueError("A log-log fit needs at least two points")
    result = linregress(np.log(xs), np.log(ys))
    return LogLogFit(float(result.slope), float(result.intercept), float(result.rvalue), float(result.stderr))


def linear_fit(xs, ys) -> LogLogFit:
    result = linregress(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    return LogLogFit(float(result.slope), float(result.intercept), float(result.rvalue), float(result.stderr))


def run_ladder(task: Callable, items: list, workers: int = 1) -> list:
    """Apply ``task`` to every item; results keep the order of ``items`` whatever the pool size.

    ``task`` must be picklable (a module-level function or a functools.partial of one) when workers > 1.
    """
    if workers < 0:
        raise ConfigError(f"Worker count must be non-negative, got {workers}")
    if workers <= 1 or len(items) <= 1:
        return [task(item) for item in items]
    logger.info(f"Running {len(items)} ladder points on {workers} workers")
    with Pool(workers) as pool:
        return pool.map(task, items)
