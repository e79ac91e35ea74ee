import math

import numpy as np
import pytest
from src.errors import ConfigError
from src.ladder import DEFAULT_LADDER, linear_fit, loglog_fit, run_ladder, validate_ladder


def _square(value):
    return value * value


def test_validate_ladder_accepts_default():
    assert validate_ladder(DEFAULT_LADDER) == list(DEFAULT_LADDER)


@pytest.mark.parametrize("ladder", [[], ["a", 1e-3], [1e-3, -1e-4], [1e-4, 1e-3], [1e-3, 1e-3]])
def test_validate_ladder_rejects_malformed(ladder):
    with pytest.raises(ConfigError):
        validate_ladder(ladder)


def test_loglog_fit_recovers_power_law():
    xs = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    fit = loglog_fit(xs, 3.0 * xs ** 1.5)
    assert fit.slope == pytest.approx(1.5)
    assert fit.intercept == pytest.approx(math.log(3.0))
    assert fit.to_dict()["rvalue"] == pytest.approx(1.0)


def test_loglog_fit_needs_two_points():
    with pytest.raises(ValueError):
        loglog_fit([1e-3], [1.0])


def test_linear_fit_slope():
    fit = linear_fit([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    assert fit.slope == pytest.approx(2.0)
    assert fit.intercept == pytest.approx(1.0)


def test_run_ladder_keeps_order():
    assert run_ladder(_square, [3, 1, 2]) == [9, 1, 4]
    assert run_ladder(_square, [3, 1, 2], workers=2) == [9, 1, 4]


def test_run_ladder_rejects_negative_workers():
    with pytest.raises(ConfigError):
        run_ladder(_square, [1], workers=-1)
