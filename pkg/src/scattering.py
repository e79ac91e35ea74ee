import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from loguru import logger
from scipy.linalg import null_space

from src.bvp import DEFAULT_KAPPA, DEFAULT_NU, check_cone, solve_passage
from src.errors import (ChartOverflow, DegenerateCriticalPoint, InnerNewtonFailure, NewtonFailure, SpecError,
                        TailTruncationWarning, TangencyWarning, TransversalityFailure)
from src.hamiltonian import HamiltonianSystem, LoopSpec, PhaseState
from src.integrator import SectionSpec, Trajectory, integrate_to_section, propagate
from src.manifold import ManifoldChart, limit_direction

DEFAULT_TAIL_CUT = 12.0
TAIL_TOLERANCE = 1e-10
GENFUN_KINDS = ("S_plus", "S_minus", "L", "L_T", "R_mu", "F", "F_mu")


def _require_adapted(sys: HamiltonianSystem) -> None:
    if not sys.adapted:
        raise SpecError(f"Generating functions need a system in adapted (q, p) coordinates; {sys.label} is not")


def _vec(value) -> np.ndarray:
    return np.atleast_1d(np.asarray(value, dtype=float))


def _split(vector, sizes) -> list[np.ndarray]:
    vector = _vec(vector)
    if len(vector) != sum(sizes):
        raise ValueError(f"Expected {sum(sizes)} arguments, got {len(vector)}")
    return np.split(vector, np.cumsum(sizes)[:-1])


@dataclass(frozen=True)
class GenFunSample:
    """One evaluation: value plus the conjugate coordinates its one-form prescribes, in argument order."""

    kind: str
    argument: np.ndarray
    value: float
    gradient: np.ndarray
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SphereChart:
    """Stereographic coordinates xi on the sphere |s| = radius, centred at radius * pole."""

    radius: float
    pole: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.pole) - 1

    @property
    def basis(self) -> np.ndarray:
        return null_space(np.asarray(self.pole, dtype=float)[None, :])

    def point(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(self.dim)
        s = 1.0 + float(xi @ xi)
        return self.radius * ((2.0 - s) * self.pole + 2.0 * self.basis @ xi) / s

    def coordinates(self, point) -> np.ndarray:
        unit = np.asarray(point, dtype=float) / self.radius
        return self.basis.T @ unit / (1.0 + float(self.pole @ unit))

    def jacobian(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(self.dim)
        s = 1.0 + float(xi @ xi)
        numerator = (2.0 - s) * self.pole + 2.0 * self.basis @ xi
        d_numerator = -2.0 * np.outer(self.pole, xi) + 2.0 * self.basis
        return self.radius * (d_numerator / s - np.outer(numerator, 2.0 * xi) / s ** 2)

    def pullback(self, xi, momentum) -> np.ndarray:
        """Conjugate of xi for a momentum paired with the sphere point."""
        return self.jacobian(xi).T @ np.asarray(momentum, dtype=float)


@dataclass(frozen=True)
class SectionShear:
    """Entry-section coordinate change x -> x + H (y - y_b).

    This is the time-one map of phi(y) = (y - y_b)^T H (y - y_b) / 2.
    """

    matrix: np.ndarray
    base: np.ndarray
    seed: int | None = None
    attempt: int = 0

    def apply(self, x, y) -> np.ndarray:
        return np.asarray(x, dtype=float) + self.matrix @ (np.asarray(y, dtype=float) - self.base)

    def potential(self, y) -> float:
        offset = np.asarray(y, dtype=float) - self.base
        return 0.5 * float(offset @ self.matrix @ offset)

    def value_shift(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(y @ (self.matrix @ (y - self.base))) - self.potential(y)

    @classmethod
    def random(cls, base, scale: float, rng: np.random.Generator, seed: int, attempt: int) -> "SectionShear":
        m = len(base)
        sample = rng.normal(size=(m, m))
        return cls(scale * 0.5 * (sample + sample.T), np.asarray(base, dtype=float), seed, attempt)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "base": self.base.tolist(), "seed": self.seed, "attempt": self.attempt}

    @classmethod
    def from_dict(cls, data: dict) -> "SectionShear":
        return cls(np.asarray(data["matrix"], dtype=float), np.asarray(data["base"], dtype=float),
                   data.get("seed"), data.get("attempt", 0))


def _shift(shear: SectionShear | None, y) -> float:
    return 0.0 if shear is None else shear.value_shift(y)


def genfun_S_plus(sys: HamiltonianSystem, chart: ManifoldChart, x_plus, y0, q_plus, tail_cut: float = DEFAULT_TAIL_CUT,
                  tol: float = 1e-10, shear: SectionShear | None = None) -> GenFunSample:
    """S_plus(x_plus, y0, q_plus) = <x0, y0> - J_plus along the stable asymptotic orbit.

    dS_plus = y_plus dx_plus + x0 dy0 + p_plus dq_plus.
    """
    _require_adapted(sys)
    d = sys.dims
    x_plus, y0, q_plus = _vec(x_plus), _vec(y0), _vec(q_plus)
    if np.linalg.norm(q_plus) > chart.radius * (1 + 1e-9):
        raise ChartOverflow(f"|q+|={np.linalg.norm(q_plus):.6g} exceeds chart radius {chart.radius}")
    lam = chart.lam(np.concatenate([x_plus, y0]))
    solution = solve_passage(sys, chart, x_plus, y0, q_plus, np.zeros(d.k), T=0.5 * tail_cut / lam, tol=tol,
                             shear=shear)
    start, end = solution.chart_start, solution.chart_end
    x0 = end[d.x]
    tail = float(np.linalg.norm(end[d.q])) ** 2 * (1.0 + float(np.linalg.norm(y0)))
    if tail > TAIL_TOLERANCE:
        logger.warning(f"S_plus tail estimate {tail:.3g} exceeds {TAIL_TOLERANCE}")
        warnings.warn(f"S_plus tail estimate {tail:.3g}", TailTruncationWarning)
    value = float(x0 @ y0) - solution.action + _shift(shear, start[d.y])
    gradient = np.concatenate([start[d.y], x0, start[d.p]])
    return GenFunSample("S_plus", np.concatenate([x_plus, y0, q_plus]), value, gradient,
                        {"x0": x0, "y_plus": start[d.y], "p_plus": start[d.p], "solution": solution, "tail": tail})


def genfun_S_minus(sys: HamiltonianSystem, chart: ManifoldChart, x0, y_minus, p_minus,
                   tail_cut: float = DEFAULT_TAIL_CUT, tol: float = 1e-10) -> GenFunSample:
    """S_minus(x0, y_minus, p_minus) = <x_minus, y_minus> + <q_minus, p_minus> - J_minus.

    dS_minus = y0 dx0 + x_minus dy_minus + q_minus dp_minus.
    """
    _require_adapted(sys)
    d = sys.dims
    x0, y_minus, p_minus = _vec(x0), _vec(y_minus), _vec(p_minus)
    if np.linalg.norm(p_minus) > chart.radius * (1 + 1e-9):
        raise ChartOverflow(f"|p-|={np.linalg.norm(p_minus):.6g} exceeds chart radius {chart.radius}")
    lam = chart.lam(np.concatenate([x0, y_minus]))
    solution = solve_passage(sys, chart, x0, y_minus, np.zeros(d.k), p_minus, T=0.5 * tail_cut / lam, tol=tol)
    start, end = solution.chart_start, solution.chart_end
    tail = float(np.linalg.norm(start[d.p])) ** 2 * (1.0 + float(np.linalg.norm(y_minus)))
    if tail > TAIL_TOLERANCE:
        logger.warning(f"S_minus tail estimate {tail:.3g} exceeds {TAIL_TOLERANCE}")
        warnings.warn(f"S_minus tail estimate {tail:.3g}", TailTruncationWarning)
    value = float(end[d.x] @ y_minus) + float(end[d.q] @ p_minus) - solution.action
    gradient = np.concatenate([start[d.y], end[d.x], end[d.q]])
    return GenFunSample("S_minus", np.concatenate([x0, y_minus, p_minus]), value, gradient,
                        {"y0": start[d.y], "x_minus": end[d.x], "q_minus": end[d.q], "solution": solution,
                         "tail": tail})


def genfun_L(sys: HamiltonianSystem, chart: ManifoldChart, Z, tol: float = 1e-10, inner_tol: float = 1e-11,
             max_iter: int = 30, step: float = 1e-6) -> GenFunSample:
    """Critical value over z0 of S_plus(x_plus, y0, q_plus) + S_minus(x0, y_minus, p_minus) - <x0, y0>.

    The reflection point z0 = (x0, y0) solves x0 = X(y0), y0 = Y(x0), where X and Y are the x0 and y0
    conjugates of S_plus and S_minus. Newton steps use forward-difference blocks dX/dy0 and dY/dx0.
    """
    d = sys.dims
    x_plus, y_minus, q_plus, p_minus = _split(Z, (d.m, d.m, d.k, d.k))
    x0, y0 = x_plus.copy(), y_minus.copy()
    eye = np.eye(d.m)
    for iteration in range(1, max_iter + 1):
        plus = genfun_S_plus(sys, chart, x_plus, y0, q_plus, tol=tol)
        minus = genfun_S_minus(sys, chart, x0, y_minus, p_minus, tol=tol)
        residual = np.concatenate([x0 - plus.extras["x0"], y0 - minus.extras["y0"]])
        gap = float(np.max(np.abs(residual)))
        logger.debug(f"Reflection-point Newton iteration {iteration}: residual={gap:.3e}")
        if gap <= inner_tol:
            break
        dX = np.column_stack([(genfun_S_plus(sys, chart, x_plus, y0 + step * e, q_plus, tol=tol).extras["x0"]
                               - plus.extras["x0"]) / step for e in eye])
        dY = np.column_stack([(genfun_S_minus(sys, chart, x0 + step * e, y_minus, p_minus, tol=tol).extras["y0"]
                               - minus.extras["y0"]) / step for e in eye])
        jacobian = np.block([[eye, -dX], [-dY, eye]])
        try:
            delta = np.linalg.solve(jacobian, -residual)
        except np.linalg.LinAlgError as exc:
            raise InnerNewtonFailure(f"Singular reflection-point Jacobian at iteration {iteration}") from exc
        x0, y0 = x0 + delta[:d.m], y0 + delta[d.m:]
    else:
        raise InnerNewtonFailure(f"Reflection point did not converge in {max_iter} iterations (residual {gap:.3e})")
    value = plus.value + minus.value - float(x0 @ y0)
    gradient = np.concatenate([plus.gradient[:d.m], minus.gradient[d.m:2 * d.m],
                               plus.gradient[2 * d.m:], minus.gradient[2 * d.m:]])
    return GenFunSample("L", _vec(Z), value, gradient,
                        {"zeta": np.concatenate([x0, y0]), "iterations": iteration, "S_plus": plus, "S_minus": minus})


def _passage_sample(kind: str, sys: HamiltonianSystem, solution, Z, y_minus, p_minus, value_action: float,
                    shear: SectionShear | None) -> GenFunSample:
    d = sys.dims
    start, end = solution.chart_start, solution.chart_end
    value = float(end[d.x] @ y_minus) + float(end[d.q] @ p_minus) - value_action + _shift(shear, start[d.y])
    gradient = np.concatenate([start[d.y], end[d.x], start[d.p], end[d.q]])
    return GenFunSample(kind, _vec(Z), value, gradient,
                        {"solution": solution, "T": solution.T, "zeta": solution.chart_midpoint[d.z]})


def genfun_L_T(sys: HamiltonianSystem, chart: ManifoldChart, Z, T: float, tol: float = 1e-10) -> GenFunSample:
    """Fixed-time passage generating function from the Hamilton action; dL_T has the same form as dL."""
    _require_adapted(sys)
    d = sys.dims
    x_plus, y_minus, q_plus, p_minus = _split(Z, (d.m, d.m, d.k, d.k))
    solution = solve_passage(sys, chart, x_plus, y_minus, q_plus, p_minus, T=T, tol=tol)
    return _passage_sample("L_T", sys, solution, Z, y_minus, p_minus, solution.hamilton_action, None)


def genfun_R_mu(sys: HamiltonianSystem, chart: ManifoldChart, Z, mu: float, tol: float = 1e-10,
                shear: SectionShear | None = None, nu: float = DEFAULT_NU, kappa: float = DEFAULT_KAPPA,
                guess: np.ndarray | None = None, dense: bool = False) -> GenFunSample:
    """Fixed-energy passage generating function from the Maupertuis action.

    dR_mu = y_plus dx_plus + x_minus dy_minus + p_plus dq_plus + q_minus dp_minus.
    """
    _require_adapted(sys)
    d = sys.dims
    x_plus, y_minus, q_plus, p_minus = _split(Z, (d.m, d.m, d.k, d.k))
    check_cone(q_plus, p_minus, chart.radius, nu, kappa, 1 if mu > 0 else -1)
    solution = solve_passage(sys, chart, x_plus, y_minus, q_plus, p_minus, mu=mu, tol=tol, guess=guess,
                             dense=dense, shear=shear)
    return _passage_sample("R_mu", sys, solution, Z, y_minus, p_minus, solution.action, shear)


def twist_term(q_plus, p_minus, mu: float, lam: float) -> np.ndarray:
    """Leading non-O(mu) correction -mu p_minus / (lambda <q_plus, p_minus>) to dR_mu/dq_plus."""
    q_plus, p_minus = _vec(q_plus), _vec(p_minus)
    return -mu * p_minus / (lam * float(q_plus @ p_minus))


@dataclass
class GenFunRecord:
    """Tabulated generating function with difference-quotient derivatives.

    Args:
        kind (str): One of GENFUN_KINDS.
        labels (tuple): Names of the argument blocks.
        sizes (tuple): Length of each argument block.
        evaluator (Callable): Flat argument -> GenFunSample.
        step (float): Base central-difference step.
    """

    kind: str
    labels: tuple
    sizes: tuple
    evaluator: Callable
    step: float = 1e-3
    offset: float = 0.0
    base: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in GENFUN_KINDS:
            raise SpecError(f"Unknown generating function kind {self.kind!r}")

    def sample(self, argument) -> GenFunSample:
        return self.evaluator(_vec(argument))

    def value(self, argument) -> float:
        return self.sample(argument).value - self.offset

    def conjugates(self, argument) -> np.ndarray:
        return self.sample(argument).gradient

    def fix_base(self, base) -> float:
        """Declare the value at ``base`` to be zero."""
        self.base = _vec(base)
        self.offset = self.evaluator(self.base).value
        return self.offset

    def gradient(self, argument, step: float | None = None) -> np.ndarray:
        """Richardson-extrapolated central differences of the value."""
        argument = _vec(argument)
        h = self.step if step is None else step

        def central(i: int, width: float) -> float:
            e = np.zeros_like(argument)
            e[i] = width
            return (self.evaluator(argument + e).value - self.evaluator(argument - e).value) / (2 * width)

        return np.array([(4 * central(i, h / 2) - central(i, h)) / 3 for i in range(len(argument))])

    def hessian(self, argument, step: float | None = None) -> np.ndarray:
        """Central differences of the conjugate coordinates; column j differentiates along argument j."""
        argument = _vec(argument)
        h = 0.1 * self.step if step is None else step
        columns = []
        for j in range(len(argument)):
            e = np.zeros_like(argument)
            e[j] = h
            columns.append((self.evaluator(argument + e).gradient - self.evaluator(argument - e).gradient) / (2 * h))
        return np.array(columns).T


def hessian_asymmetry(hessian: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(hessian))), 1e-300)
    return float(np.max(np.abs(hessian - hessian.T))) / scale


def genfun_record(kind: str, sys: HamiltonianSystem, chart: ManifoldChart, **params) -> GenFunRecord:
    """Record for S_plus, S_minus, L, L_T (param T) or R_mu (param mu) on one chart."""
    d = sys.dims
    m, k = d.m, d.k
    tol = params.pop("tol", 1e-10)
    if kind == "S_plus":
        return GenFunRecord(kind, ("x_plus", "y0", "q_plus"), (m, m, k),
                            lambda a: genfun_S_plus(sys, chart, *_split(a, (m, m, k)), tol=tol, **params))
    if kind == "S_minus":
        return GenFunRecord(kind, ("x0", "y_minus", "p_minus"), (m, m, k),
                            lambda a: genfun_S_minus(sys, chart, *_split(a, (m, m, k)), tol=tol, **params))
    labels, sizes = ("x_plus", "y_minus", "q_plus", "p_minus"), (m, m, k, k)
    if kind == "L":
        return GenFunRecord(kind, labels, sizes, lambda a: genfun_L(sys, chart, a, tol=tol))
    if kind == "L_T":
        return GenFunRecord(kind, labels, sizes, lambda a: genfun_L_T(sys, chart, a, params["T"], tol=tol))
    if kind == "R_mu":
        mu = params.pop("mu")
        return GenFunRecord(kind, labels, sizes, lambda a: genfun_R_mu(sys, chart, a, mu, tol=tol, **params))
    raise SpecError(f"Use poincare_record for kind {kind!r}")


@dataclass
class HeteroclinicOrbit:
    """Connection from c_minus to c_plus with its section crossings at the chart radius.

    ``trajectory`` follows the orbit from deep inside W- to deep inside W+ with time 0 at the
    exit crossing |p| = r.
    """

    c_minus: np.ndarray
    c_plus: np.ndarray
    v_minus: np.ndarray
    v_plus: np.ndarray
    exit_state: np.ndarray | None = None
    entry_state: np.ndarray | None = None
    flight_time: float = 0.0
    radius: float = 0.0
    residual: float = 0.0
    certificate: float = math.nan
    inner_entry: np.ndarray | None = None
    trajectory: Trajectory | None = None

    def exit_sphere(self, dims) -> SphereChart:
        p = self.exit_state[dims.p]
        return SphereChart(self.radius, p / np.linalg.norm(p))

    def entry_sphere(self, dims) -> SphereChart:
        q = self.entry_state[dims.q]
        return SphereChart(self.radius, q / np.linalg.norm(q))

    def section_data(self, dims) -> np.ndarray:
        """Base argument X = (y_minus, xi_minus, x_plus, xi_plus) of the Poincare generating function."""
        k = dims.k
        return np.concatenate([self.exit_state[dims.y], np.zeros(k - 1), self.entry_state[dims.x], np.zeros(k - 1)])

    def to_dict(self) -> dict:
        def listed(value):
            return None if value is None else np.asarray(value).tolist()

        return {
            "c_minus": listed(self.c_minus), "c_plus": listed(self.c_plus),
            "v_minus": listed(self.v_minus), "v_plus": listed(self.v_plus),
            "exit_state": listed(self.exit_state), "entry_state": listed(self.entry_state),
            "inner_entry": listed(self.inner_entry),
            "flight_time": self.flight_time, "radius": self.radius,
            "residual": self.residual, "certificate": self.certificate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeteroclinicOrbit":
        def array(value):
            return None if value is None else np.asarray(value, dtype=float)

        return cls(
            c_minus=array(data["c_minus"]), c_plus=array(data["c_plus"]),
            v_minus=array(data["v_minus"]), v_plus=array(data["v_plus"]),
            exit_state=array(data.get("exit_state")), entry_state=array(data.get("entry_state")),
            flight_time=float(data.get("flight_time", 0.0)), radius=float(data.get("radius", 0.0)),
            residual=float(data.get("residual", 0.0)), certificate=float(data.get("certificate", math.nan)),
            inner_entry=array(data.get("inner_entry")),
        )


def _chart_section(chart: ManifoldChart, part: str, radius: float, direction: str) -> SectionSpec:
    if chart.sys.adapted:
        return SectionSpec(part, radius, direction)
    d = chart.dims
    block = d.q if part == "q" else d.p
    return SectionSpec("function", 0.0, direction,
                       lambda state: float(np.linalg.norm(chart.to_chart(state)[block]) - radius))


def _tangent_columns(builder: Callable, base: np.ndarray, h: float = 1e-6) -> list[np.ndarray]:
    columns = []
    for i in range(len(base)):
        e = np.zeros_like(base)
        e[i] = h
        columns.append((builder(base + e) - builder(base - e)) / (2 * h))
    return columns


def _transversality_certificate(sys: HamiltonianSystem, chart_minus: ManifoldChart, chart_plus: ManifoldChart,
                                z_minus, p_inner, entry_chart, flight: float) -> float:
    d = sys.dims
    exit_native = chart_minus.from_chart(chart_minus.unstable_point(z_minus, p_inner))
    transport = propagate(sys, exit_native, flight, stm=True).stm
    unstable = _tangent_columns(
        lambda v: chart_minus.from_chart(chart_minus.unstable_point(v[:2 * d.m], v[2 * d.m:])),
        np.concatenate([z_minus, p_inner]))
    stable = _tangent_columns(
        lambda v: chart_plus.from_chart(chart_plus.stable_point(v[:2 * d.m], v[2 * d.m:])),
        np.concatenate([entry_chart[d.z], entry_chart[d.q]]))
    entry_native = chart_plus.from_chart(chart_plus.stable_point(entry_chart[d.z], entry_chart[d.q]))
    normal = sys.gradient(entry_native)
    normal = normal / np.linalg.norm(normal)
    projector = np.eye(d.n) - np.outer(normal, normal)
    columns = [projector @ (transport @ c) for c in unstable] + [projector @ c for c in stable]
    stacked = np.array([c / np.linalg.norm(c) for c in columns]).T
    singular = np.linalg.svd(stacked, compute_uv=False)
    return float(singular[d.n - 2])


def find_heteroclinic(sys: HamiltonianSystem, chart_minus: ManifoldChart, chart_plus: ManifoldChart, guess: dict,
                      inner_fraction: float = 0.1, tol: float = 1e-9, max_iter: int = 30,
                      integrator_tol: float = 1e-12, extension: float = 1e-7) -> HeteroclinicOrbit:
    """Newton on the exit direction so that the orbit leaving W-(c_minus) lands on the graph of W+.

    ``guess`` holds ``z_minus`` (departure corner), ``direction`` (exit direction in p) and
    ``flight_time`` (rough time from the exit to the entry section).
    """
    d = sys.dims
    z_minus = _vec(guess["z_minus"])
    direction = _vec(guess["direction"])
    direction = direction / np.linalg.norm(direction)
    max_time = 3.0 * float(guess.get("flight_time", 20.0)) + 20.0 / chart_minus.lam(z_minus)
    r = chart_minus.radius
    inner = SphereChart(inner_fraction * r, direction)
    entry_section = _chart_section(chart_plus, "q", inner_fraction * chart_plus.radius, "decreasing")

    def shoot(xi):
        p_inner = inner.point(xi)
        exit_native = chart_minus.from_chart(chart_minus.unstable_point(z_minus, p_inner))
        state, hit = integrate_to_section(sys, PhaseState.from_vector(exit_native, d), entry_section, max_time,
                                          tol=integrator_tol)
        entry = chart_plus.to_chart(state.to_vector())
        residual = entry[d.p] - chart_plus.f_plus(entry[d.z], entry[d.q])
        return residual, entry, hit, p_inner, exit_native

    xi = np.zeros(d.k - 1)
    residual, entry, hit, p_inner, exit_native = shoot(xi)
    iteration = 0
    while d.k > 1 and np.max(np.abs(residual)) > tol:
        iteration += 1
        if iteration > max_iter:
            raise NewtonFailure(f"Heteroclinic search stalled at residual {np.max(np.abs(residual)):.3e}")
        h = 1e-7
        columns = []
        for i in range(d.k - 1):
            e = np.zeros(d.k - 1)
            e[i] = h
            columns.append((shoot(xi + e)[0] - shoot(xi - e)[0]) / (2 * h))
        step = np.linalg.lstsq(np.array(columns).T, -residual, rcond=None)[0]
        xi = xi + step
        residual, entry, hit, p_inner, exit_native = shoot(xi)
        logger.debug(f"Heteroclinic Gauss-Newton step {iteration}: |r|={np.max(np.abs(residual)):.3e}")
    residual_norm = float(np.max(np.abs(residual)))
    if residual_norm > 1e3 * tol:
        raise NewtonFailure(f"Orbit from z={z_minus.tolist()} misses W+ by {residual_norm:.3e}")

    start = PhaseState.from_vector(exit_native, d)
    exit_state, to_exit = integrate_to_section(sys, start, _chart_section(chart_minus, "p", r, "increasing"),
                                               max_time, tol=integrator_tol)
    entry_state, flight = integrate_to_section(sys, exit_state, _chart_section(chart_plus, "q", chart_plus.radius,
                                                                              "decreasing"),
                                               max_time, tol=integrator_tol)
    exit_vec, entry_vec = exit_state.to_vector(), entry_state.to_vector()
    c_plus = chart_plus.straightening(entry[d.z]).forward(entry)[d.z]
    v_minus = limit_direction(sys, chart_minus, z_minus, p_minus=chart_minus.to_chart(exit_vec)[d.p]).vector
    v_plus = limit_direction(sys, chart_plus, c_plus, q_plus=chart_plus.to_chart(entry_vec)[d.q]).vector
    certificate = _transversality_certificate(sys, chart_minus, chart_plus, z_minus, p_inner, entry, hit)
    if certificate < 1e-6:
        logger.warning(f"Transversality certificate {certificate:.3g} below 1e-6")
        warnings.warn(f"Heteroclinic intersection is numerically tangent ({certificate:.3g})", TangencyWarning)

    lam_minus, lam_plus = chart_minus.lam(z_minus), chart_plus.lam(c_plus)
    back = math.log(inner_fraction * r / extension) / lam_minus
    ahead = math.log(inner_fraction * chart_plus.radius / extension) / lam_plus
    earlier = propagate(sys, exit_native, -back, tol=integrator_tol, dense=True, t_offset=-to_exit)
    later = propagate(sys, exit_native, hit + ahead, tol=integrator_tol, dense=True, t_offset=-to_exit)
    trajectory = Trajectory.concatenate([earlier.trajectory, later.trajectory])
    orbit = HeteroclinicOrbit(
        c_minus=z_minus, c_plus=c_plus, v_minus=v_minus, v_plus=v_plus,
        exit_state=exit_vec, entry_state=entry_vec, flight_time=flight, radius=r,
        residual=residual_norm, certificate=certificate, inner_entry=entry, trajectory=trajectory,
    )
    logger.info(f"Heteroclinic {np.round(z_minus, 6).tolist()} -> {np.round(c_plus, 6).tolist()}: "
                f"flight {flight:.6g}, residual {residual_norm:.2e}, certificate {certificate:.3g}")
    return orbit


@dataclass
class HeteroclinicChain:
    """Orbits sigma_i with corners c_i = sigma_i(-infinity); periodic chains close up modulo n."""

    orbits: list
    periodic: bool = True
    label: str = ""

    def __len__(self) -> int:
        return len(self.orbits)

    @property
    def corners(self) -> list[np.ndarray]:
        return [orbit.c_minus for orbit in self.orbits]

    def corner_indices(self) -> range:
        return range(len(self.orbits)) if self.periodic else range(1, len(self.orbits))

    @property
    def angles(self) -> list[float]:
        return [symplectic_angle(self, i) for i in self.corner_indices()]

    def corner_mismatch(self) -> float:
        gaps = [np.max(np.abs(self.orbits[i - 1].c_plus - self.orbits[i].c_minus)) for i in self.corner_indices()]
        return float(max(gaps, default=0.0))

    def to_dict(self) -> dict:
        return {"label": self.label, "periodic": self.periodic, "angles": self.angles,
                "orbits": [orbit.to_dict() for orbit in self.orbits]}


def planted_chain(sys: HamiltonianSystem, spec: LoopSpec, chart: ManifoldChart, **options) -> HeteroclinicChain:
    """Period-one chain of the loop system at the fixed corner of its scattering map."""
    corner = spec.critical_corner()
    direction = np.zeros(spec.k)
    direction[0] = 1.0
    flight = 2.0 * abs(spec.exit_time(chart.radius, corner))
    orbit = find_heteroclinic(sys, chart, chart, {"z_minus": corner, "direction": direction, "flight_time": flight},
                              **options)
    chain = HeteroclinicChain([orbit], periodic=True, label="loop")
    logger.info(f"Planted loop chain: corner mismatch {chain.corner_mismatch():.2e}, angle {chain.angles[0]:.6g}")
    return chain


def symplectic_angle(chain: HeteroclinicChain, i: int) -> float:
    """omega(v_plus, v_minus) = -<v_plus, v_minus> at corner i (incoming sigma_{i-1}, outgoing sigma_i)."""
    n = len(chain.orbits)
    incoming = chain.orbits[(i - 1) % n]
    outgoing = chain.orbits[i % n]
    return -float(np.dot(incoming.v_plus, outgoing.v_minus))


def chain_positive(chain: HeteroclinicChain) -> tuple[bool, float]:
    angles = chain.angles
    margin = float(min(angles))
    return margin > 0, margin


def save_chain(chain: HeteroclinicChain, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(chain.to_dict(), indent=2, sort_keys=True))
    logger.info(f"Saved chain with {len(chain)} orbits to {path}")
    return path


def load_chain(path: str | Path) -> HeteroclinicChain:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File {path} does not exist.")
    data = json.loads(path.read_text())
    orbits = [HeteroclinicOrbit.from_dict(entry) for entry in data["orbits"]]
    logger.info(f"Loaded chain with {len(orbits)} orbits from {path}")
    return HeteroclinicChain(orbits, bool(data.get("periodic", True)), data.get("label", ""))


def poincare_F_mu(sys: HamiltonianSystem, orbit: HeteroclinicOrbit, X, mu: float = 0.0,
                  shear: SectionShear | None = None, tol: float = 1e-12, max_iter: int = 30,
                  guess: np.ndarray | None = None, dense: bool = False,
                  determinant_floor: float = 1e-8) -> GenFunSample:
    """Generating function F_mu(y_minus, xi_minus, x_plus, xi_plus) of the section-to-section map on H = mu.

    F = J + <x_minus, y_minus> + <q_minus, p_minus> with J the action between the sections;
    dF = p_plus dq_plus + y_plus dx_plus + x_minus dy_minus + q_minus dp_minus.
    """
    _require_adapted(sys)
    d = sys.dims
    m, k = d.m, d.k
    y_minus, xi_minus, x_plus, xi_plus = _split(X, (m, k - 1, m, k - 1))
    exit_sphere, entry_sphere = orbit.exit_sphere(d), orbit.entry_sphere(d)
    p_minus, q_plus = exit_sphere.point(xi_minus), entry_sphere.point(xi_plus)
    if guess is None:
        guess = np.concatenate([orbit.exit_state[d.x], orbit.exit_state[d.q], [orbit.flight_time]])
    unknowns = np.array(guess, dtype=float)
    determinant = math.nan

    def evaluate(u: np.ndarray, stm: bool):
        start = np.concatenate([u[:m], y_minus, u[m:m + k], p_minus])
        flight = propagate(sys, start, u[-1], stm=stm)
        end = flight.end
        entry_x = end[d.x] if shear is None else shear.apply(end[d.x], end[d.y])
        residual = np.concatenate([[sys.energy(start) - mu], entry_x - x_plus, end[d.q] - q_plus])
        return start, flight, residual

    for iteration in range(max_iter + 1):
        start, flight, residual = evaluate(unknowns, stm=True)
        norm = float(np.max(np.abs(residual)))
        if norm <= tol:
            break
        if iteration == max_iter:
            raise NewtonFailure(f"Section-to-section solve stalled at |r|={norm:.3e}")
        end = flight.end
        phi = flight.stm
        velocity = sys.vector_field(end)
        gradient = sys.gradient(start)
        x_rows = phi[d.x] if shear is None else phi[d.x] + shear.matrix @ phi[d.y]
        x_velocity = velocity[d.x] if shear is None else velocity[d.x] + shear.matrix @ velocity[d.y]
        jac = np.zeros((1 + m + k, m + k + 1))
        jac[0, :m], jac[0, m:m + k] = gradient[d.x], gradient[d.q]
        jac[1:1 + m, :m], jac[1:1 + m, m:m + k], jac[1:1 + m, -1] = x_rows[:, d.x], x_rows[:, d.q], x_velocity
        jac[1 + m:, :m], jac[1 + m:, m:m + k], jac[1 + m:, -1] = phi[d.q][:, d.x], phi[d.q][:, d.q], velocity[d.q]
        determinant = float(np.linalg.det(jac))
        if abs(determinant) < determinant_floor:
            raise TransversalityFailure("Section-to-section map is not a twist in the chosen coordinates", determinant)
        step = np.linalg.solve(jac, -residual)
        alpha = 1.0
        while alpha > 1e-3:
            if np.max(np.abs(evaluate(unknowns + alpha * step, stm=False)[2])) < norm:
                break
            alpha *= 0.5
        unknowns = unknowns + alpha * step
    final = propagate(sys, start, unknowns[-1], tol=1e-12, action=True, dense=dense)
    end = final.end
    value = final.action + float(start[d.x] @ y_minus) + float(start[d.q] @ p_minus) + _shift(shear, end[d.y])
    gradient = np.concatenate([start[d.x], exit_sphere.pullback(xi_minus, start[d.q]),
                               end[d.y], entry_sphere.pullback(xi_plus, end[d.p])])
    kind = "F" if mu == 0 else "F_mu"
    return GenFunSample(kind, _vec(X), value, gradient,
                        {"start": start, "end": end, "flight_time": float(unknowns[-1]), "unknowns": unknowns,
                         "determinant": determinant, "trajectory": final.trajectory, "iterations": iteration})


def poincare_record(sys: HamiltonianSystem, orbit: HeteroclinicOrbit, mu: float = 0.0,
                    shear: SectionShear | None = None) -> GenFunRecord:
    d = sys.dims
    sizes = (d.m, d.k - 1, d.m, d.k - 1)
    return GenFunRecord("F" if mu == 0 else "F_mu", ("y_minus", "xi_minus", "x_plus", "xi_plus"), sizes,
                        lambda a: poincare_F_mu(sys, orbit, a, mu, shear=shear))


def transverse_poincare(sys: HamiltonianSystem, orbit: HeteroclinicOrbit, X, mu: float = 0.0, seed: int = 0,
                        retries: int = 8, scale: float = 0.1, **options) -> tuple[GenFunSample, SectionShear | None]:
    """poincare_F_mu, retrying with seeded random entry shears when the twist determinant degenerates."""
    try:
        return poincare_F_mu(sys, orbit, X, mu, **options), None
    except TransversalityFailure as e:
        failure = e
        logger.warning(f"Unsheared section map degenerate ({e}); trying up to {retries} shears")
    rng = np.random.default_rng(seed)
    for attempt in range(1, retries + 1):
        shear = SectionShear.random(orbit.entry_state[sys.dims.y], scale, rng, seed, attempt)
        try:
            sample = poincare_F_mu(sys, orbit, X, mu, shear=shear, **options)
            logger.info(f"Entry shear attempt {attempt} (seed {seed}) restored transversality")
            return sample, shear
        except TransversalityFailure as e:
            failure = e
            logger.warning(f"Shear attempt {attempt} failed: {e}")
    raise failure


@dataclass(frozen=True)
class BranchPoint:
    """Scattering-map branch at (x, y_next): value S and its derivatives y = dS/dx, x_next = dS/dy_next."""

    x: np.ndarray
    y_next: np.ndarray
    value: float
    y: np.ndarray
    x_next: np.ndarray
    section: np.ndarray | None = None
    condition: float = math.nan


def scattering_branch(sys: HamiltonianSystem, chart: ManifoldChart, orbit: HeteroclinicOrbit, x_minus, y_plus,
                      mu: float = 0.0, X0=None, shear: SectionShear | None = None, tol: float = 1e-9,
                      max_iter: int = 20, step: float = 1e-6) -> BranchPoint:
    """Critical value over section data X of G = S_minus - F + S_plus at the query (x_minus, y_plus)."""
    d = sys.dims
    m, k = d.m, d.k
    x_minus, y_plus = _vec(x_minus), _vec(y_plus)
    exit_sphere, entry_sphere = orbit.exit_sphere(d), orbit.entry_sphere(d)
    X = orbit.section_data(d) if X0 is None else _vec(X0).copy()
    guess = {"F": None}

    def pieces(point: np.ndarray):
        y_m, xi_m, x_p, xi_p = _split(point, (m, k - 1, m, k - 1))
        minus = genfun_S_minus(sys, chart, x_minus, y_m, exit_sphere.point(xi_m))
        middle = poincare_F_mu(sys, orbit, point, mu, shear=shear, guess=guess["F"])
        plus = genfun_S_plus(sys, chart, x_p, y_plus, entry_sphere.point(xi_p), shear=shear)
        guess["F"] = middle.extras["unknowns"]
        return minus, middle, plus

    def mismatch(point: np.ndarray):
        minus, middle, plus = pieces(point)
        _, xi_m, _, xi_p = _split(point, (m, k - 1, m, k - 1))
        f_x, f_xi_m, f_y, f_xi_p = _split(middle.gradient, (m, k - 1, m, k - 1))
        residual = np.concatenate([
            minus.extras["x_minus"] - f_x,
            exit_sphere.pullback(xi_m, minus.extras["q_minus"]) - f_xi_m,
            plus.extras["y_plus"] - f_y,
            entry_sphere.pullback(xi_p, plus.extras["p_plus"]) - f_xi_p,
        ])
        return residual, (minus, middle, plus)

    condition = math.nan
    for iteration in range(max_iter + 1):
        residual, (minus, middle, plus) = mismatch(X)
        norm = float(np.max(np.abs(residual)))
        logger.debug(f"Scattering branch iteration {iteration}: |grad G|={norm:.3e}")
        if norm <= tol:
            break
        if iteration == max_iter:
            raise InnerNewtonFailure(f"Scattering branch did not converge (|grad G|={norm:.3e})")
        columns = []
        for j in range(len(X)):
            e = np.zeros_like(X)
            e[j] = step
            columns.append((mismatch(X + e)[0] - mismatch(X - e)[0]) / (2 * step))
        hessian = np.array(columns).T
        condition = float(np.linalg.cond(hessian))
        if condition > 1e10:
            raise DegenerateCriticalPoint(f"Inner critical point degenerate (condition {condition:.3g})")
        X = X + np.linalg.solve(hessian, -residual)
    value = minus.value - middle.value + plus.value
    return BranchPoint(x_minus, y_plus, value, minus.extras["y0"], plus.extras["x0"], X, condition)


class ScatteringBranch:
    """Callable branch (x, y_next) -> BranchPoint that warm-starts from its previous critical point."""

    def __init__(self, sys: HamiltonianSystem, chart: ManifoldChart, orbit: HeteroclinicOrbit, mu: float = 0.0,
                 shear: SectionShear | None = None, tol: float = 1e-9):
        self.sys = sys
        self.chart = chart
        self.orbit = orbit
        self.mu = mu
        self.shear = shear
        self.tol = tol
        self._section = None

    def __call__(self, x, y_next) -> BranchPoint:
        point = scattering_branch(self.sys, self.chart, self.orbit, x, y_next, self.mu, X0=self._section,
                                  shear=self.shear, tol=self.tol)
        self._section = point.section
        return point
