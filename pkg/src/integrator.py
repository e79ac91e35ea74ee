from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger
from scipy.integrate import solve_ivp

from src.errors import NoCrossing, StepFailure, Tangency
from src.hamiltonian import Dims, HamiltonianSystem, PhaseState

DEFAULT_METHOD = "DOP853"


def solver_tolerances(tol: float) -> tuple[float, float]:
    """rtol/atol pair; atol is kept far below rtol so small transverse components stay relative-accurate."""
    return tol, tol * 1e-6


@dataclass(frozen=True)
class Segment:
    """Dense-output piece covering global times [t0, t1]; global time = local time + shift."""

    t0: float
    t1: float
    solution: object
    shift: float
    size: int

    def __call__(self, t):
        return self.solution(np.asarray(t, dtype=float) - self.shift)[: self.size]


@dataclass(frozen=True)
class Trajectory:
    """Sampled states with a dense interpolant over [times[0], times[-1]]."""

    times: np.ndarray
    states: np.ndarray
    segments: tuple
    dims: Dims
    energy_drift: float = 0.0

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def _segment_for(self, t: float) -> Segment:
        for segment in self.segments:
            if segment.t0 - 1e-12 <= t <= segment.t1 + 1e-12:
                return segment
        raise ValueError(f"Time {t} outside trajectory range [{self.t0}, {self.t1}]")

    def __call__(self, t) -> np.ndarray:
        if np.ndim(t) == 0:
            return self._segment_for(float(t))(float(t))
        return np.array([self._segment_for(float(s))(float(s)) for s in t])

    def at(self, t: float) -> PhaseState:
        return PhaseState.from_vector(self(t), self.dims)

    def sample(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        times = np.linspace(self.t0, self.t1, count)
        return times, self(times)

    def to_frame(self, sys: HamiltonianSystem, count: int | None = None) -> pd.DataFrame:
        if count is None:
            times, states = self.times, self.states
        else:
            times, states = self.sample(count)
        d = self.dims
        columns = (["t"] + [f"x{i + 1}" for i in range(d.m)] + [f"y{i + 1}" for i in range(d.m)]
                   + [f"q{i + 1}" for i in range(d.k)] + [f"p{i + 1}" for i in range(d.k)] + ["H"])
        energies = np.array([sys.energy(s) for s in states])
        return pd.DataFrame(np.column_stack([times, states, energies]), columns=columns)

    def save_csv(self, path: str | Path, sys: HamiltonianSystem, count: int | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame(sys, count).to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Saved trajectory to {path}")
        return path

    def shifted(self, offset: float) -> "Trajectory":
        """Same trajectory with every global time moved by ``offset``."""
        segments = tuple(Segment(s.t0 + offset, s.t1 + offset, s.solution, s.shift + offset, s.size)
                         for s in self.segments)
        return Trajectory(self.times + offset, self.states, segments, self.dims, self.energy_drift)

    @classmethod
    def concatenate(cls, pieces: list["Trajectory"]) -> "Trajectory":
        pieces = sorted(pieces, key=lambda piece: piece.t0)
        times = np.concatenate([piece.times for piece in pieces])
        states = np.concatenate([piece.states for piece in pieces])
        order = np.argsort(times, kind="stable")
        segments = tuple(segment for piece in pieces for segment in piece.segments)
        drift = max(piece.energy_drift for piece in pieces)
        return cls(times[order], states[order], segments, pieces[0].dims, drift)


@dataclass(frozen=True)
class Propagation:
    """Result of one flow evaluation.

    ``action`` is the integral of y dx + p dq and ``hamilton_action`` the integral of
    y dx + p dq - H dt, both oriented forward in time over the covered interval.
    """

    start: np.ndarray
    end: np.ndarray
    duration: float
    stm: np.ndarray | None
    action: float
    hamilton_action: float
    trajectory: Trajectory | None
    events: object = None


def propagate(sys: HamiltonianSystem, start, duration: float, tol: float = 1e-12, stm: bool = False,
              action: bool = False, dense: bool = False, t_offset: float = 0.0,
              events: list | None = None) -> Propagation:
    """Flow ``start`` for ``duration`` (any sign), optionally with the tangent map and action integrals.

    ``t_offset`` is the global time of ``start`` for the returned trajectory.
    """
    d = sys.dims
    n = d.n
    start = np.asarray(start, dtype=float)

    def rhs(t, u):
        s = u[:n]
        v = sys.vector_field(s)
        parts = [v]
        if stm:
            phi = u[n:n + n * n].reshape(n, n)
            parts.append((sys.field_jacobian(s) @ phi).ravel())
        if action:
            rate = float(s[d.y] @ v[d.x] + s[d.p] @ v[d.q])
            parts.append(np.array([rate, rate - sys.energy(s)]))
        return np.concatenate(parts)

    u0 = [start]
    if stm:
        u0.append(np.eye(n).ravel())
    if action:
        u0.append(np.zeros(2))
    u0 = np.concatenate(u0)
    if duration == 0.0:
        return Propagation(start, start.copy(), 0.0, np.eye(n) if stm else None, 0.0, 0.0, None)

    rtol, atol = solver_tolerances(tol)
    result = solve_ivp(rhs, (0.0, duration), u0, method=DEFAULT_METHOD, rtol=rtol, atol=atol,
                       dense_output=dense, events=events)
    if result.status == -1:
        raise StepFailure(f"Integration failed after t={result.t[-1]:.6g}: {result.message}")
    end = result.y[:, -1]
    sign = 1.0 if duration > 0 else -1.0
    trajectory = None
    if dense:
        times = result.t + t_offset
        states = result.y[:n].T
        segment = Segment(float(min(times[0], times[-1])), float(max(times[0], times[-1])),
                          result.sol, t_offset, n)
        if sign < 0:
            times, states = times[::-1], states[::-1]
        trajectory = Trajectory(times, states, (segment,), d, _energy_drift(sys, states))
    matrix = end[n:n + n * n].reshape(n, n) if stm else None
    action_value = sign * float(end[-2]) if action else 0.0
    hamilton_value = sign * float(end[-1]) if action else 0.0
    return Propagation(start, end[:n].copy(), float(result.t[-1]), matrix, action_value, hamilton_value,
                       trajectory, result if events is not None else None)


def _energy_drift(sys: HamiltonianSystem, states: np.ndarray) -> float:
    energies = np.array([sys.energy(s) for s in states])
    return float(np.max(np.abs(energies - energies[0])))


def integrate(sys: HamiltonianSystem, s0: PhaseState, t_span: tuple[float, float], tol: float = 1e-10) -> Trajectory:
    """Adaptive DOP853 solution on ``t_span`` with dense output."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    propagation = propagate(sys, s0.to_vector(), t1 - t0, tol=tol, dense=True, t_offset=t0)
    trajectory = propagation.trajectory
    if trajectory.energy_drift > 100 * tol * max(1.0, abs(t1 - t0)):
        logger.warning(f"Energy drift {trajectory.energy_drift:.3g} exceeds the tolerance budget on {sys.label}")
    return trajectory


def integrate_variational(sys: HamiltonianSystem, s0: PhaseState, duration: float,
                          tol: float = 1e-10) -> tuple[Trajectory, np.ndarray]:
    """Trajectory together with the state transition matrix over ``duration``."""
    propagation = propagate(sys, s0.to_vector(), duration, tol=tol, stm=True, dense=True)
    return propagation.trajectory, propagation.stm


@dataclass(frozen=True)
class SectionSpec:
    """Cross section {|q| = r}, {|p| = r} or the zero set of a scalar function of the state."""

    kind: str
    radius: float = 0.0
    direction: str = "any"
    function: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("q", "p", "function"):
            raise ValueError(f"Unknown section kind {self.kind!r}")
        if self.kind != "function" and self.radius <= 0:
            raise ValueError("Section radius must be positive")
        if self.direction not in ("increasing", "decreasing", "any"):
            raise ValueError(f"Unknown crossing direction {self.direction!r}")

    def value(self, state: np.ndarray, dims: Dims) -> float:
        if self.kind == "q":
            return float(np.linalg.norm(state[dims.q]) - self.radius)
        if self.kind == "p":
            return float(np.linalg.norm(state[dims.p]) - self.radius)
        return float(self.function(state))

    def gradient(self, state: np.ndarray, dims: Dims) -> np.ndarray:
        grad = np.zeros_like(state)
        if self.kind in ("q", "p"):
            part = dims.q if self.kind == "q" else dims.p
            norm = np.linalg.norm(state[part])
            grad[part] = state[part] / norm if norm > 0 else 0.0
            return grad
        h = 1e-7
        for i in range(len(state)):
            step = np.zeros_like(state)
            step[i] = h
            grad[i] = (self.function(state + step) - self.function(state - step)) / (2 * h)
        return grad

    @property
    def sign(self) -> int:
        return {"increasing": 1, "decreasing": -1, "any": 0}[self.direction]

    @property
    def scale(self) -> float:
        return self.radius if self.radius > 0 else 1.0


def integrate_to_section(sys: HamiltonianSystem, s0: PhaseState, section: SectionSpec, max_time: float,
                         tol: float = 1e-10, time_scale: float = 1.0) -> tuple[PhaseState, float]:
    """First crossing of ``section`` within ``max_time`` (negative for backward search)."""
    d = sys.dims

    def event(t, u):
        return section.value(u[:d.n], d)

    event.terminal = True
    event.direction = section.sign if max_time > 0 else -section.sign
    propagation = propagate(sys, s0.to_vector(), max_time, tol=tol, dense=True, events=[event])
    result = propagation.events
    if len(result.t_events[0]) == 0:
        raise NoCrossing(f"No {section.direction} crossing of the {section.kind}-section within t={max_time}")
    hit_time = float(result.t_events[0][0])
    state = np.asarray(result.y_events[0][0][:d.n], dtype=float)
    segment = propagation.trajectory.segments[0]
    for _ in range(8):
        g = section.value(state, d)
        rate = float(section.gradient(state, d) @ sys.vector_field(state))
        if abs(rate) < 1e-8 * section.scale / time_scale:
            raise Tangency(f"Non-transverse crossing at t={hit_time:.6g} (rate {rate:.3g})")
        if abs(g) <= 1e-10 * section.scale:
            break
        hit_time -= g / rate
        state = segment(hit_time)
    logger.debug(f"Section {section.kind}={section.radius} reached at t={hit_time:.10g}")
    return PhaseState.from_vector(state, d), hit_time
