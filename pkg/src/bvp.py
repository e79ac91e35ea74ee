import math
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from src.errors import (ChartExit, ConeViolation, ContractionFailure, DomainError, NoConvergence, ShilnikovError,
                        SpecError, StepFailure)
from src.hamiltonian import HamiltonianSystem
from src.integrator import Trajectory, propagate
from src.manifold import ManifoldChart, StraighteningMap, limit_direction

DEFAULT_NU = 0.3
DEFAULT_KAPPA = 0.3
MAX_NEWTON_ITER = 40
PICARD_GRID = 801


def in_cone(q_plus, p_minus, radius: float, nu: float = DEFAULT_NU, kappa: float = DEFAULT_KAPPA,
            sign: int = 1) -> bool:
    """Membership in the positive (sign=1) or negative (sign=-1) boundary-data cone."""
    q_plus = np.atleast_1d(np.asarray(q_plus, dtype=float))
    p_minus = np.atleast_1d(np.asarray(p_minus, dtype=float))
    slack = 1e-9 * radius
    for norm in (np.linalg.norm(q_plus), np.linalg.norm(p_minus)):
        if norm < nu * radius - slack or norm > radius + slack:
            return False
    inner = float(q_plus @ p_minus)
    if sign > 0:
        return inner <= -kappa * radius ** 2 + slack * radius
    return inner >= kappa * radius ** 2 - slack * radius


def check_cone(q_plus, p_minus, radius: float, nu: float = DEFAULT_NU, kappa: float = DEFAULT_KAPPA,
               sign: int = 1) -> None:
    if not in_cone(q_plus, p_minus, radius, nu, kappa, sign):
        inner = float(np.atleast_1d(q_plus) @ np.atleast_1d(p_minus))
        cone = "positive" if sign > 0 else "negative"
        raise ConeViolation(f"Boundary data (|q+|={np.linalg.norm(q_plus):.4g}, |p-|={np.linalg.norm(p_minus):.4g}, "
                            f"<q+,p->={inner:.4g}) outside the {cone} cone for r={radius}, nu={nu}, kappa={kappa}")


@dataclass(frozen=True)
class ConnectionProblem:
    """Boundary data of one passage near the critical manifold; exactly one of T and mu is set."""

    z0: np.ndarray
    q_plus: np.ndarray
    p_minus: np.ndarray
    T: float | None = None
    mu: float | None = None

    def __post_init__(self):
        if (self.T is None) == (self.mu is None):
            raise SpecError("A connection problem needs exactly one of T (fixed time) and mu (fixed energy)")
        for name in ("z0", "q_plus", "p_minus"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def mode(self) -> str:
        return "time" if self.T is not None else "energy"

    def solve(self, sys: HamiltonianSystem, chart: ManifoldChart, tol: float = 1e-10) -> "ConnectionSolution":
        if self.mode == "time":
            return solve_fixed_time(sys, chart, self.z0, self.q_plus, self.p_minus, self.T, tol=tol)
        return solve_fixed_energy(sys, chart, self.z0, self.q_plus, self.p_minus, self.mu, tol=tol)


@dataclass
class ConnectionSolution:
    """Passage on [-T, T]; ``start`` = gamma(-T), ``end`` = gamma(T), ``midpoint`` = gamma(0) (native coordinates).

    ``action`` is the integral of y dx + p dq over [-T, T], ``hamilton_action`` subtracts H dt.
    """

    T: float
    mu: float
    start: np.ndarray
    end: np.ndarray
    midpoint: np.ndarray
    chart_start: np.ndarray
    chart_end: np.ndarray
    chart_midpoint: np.ndarray
    residuals: np.ndarray
    iterations: int
    action: float
    hamilton_action: float
    trajectory: Trajectory | None = None
    unknowns: np.ndarray | None = None
    outer_iterations: int = 0

    @property
    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.residuals)))

    def summary(self, dims) -> dict:
        def record(vector):
            return {"x": vector[dims.x].tolist(), "y": vector[dims.y].tolist(),
                    "q": vector[dims.q].tolist(), "p": vector[dims.p].tolist()}

        return {
            "T": self.T,
            "mu": self.mu,
            "z0": self.chart_midpoint[dims.z].tolist(),
            "q_plus": self.chart_start[dims.q].tolist(),
            "p_minus": self.chart_end[dims.p].tolist(),
            "endpoints": {"start": record(self.chart_start), "end": record(self.chart_end),
                          "midpoint": record(self.chart_midpoint)},
            "residuals": self.residuals.tolist(),
            "residual_norm": self.residual_norm,
            "newton_iterations": self.iterations,
            "outer_iterations": self.outer_iterations,
            "action": self.action,
            "hamilton_action": self.hamilton_action,
        }


def _chart_jacobian(chart: ManifoldChart, vector: np.ndarray) -> np.ndarray:
    if chart.sys.adapted:
        return np.eye(len(vector))
    h = 1e-7
    columns = []
    for i in range(len(vector)):
        step = np.zeros_like(vector)
        step[i] = h * max(1.0, abs(vector[i]))
        columns.append((chart.to_chart(vector + step) - chart.to_chart(vector - step)) / (2 * step[i]))
    return np.array(columns).T


class _ThreeSegmentShooter:
    """Multiple shooting over [-T, -T/2], [-T/2, 0], [0, T/2], [T/2, T] with unknowns gamma(-T/2), gamma(T/2)."""

    def __init__(self, sys: HamiltonianSystem, chart: ManifoldChart, T: float, integrator_tol: float):
        self.sys = sys
        self.chart = chart
        self.dims = sys.dims
        self.T = T
        self.integrator_tol = integrator_tol

    def propagations(self, unknowns: np.ndarray, stm: bool, dense: bool = False, action: bool = False):
        n = self.dims.n
        half = 0.5 * self.T
        s_a, s_b = unknowns[:n], unknowns[n:]
        options = {"tol": self.integrator_tol, "stm": stm, "dense": dense, "action": action}
        p1 = propagate(self.sys, s_a, -half, t_offset=-half, **options)
        p2 = propagate(self.sys, s_a, half, t_offset=-half, **options)
        p3 = propagate(self.sys, p2.end, half, t_offset=0.0, **options)
        p4 = propagate(self.sys, s_b, half, t_offset=half, **options)
        return p1, p2, p3, p4

    def residual(self, unknowns: np.ndarray, anchor: dict, stm: bool = True):
        d = self.dims
        n = d.n
        p1, p2, p3, p4 = self.propagations(unknowns, stm)
        chart = self.chart
        first, middle, last = chart.to_chart(p1.end), chart.to_chart(p2.end), chart.to_chart(p4.end)
        s_b = unknowns[n:]
        if anchor["kind"] == "midpoint":
            blocks = [middle[d.z] - anchor["z0"], first[d.q] - anchor["q_plus"], last[d.p] - anchor["p_minus"]]
        else:
            entry_x = first[d.x]
            shear = anchor.get("shear")
            if shear is not None:
                entry_x = shear.apply(first[d.x], first[d.y])
            blocks = [entry_x - anchor["x_plus"], first[d.q] - anchor["q_plus"],
                      last[d.y] - anchor["y_minus"], last[d.p] - anchor["p_minus"]]
        residual = np.concatenate(blocks + [p3.end - s_b])
        if not stm:
            return residual, None
        jac = np.zeros((2 * n, 2 * n))
        a, b = slice(0, n), slice(n, 2 * n)
        d1 = _chart_jacobian(chart, p1.end) @ p1.stm
        d4 = _chart_jacobian(chart, p4.end) @ p4.stm
        row = 0
        if anchor["kind"] == "midpoint":
            d2 = _chart_jacobian(chart, p2.end) @ p2.stm
            parts = [(d2[d.z], a), (d1[d.q], a), (d4[d.p], b)]
        else:
            entry_rows = d1[d.x] if shear is None else d1[d.x] + shear.matrix @ d1[d.y]
            parts = [(entry_rows, a), (d1[d.q], a), (d4[d.y], b), (d4[d.p], b)]
        for block, columns in parts:
            jac[row:row + block.shape[0], columns] = block
            row += block.shape[0]
        jac[row:, a] = p3.stm @ p2.stm
        jac[row:, b] = -np.eye(n)
        return residual, jac

    def outside_tube(self, unknowns: np.ndarray) -> bool:
        d = self.dims
        for vector in (unknowns[:d.n], unknowns[d.n:]):
            local = self.chart.to_chart(vector)
            if max(np.linalg.norm(local[d.q]), np.linalg.norm(local[d.p])) > 2 * self.chart.radius:
                return True
            if not self.chart.contains(local[d.z]):
                return True
        return False


def _damped_newton(shooter: _ThreeSegmentShooter, unknowns: np.ndarray, anchor: dict, tol: float,
                   accept_floor: float | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    floor = tol if accept_floor is None else accept_floor
    for iteration in range(MAX_NEWTON_ITER + 1):
        residual, jac = shooter.residual(unknowns, anchor)
        norm = float(np.max(np.abs(residual)))
        logger.debug(f"Shooting iteration {iteration}: |r|={norm:.3e}")
        if norm <= tol:
            return unknowns, residual, iteration
        if iteration == MAX_NEWTON_ITER:
            break
        try:
            step = np.linalg.solve(jac, -residual)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -residual, rcond=None)[0]
        alpha = 1.0
        while alpha >= 2.0 ** -12:
            trial = unknowns + alpha * step
            try:
                trial_residual, _ = shooter.residual(trial, anchor, stm=False)
                if np.max(np.abs(trial_residual)) < norm:
                    break
            except (StepFailure, DomainError):
                pass
            alpha *= 0.5
        else:
            if norm <= floor:
                logger.debug(f"Shooting stagnated at |r|={norm:.3e}; accepted")
                return unknowns, residual, iteration
            raise NoConvergence(f"Line search failed at |r|={norm:.3e} after {iteration} iterations")
        unknowns = trial
        if shooter.outside_tube(unknowns):
            raise ChartExit(f"Shooting iterate left the chart tube of radius 2r={2 * shooter.chart.radius}")
    raise NoConvergence(f"Shooting did not reach |r| <= {tol:.1e} in {MAX_NEWTON_ITER} iterations (|r|={norm:.3e})")


def _assemble(shooter: _ThreeSegmentShooter, unknowns: np.ndarray, residual: np.ndarray, iterations: int,
              dense: bool) -> ConnectionSolution:
    sys, chart = shooter.sys, shooter.chart
    pieces = shooter.propagations(unknowns, stm=False, dense=dense, action=True)
    p1, p2, p3, p4 = pieces
    trajectory = Trajectory.concatenate([piece.trajectory for piece in pieces]) if dense else None
    midpoint = p2.end
    return ConnectionSolution(
        T=shooter.T,
        mu=sys.energy(midpoint),
        start=p1.end, end=p4.end, midpoint=midpoint,
        chart_start=chart.to_chart(p1.end), chart_end=chart.to_chart(p4.end),
        chart_midpoint=chart.to_chart(midpoint),
        residuals=residual, iterations=iterations,
        action=sum(piece.action for piece in pieces),
        hamilton_action=sum(piece.hamilton_action for piece in pieces),
        trajectory=trajectory, unknowns=unknowns,
    )


def _asymptotic_seed(chart: ManifoldChart, z, q_plus, p_minus, T: float) -> np.ndarray:
    lam = chart.lam(z)
    decay, deep = math.exp(-0.5 * lam * T), math.exp(-1.5 * lam * T)
    z = np.asarray(z, dtype=float)
    s_a = np.concatenate([z, q_plus * decay, p_minus * deep])
    s_b = np.concatenate([z, q_plus * deep, p_minus * decay])
    return np.concatenate([chart.from_chart(s_a), chart.from_chart(s_b)])


def _picard_seed(chart: ManifoldChart, z0, q_plus, p_minus, T: float, tol: float) -> np.ndarray:
    d = chart.dims
    z0 = np.asarray(z0, dtype=float)
    straight = chart.straightening(z0)
    u_plus = straight.forward(chart.stable_point(z0, q_plus))[d.q]
    v_minus = straight.forward(chart.unstable_point(z0, p_minus))[d.p]
    solution = shilnikov_iterate(straight, z0, u_plus, v_minus, chart.lam(z0) * T, tol=tol)
    theta = time_reparametrization(solution)
    states = solution.states()
    seeds = []
    for t in (-0.5 * T, 0.5 * T):
        tau = np.interp(t, theta, solution.tau)
        point = np.array([np.interp(tau, solution.tau, column) for column in states.T])
        seeds.append(chart.from_chart(straight.inverse(point)))
    return np.concatenate(seeds)


def solve_fixed_time(sys: HamiltonianSystem, chart: ManifoldChart, z0, q_plus, p_minus, T: float,
                     tol: float = 1e-10, backend: str = "shooting", guess: np.ndarray | None = None,
                     integrator_tol: float = 1e-12, dense: bool = True,
                     accept_floor: float | None = None) -> ConnectionSolution:
    """Solve z(0) = z0, q(-T) = q_plus, p(T) = p_minus (chart coordinates) by three-segment shooting.

    ``backend="picard"`` seeds the shooting from the straightened integral-equation solution
    instead of the asymptotic concatenation.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    q_plus = np.atleast_1d(np.asarray(q_plus, dtype=float))
    p_minus = np.atleast_1d(np.asarray(p_minus, dtype=float))
    lam = chart.lam(z0)
    if T * lam < 1.0 - 1e-12:
        raise SpecError(f"Passage half-time T={T} is below 1/lambda={1 / lam:.6g}")
    if backend not in ("shooting", "picard"):
        raise SpecError(f"Unknown connection backend {backend!r}")
    shooter = _ThreeSegmentShooter(sys, chart, T, integrator_tol)
    if guess is None:
        if backend == "picard":
            guess = _picard_seed(chart, z0, q_plus, p_minus, T, tol=min(tol, 1e-12))
        else:
            guess = _asymptotic_seed(chart, z0, q_plus, p_minus, T)
    anchor = {"kind": "midpoint", "z0": z0, "q_plus": q_plus, "p_minus": p_minus}
    unknowns, residual, iterations = _damped_newton(shooter, guess, anchor, tol, accept_floor)
    solution = _assemble(shooter, unknowns, residual, iterations, dense)
    logger.debug(f"Fixed-time passage T={T:.10g}: mu={solution.mu:.6e}, {iterations} Newton steps")
    return solution


def asymptotic_T(chart: ManifoldChart, z0, q_plus, p_minus, mu: float, nu: float = DEFAULT_NU,
                 kappa: float = DEFAULT_KAPPA) -> float:
    """Leading-order passage half-time (|ln mu| + ln(lambda |<v+, v->|)) / (2 lambda) at z0."""
    if mu == 0:
        raise ValueError("The passage time diverges at mu = 0")
    sign = 1 if mu > 0 else -1
    check_cone(q_plus, p_minus, chart.radius, nu, kappa, sign)
    z0 = np.asarray(z0, dtype=float)
    lam = chart.lam(z0)
    v_plus = limit_direction(chart.sys, chart, z0, q_plus=q_plus).vector
    v_minus = limit_direction(chart.sys, chart, z0, p_minus=p_minus).vector
    pairing = -sign * float(v_plus @ v_minus)
    if pairing <= 0:
        raise ConeViolation(f"Limit directions give <v+, v-> of the wrong sign for mu={mu:.3g}")
    return (-math.log(abs(mu)) + math.log(lam * pairing)) / (2 * lam)


def solve_fixed_energy(sys: HamiltonianSystem, chart: ManifoldChart, z0, q_plus, p_minus, mu: float,
                       tol: float = 1e-10, nu: float = DEFAULT_NU, kappa: float = DEFAULT_KAPPA,
                       inner_tol: float = 1e-12, dense: bool = True, max_outer: int = 30) -> ConnectionSolution:
    """Find T with H = mu on the fixed-time passage; secant/Newton on ln(H / mu), brentq fallback."""
    T0 = asymptotic_T(chart, z0, q_plus, p_minus, mu, nu, kappa)
    lam = chart.lam(z0)
    state = {"guess": None, "count": 0}

    def solve_at(T: float) -> ConnectionSolution:
        solution = solve_fixed_time(sys, chart, z0, q_plus, p_minus, T, tol=inner_tol, guess=state["guess"],
                                    dense=False, accept_floor=tol)
        state["guess"] = solution.unknowns
        state["count"] += 1
        return solution

    def mismatch(solution: ConnectionSolution) -> float:
        ratio = solution.mu / mu
        if ratio <= 0:
            return math.inf if solution.T < T0 else -math.inf
        return math.log(ratio)

    T, slope = max(T0, 1.0 / lam), -2.0 * lam
    previous = None
    solution = None
    converged = False
    for _ in range(max_outer):
        try:
            solution = solve_at(T)
        except (NoConvergence, ChartExit) as e:
            logger.debug(f"Inner solve failed at T={T:.6g}: {e}")
            break
        f = mismatch(solution)
        logger.debug(f"Outer iteration T={T:.12g}: ln(H/mu)={f:.3e}")
        if not math.isfinite(f):
            break
        if abs(f) <= tol:
            converged = True
            break
        if previous is not None and previous[0] != T:
            secant = (f - previous[1]) / (T - previous[0])
            if secant < 0:
                slope = secant
        previous = (T, f)
        T = max(T - f / slope, 1.0 / lam)

    if not converged:
        logger.debug(f"Secant iteration failed for mu={mu:.3g}; bracketing around T0={T0:.6g}")
        state["guess"] = None

        def objective(t: float) -> float:
            return mismatch(solve_at(t))

        low, high = max(0.5 * T0, 1.0 / lam), 1.5 * T0 + 1.0 / lam
        try:
            while objective(low) < 0 and low > 1.0 / lam:
                low = max(0.5 * low, 1.0 / lam)
            while objective(high) > 0:
                high *= 1.5
            T = brentq(objective, low, high, xtol=1e-13, rtol=4 * np.finfo(float).eps)
            solution = solve_at(T)
        except (ShilnikovError, ValueError) as e:
            raise NoConvergence(f"Fixed-energy passage for mu={mu:.3g} did not converge: {e}") from e
        if abs(mismatch(solution)) > max(tol, 1e-9):
            raise NoConvergence(f"Fixed-energy passage for mu={mu:.3g} stalled at ln(H/mu)={mismatch(solution):.3e}")

    final = solve_fixed_time(sys, chart, z0, q_plus, p_minus, solution.T, tol=inner_tol, guess=solution.unknowns,
                             dense=dense, accept_floor=tol)
    final.outer_iterations = state["count"]
    logger.info(f"Fixed-energy passage mu={mu:.3e}: T={final.T:.12g} (asymptotic {T0:.12g}) "
                f"after {state['count']} inner solves")
    return final


def solve_passage(sys: HamiltonianSystem, chart: ManifoldChart, x_plus, y_minus, q_plus, p_minus,
                  T: float | None = None, mu: float | None = None, tol: float = 1e-10,
                  guess: np.ndarray | None = None, integrator_tol: float = 1e-12,
                  dense: bool = False, shear=None) -> ConnectionSolution:
    """Endpoint-anchored passage x(-T) = x_plus, q(-T) = q_plus, y(T) = y_minus, p(T) = p_minus.

    Fixed time when ``T`` is given, otherwise the half-time is tuned until H = ``mu``. A ``shear``
    replaces x_plus by the sheared entry coordinate x + H (y - y_b).
    """
    x_plus = np.atleast_1d(np.asarray(x_plus, dtype=float))
    y_minus = np.atleast_1d(np.asarray(y_minus, dtype=float))
    q_plus = np.atleast_1d(np.asarray(q_plus, dtype=float))
    p_minus = np.atleast_1d(np.asarray(p_minus, dtype=float))
    if (T is None) == (mu is None):
        raise SpecError("solve_passage needs exactly one of T and mu")
    anchor = {"kind": "endpoint", "x_plus": x_plus, "y_minus": y_minus, "q_plus": q_plus, "p_minus": p_minus,
              "shear": shear}
    z_guess = np.concatenate([x_plus, y_minus])

    def at_time(half: float, seed: np.ndarray | None, final: bool, inner: float) -> ConnectionSolution:
        shooter = _ThreeSegmentShooter(sys, chart, half, integrator_tol)
        start = seed if seed is not None else _asymptotic_seed(chart, z_guess, q_plus, p_minus, half)
        unknowns, residual, iterations = _damped_newton(shooter, start, anchor, inner, accept_floor=tol)
        return _assemble(shooter, unknowns, residual, iterations, dense and final)

    if T is not None:
        return at_time(T, guess, True, tol)

    lam = chart.lam(z_guess)
    T_guess = asymptotic_T(chart, z_guess, q_plus, p_minus, mu)
    current = {"seed": guess}

    def mismatch(half: float) -> float:
        solution = at_time(half, current["seed"], False, min(tol, 1e-12))
        current["seed"] = solution.unknowns
        ratio = solution.mu / mu
        return math.log(ratio) if ratio > 0 else (math.inf if half < T_guess else -math.inf)

    half, slope, previous = T_guess, -2.0 * lam, None
    for _ in range(30):
        f = mismatch(half)
        if not math.isfinite(f):
            break
        if abs(f) <= tol:
            return at_time(half, current["seed"], True, min(tol, 1e-12))
        if previous is not None and previous[0] != half:
            secant = (f - previous[1]) / (half - previous[0])
            if secant < 0:
                slope = secant
        previous = (half, f)
        half = max(half - f / slope, 1.0 / lam)
    raise NoConvergence(f"Endpoint-anchored passage at mu={mu:.3g} did not converge")


@dataclass
class StraightSolution:
    """Fixed point of the rescaled integral equations in straightened coordinates on tau in [-calT, calT]."""

    tau: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    lam_values: np.ndarray
    calT: float
    iterations: int
    lipschitz: float
    history: list = field(default_factory=list)

    @property
    def u(self) -> np.ndarray:
        return np.exp(-self.tau - self.calT)[:, None] * self.xi

    @property
    def v(self) -> np.ndarray:
        return np.exp(self.tau - self.calT)[:, None] * self.eta

    def states(self) -> np.ndarray:
        return np.hstack([self.w, self.u, self.v])

    @property
    def w_plus(self) -> np.ndarray:
        return self.w[0]

    @property
    def w_minus(self) -> np.ndarray:
        return self.w[-1]

    @property
    def u_minus(self) -> np.ndarray:
        return math.exp(-2 * self.calT) * self.xi[-1]

    @property
    def v_plus(self) -> np.ndarray:
        return math.exp(-2 * self.calT) * self.eta[0]


def shilnikov_iterate(straight: StraighteningMap, w0, u_plus, v_minus, calT: float, tol: float = 1e-12,
                      grid: int = PICARD_GRID, max_iter: int = 60) -> StraightSolution:
    """Picard iteration for w(0) = w0, u(-calT) = u_plus, v(calT) = v_minus in rescaled time tau.

    With u = exp(-tau - calT) xi and v = exp(tau - calT) eta the right-hand sides become
    bounded integrals; the iteration stops when successive iterates differ by at most ``tol``.
    """
    chart = straight.chart
    d = chart.dims
    w0 = np.asarray(w0, dtype=float)
    u_plus = np.atleast_1d(np.asarray(u_plus, dtype=float))
    v_minus = np.atleast_1d(np.asarray(v_minus, dtype=float))
    tau = np.linspace(-calT, calT, grid)
    centre = grid // 2
    grow = np.exp(tau + calT)[:, None]
    shrink = np.exp(calT - tau)[:, None]
    w = np.tile(w0, (grid, 1))
    xi = np.tile(u_plus, (grid, 1))
    eta = np.tile(v_minus, (grid, 1))
    ball = 2 * chart.radius
    lipschitz, previous_gap, history = 0.0, None, []
    lam_values = np.full(grid, chart.lam(w0))
    for iteration in range(1, max_iter + 1):
        u = np.exp(-tau - calT)[:, None] * xi
        v = np.exp(tau - calT)[:, None] * eta
        points = np.hstack([w, u, v])
        lam_values = np.array([chart.lam(point) for point in w])
        rescaled = straight.pushforward_field(points) / lam_values[:, None]
        u_rest = rescaled[:, d.q] + u
        v_rest = rescaled[:, d.p] - v
        g_w = rescaled[:, d.z]
        new_xi = u_plus + cumulative_simpson(grow * u_rest, x=tau, axis=0, initial=0.0)
        tail = cumulative_simpson(shrink * v_rest, x=tau, axis=0, initial=0.0)
        new_eta = v_minus - (tail[-1] - tail)
        drift = cumulative_simpson(g_w, x=tau, axis=0, initial=0.0)
        new_w = w0 + drift - drift[centre]
        gap = max(np.max(np.abs(new_w - w)), np.max(np.abs(new_xi - xi)), np.max(np.abs(new_eta - eta)))
        history.append(gap)
        if previous_gap is not None and previous_gap > 0:
            lipschitz = max(lipschitz, gap / previous_gap) if gap > tol else lipschitz
        w, xi, eta = new_w, new_xi, new_eta
        logger.debug(f"Picard iteration {iteration}: gap={gap:.3e}")
        size = max(np.max(np.abs(w - w0)), np.max(np.abs(xi)), np.max(np.abs(eta)))
        if not np.isfinite(size) or size > ball:
            raise ContractionFailure(f"Picard iterate left the ball of radius {ball}", lipschitz or math.inf)
        if gap <= tol:
            return StraightSolution(tau, w, xi, eta, lam_values, calT, iteration, lipschitz, history)
        if len(history) >= 4 and all(b > a for a, b in zip(history[-4:], history[-3:])):
            raise ContractionFailure("Picard gaps grow monotonically", lipschitz)
        previous_gap = gap
    raise ContractionFailure(f"No Picard convergence in {max_iter} iterations", lipschitz)


def time_reparametrization(solution: StraightSolution) -> np.ndarray:
    """Physical times theta(tau) = integral from 0 to tau of ds / lambda(w(s)) on the solution grid."""
    inverse = CubicSpline(solution.tau, 1.0 / solution.lam_values)
    antiderivative = inverse.antiderivative()
    return antiderivative(solution.tau) - antiderivative(0.0)


def largest_convergent_mu(sys: HamiltonianSystem, chart: ManifoldChart, z0, q_plus, p_minus, ladder,
                          tol: float = 1e-10) -> tuple[float | None, list[dict]]:
    """Largest ladder value for which the fixed-energy solve converges from the asymptotic guess."""
    records = []
    for mu in ladder:
        try:
            solution = solve_fixed_energy(sys, chart, z0, q_plus, p_minus, mu, tol=tol, dense=False)
            records.append({"mu": mu, "converged": True, "T": solution.T})
        except ShilnikovError as e:
            records.append({"mu": mu, "converged": False, "error": type(e).__name__})
    converged = [record["mu"] for record in records if record["converged"]]
    mu0 = max(converged) if converged else None
    logger.info(f"Empirical mu0 = {mu0} over {len(records)} ladder points")
    return mu0, records
