import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from loguru import logger
from scipy.linalg import null_space
from scipy.optimize import minimize_scalar

from src.bvp import DEFAULT_KAPPA, DEFAULT_NU
from src.errors import DegenerateOrbit, IllConditioned, NewtonFailure, SpecError
from src.hamiltonian import HamiltonianSystem
from src.integrator import Trajectory, propagate
from src.ladder import validate_ladder
from src.scattering import BranchPoint, HeteroclinicChain, genfun_R_mu, poincare_F_mu

DEGENERACY_CONDITION = 1e10
MONODROMY_CONDITION = 1e24


@dataclass
class DiscreteOrbitProblem:
    """Periodic corner sequence c_i = (x_i, y_i) for branches S_i(x_i, y_{i+1}) of the scattering map."""

    branches: list
    guesses: np.ndarray

    def __post_init__(self):
        self.guesses = np.atleast_2d(np.asarray(self.guesses, dtype=float))
        if len(self.branches) != len(self.guesses):
            raise SpecError(f"{len(self.branches)} branches for {len(self.guesses)} corner guesses")
        if self.guesses.shape[1] % 2:
            raise SpecError("Corner guesses must have even length (x, y)")

    @property
    def n(self) -> int:
        return len(self.branches)

    @property
    def m(self) -> int:
        return self.guesses.shape[1] // 2


@dataclass
class DiscreteOrbitSolution:
    corners: np.ndarray
    action: float
    hessian: np.ndarray
    condition: float
    determinant: float
    return_jacobian: np.ndarray
    gradient_norm: float
    iterations: int

    @property
    def nondegenerate(self) -> bool:
        return self.condition < DEGENERACY_CONDITION

    def return_spectrum(self) -> np.ndarray:
        return np.linalg.eigvals(self.return_jacobian)

    def to_dict(self) -> dict:
        spectrum = self.return_spectrum()
        return {
            "corners": self.corners.tolist(), "action": self.action, "condition": self.condition,
            "determinant": self.determinant, "gradient_norm": self.gradient_norm, "iterations": self.iterations,
            "return_spectrum": {"real": spectrum.real.tolist(), "imag": spectrum.imag.tolist()},
        }


def _branch_derivatives(branch: Callable, x: np.ndarray, Y: np.ndarray, step: float) -> tuple[np.ndarray, ...]:
    """Blocks (S_xx, S_xY, S_Yx, S_YY) by central differences of the branch derivatives."""
    m = len(x)
    blocks = {"xx": np.zeros((m, m)), "xY": np.zeros((m, m)), "Yx": np.zeros((m, m)), "YY": np.zeros((m, m))}
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        plus, minus = branch(x + e, Y), branch(x - e, Y)
        blocks["xx"][:, j] = (plus.y - minus.y) / (2 * step)
        blocks["Yx"][:, j] = (plus.x_next - minus.x_next) / (2 * step)
        plus, minus = branch(x, Y + e), branch(x, Y - e)
        blocks["xY"][:, j] = (plus.y - minus.y) / (2 * step)
        blocks["YY"][:, j] = (plus.x_next - minus.x_next) / (2 * step)
    return blocks["xx"], blocks["xY"], blocks["Yx"], blocks["YY"]


def branch_map_jacobian(S_xx, S_xY, S_Yx, S_YY) -> np.ndarray:
    """Jacobian of (x, y) -> (x', y') generated by y = dS/dx, x' = dS/dY, y' = Y."""
    inverse = np.linalg.inv(S_xY)
    return np.block([[S_Yx - S_YY @ inverse @ S_xx, S_YY @ inverse], [-inverse @ S_xx, inverse]])


def discrete_action(problem: DiscreteOrbitProblem, corners) -> tuple[float, np.ndarray, list[BranchPoint]]:
    """Sum of S_i(x_i, y_{i+1}) - <x_i, y_i> and its gradient, ordered (x_0, y_0, x_1, y_1, ...)."""
    n, m = problem.n, problem.m
    corners = np.asarray(corners, dtype=float).reshape(n, 2 * m)
    points = [problem.branches[i](corners[i, :m], corners[(i + 1) % n, m:]) for i in range(n)]
    value = sum(points[i].value - float(corners[i, :m] @ corners[i, m:]) for i in range(n))
    gradient = np.zeros((n, 2 * m))
    for i in range(n):
        gradient[i, :m] = points[i].y - corners[i, m:]
        gradient[i, m:] = points[(i - 1) % n].x_next - corners[i, :m]
    return float(value), gradient.ravel(), points


def solve_discrete_action(problem: DiscreteOrbitProblem, tol: float = 1e-10, max_iter: int = 30,
                          step: float = 1e-6) -> DiscreteOrbitSolution:
    """Newton on the gradient of the discrete action; returns corners and the nondegeneracy certificate."""
    n, m = problem.n, problem.m
    corners = problem.guesses.copy()
    size = 2 * m
    for iteration in range(max_iter + 1):
        value, gradient, points = discrete_action(problem, corners)
        derivatives = [_branch_derivatives(problem.branches[i], corners[i, :m], corners[(i + 1) % n, m:], step)
                       for i in range(n)]
        hessian = np.zeros((n * size, n * size))
        for i, (S_xx, S_xY, S_Yx, S_YY) in enumerate(derivatives):
            j = (i + 1) % n
            xi, yi = slice(i * size, i * size + m), slice(i * size + m, (i + 1) * size)
            xj, yj = slice(j * size, j * size + m), slice(j * size + m, (j + 1) * size)
            hessian[xi, xi] += S_xx
            hessian[xi, yj] += S_xY
            hessian[xi, yi] -= np.eye(m)
            hessian[yj, xi] += S_Yx
            hessian[yj, yj] += S_YY
            hessian[yj, xj] -= np.eye(m)
        norm = float(np.max(np.abs(gradient)))
        logger.debug(f"Discrete action iteration {iteration}: |grad|={norm:.3e}")
        condition = float(np.linalg.cond(hessian))
        if not condition < DEGENERACY_CONDITION:
            raise DegenerateOrbit("Discrete action Hessian is singular", condition)
        if norm <= tol:
            break
        if iteration == max_iter:
            raise NewtonFailure(f"Discrete action Newton stalled at |grad|={norm:.3e}")
        corners = corners + np.linalg.solve(hessian, -gradient).reshape(n, size)
    composed = np.eye(size)
    for block in derivatives:
        composed = branch_map_jacobian(*block) @ composed
    determinant = abs(float(np.linalg.det(composed - np.eye(size))))
    logger.info(f"Discrete orbit of period {n}: |det(DF - I)|={determinant:.4g}, Hessian condition {condition:.3g}")
    return DiscreteOrbitSolution(corners, value, hessian, condition, determinant, composed, norm, iteration)


@dataclass
class ShadowProblem:
    """Critical points of the sum over corners of R_i(Z_i) - F_i(X_i) on the energy surface H = mu.

    X_i = (y_minus, xi_minus, x_plus, xi_plus) holds the section data of orbit i: its exit at
    |p| = r (departing corner i) and its entry at |q| = r (arriving at corner i + 1).
    """

    sys: HamiltonianSystem
    charts: list
    chain: HeteroclinicChain
    mu: float
    shears: list | None = None
    nu: float = DEFAULT_NU
    kappa: float = DEFAULT_KAPPA
    tol: float = 1e-10
    _passage_seeds: dict = field(default_factory=dict, repr=False)
    _section_seeds: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.chain.periodic:
            raise SpecError("Shadowing needs a periodic chain")
        if not isinstance(self.charts, (list, tuple)):
            self.charts = [self.charts]
        if len(self.charts) == 1:
            self.charts = list(self.charts) * self.n
        if len(self.charts) != self.n:
            raise SpecError(f"{len(self.charts)} charts for a chain of {self.n} orbits")
        if self.shears is None:
            self.shears = [None] * self.n

    @property
    def n(self) -> int:
        return len(self.chain.orbits)

    @property
    def dims(self):
        return self.sys.dims

    @property
    def block_sizes(self) -> tuple[int, int, int, int]:
        d = self.dims
        return d.m, d.k - 1, d.m, d.k - 1

    def initial_guess(self) -> np.ndarray:
        return np.concatenate([orbit.section_data(self.dims) for orbit in self.chain.orbits])

    def with_mu(self, mu: float) -> "ShadowProblem":
        return replace(self, mu=mu, _passage_seeds=dict(self._passage_seeds),
                       _section_seeds=dict(self._section_seeds))

    def split(self, X) -> list[np.ndarray]:
        X = np.asarray(X, dtype=float)
        return np.split(X, self.n)

    def blocks(self, X_i) -> list[np.ndarray]:
        return np.split(X_i, np.cumsum(self.block_sizes)[:-1])

    def corner_argument(self, X, i: int) -> np.ndarray:
        """Z_i = (x_plus, y_minus, q_plus, p_minus) at corner i, fed by orbits i - 1 and i."""
        d = self.dims
        parts = self.split(X)
        incoming, outgoing = self.chain.orbits[i - 1], self.chain.orbits[i]
        _, _, x_plus, xi_plus = self.blocks(parts[i - 1])
        y_minus, xi_minus, _, _ = self.blocks(parts[i])
        q_plus = incoming.entry_sphere(d).point(xi_plus)
        p_minus = outgoing.exit_sphere(d).point(xi_minus)
        return np.concatenate([x_plus, y_minus, q_plus, p_minus])

    def corner_lambdas(self) -> list[float]:
        return [self.charts[i].lam(self.chain.orbits[i].c_minus) for i in range(self.n)]


def _evaluate_pieces(problem: ShadowProblem, X, dense: bool = False):
    parts = problem.split(X)
    passages, sections = [], []
    for i in range(problem.n):
        Z = problem.corner_argument(X, i)
        sample = genfun_R_mu(problem.sys, problem.charts[i], Z, problem.mu, tol=problem.tol,
                             shear=problem.shears[i - 1], nu=problem.nu, kappa=problem.kappa,
                             guess=problem._passage_seeds.get(i), dense=dense)
        problem._passage_seeds[i] = sample.extras["solution"].unknowns
        passages.append(sample)
    for i in range(problem.n):
        sample = poincare_F_mu(problem.sys, problem.chain.orbits[i], parts[i], problem.mu, shear=problem.shears[i],
                               guess=problem._section_seeds.get(i), dense=dense)
        problem._section_seeds[i] = sample.extras["unknowns"]
        sections.append(sample)
    return passages, sections


def action_mu(problem: ShadowProblem, X) -> float:
    passages, sections = _evaluate_pieces(problem, X)
    return float(sum(R.value - F.value for R, F in zip(passages, sections)))


def _gradient_from_pieces(problem: ShadowProblem, X, passages, sections) -> np.ndarray:
    d = problem.dims
    parts = problem.split(X)
    gradient = []
    for i in range(problem.n):
        orbit = problem.chain.orbits[i]
        _, xi_minus, _, xi_plus = problem.blocks(parts[i])
        f_x, f_xi_minus, f_y, f_xi_plus = problem.blocks(sections[i].gradient)
        here = np.split(passages[i].gradient, np.cumsum([d.m, d.m, d.k])[:-1])
        after = np.split(passages[(i + 1) % problem.n].gradient, np.cumsum([d.m, d.m, d.k])[:-1])
        gradient.append(np.concatenate([
            here[1] - f_x,
            orbit.exit_sphere(d).pullback(xi_minus, here[3]) - f_xi_minus,
            after[0] - f_y,
            orbit.entry_sphere(d).pullback(xi_plus, after[2]) - f_xi_plus,
        ]))
    return np.concatenate(gradient)


def action_gradient(problem: ShadowProblem, X) -> np.ndarray:
    """Gradient of the shadowing action as mismatches of conjugate coordinates between adjacent pieces."""
    passages, sections = _evaluate_pieces(problem, X)
    return _gradient_from_pieces(problem, X, passages, sections)


@dataclass
class ShadowOrbit:
    """Closed orbit on H = mu stitched from passages near M and flights between sections."""

    mu: float
    X: np.ndarray
    trajectory: Trajectory
    period: float
    passage_times: list
    flight_times: list
    corners: list
    lambdas: list
    closure: float
    energy_error: float
    gradient_norm: float
    iterations: int
    pieces: list
    shears: list = field(default_factory=list)

    @property
    def period_excess(self) -> float:
        return self.period - sum(abs(math.log(self.mu)) / lam for lam in self.lambdas)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu, "period": self.period, "period_excess": self.period_excess,
            "passage_half_times": self.passage_times, "flight_times": self.flight_times,
            "corners": [np.asarray(c).tolist() for c in self.corners],
            "closure": self.closure, "energy_error": self.energy_error,
            "gradient_norm": self.gradient_norm, "newton_iterations": self.iterations,
            "section_data": self.X.tolist(),
            "shears": [None if s is None else s.to_dict() for s in self.shears],
        }


def _assemble_orbit(problem: ShadowProblem, X, gradient_norm: float, iterations: int) -> ShadowOrbit:
    sys = problem.sys
    d = sys.dims
    passages, sections = _evaluate_pieces(problem, X, dense=True)
    offset, pieces, trajectories, gaps, energy_error = 0.0, [], [], [], 0.0
    for i in range(problem.n):
        solution = passages[i].extras["solution"]
        trajectories.append(solution.trajectory.shifted(offset + solution.T))
        pieces.append((solution.start, 2 * solution.T))
        offset += 2 * solution.T
        flight = sections[i].extras
        trajectories.append(flight["trajectory"].shifted(offset))
        pieces.append((flight["start"], flight["flight_time"]))
        offset += flight["flight_time"]
        gaps.append(float(np.max(np.abs(solution.end - flight["start"]))))
        following = passages[(i + 1) % problem.n].extras["solution"]
        gaps.append(float(np.max(np.abs(flight["end"] - following.start))))
    for piece in trajectories:
        energies = np.array([sys.energy(s) for s in piece.states])
        energy_error = max(energy_error, float(np.max(np.abs(energies - problem.mu))))
    orbit = ShadowOrbit(
        mu=problem.mu, X=np.asarray(X, dtype=float), trajectory=Trajectory.concatenate(trajectories),
        period=offset,
        passage_times=[R.extras["T"] for R in passages],
        flight_times=[F.extras["flight_time"] for F in sections],
        corners=[R.extras["zeta"] for R in passages],
        lambdas=problem.corner_lambdas(),
        closure=max(gaps), energy_error=energy_error, gradient_norm=gradient_norm, iterations=iterations,
        pieces=pieces, shears=list(problem.shears),
    )
    logger.info(f"Shadow orbit at mu={problem.mu:.3g}: period {orbit.period:.6g}, closure {orbit.closure:.2e}, "
                f"|H - mu| <= {orbit.energy_error:.2e}")
    return orbit


def solve_shadow(problem: ShadowProblem, X0=None, tol: float = 1e-8, max_iter: int = 20,
                 step: float = 1e-6) -> ShadowOrbit:
    """Newton with an Armijo line search on |grad|^2, seeded from X0 or the chain's section data."""
    X = problem.initial_guess() if X0 is None else np.asarray(X0, dtype=float).copy()
    gradient = action_gradient(problem, X)
    for iteration in range(max_iter + 1):
        norm = float(np.max(np.abs(gradient)))
        logger.debug(f"Shadow Newton iteration {iteration} at mu={problem.mu:.3g}: |grad|={norm:.3e}")
        if norm <= tol:
            return _assemble_orbit(problem, X, norm, iteration)
        if iteration == max_iter:
            break
        columns = []
        for j in range(len(X)):
            e = np.zeros_like(X)
            e[j] = step
            columns.append((action_gradient(problem, X + e) - action_gradient(problem, X - e)) / (2 * step))
        hessian = np.array(columns).T
        direction = np.linalg.solve(0.5 * (hessian + hessian.T), -gradient)
        merit = float(gradient @ gradient)
        alpha = 1.0
        while True:
            trial = X + alpha * direction
            trial_gradient = action_gradient(problem, trial)
            if float(trial_gradient @ trial_gradient) <= (1 - 1e-4 * alpha) * merit:
                break
            alpha *= 0.5
            if alpha < 1.0 / 64:
                raise NewtonFailure(f"Line search failed at mu={problem.mu:.3g} with |grad|={norm:.3e}")
        X, gradient = trial, trial_gradient
    raise NewtonFailure(f"Shadow Newton did not converge at mu={problem.mu:.3g} (|grad|={norm:.3e})")


def continue_shadow(problem: ShadowProblem, ladder, X0=None, tol: float = 1e-8) -> list[ShadowOrbit]:
    """Solve down a decreasing energy ladder, warm-starting each rung from the previous orbit."""
    orbits = []
    X = X0
    for mu in validate_ladder(ladder):
        try:
            orbit = solve_shadow(problem.with_mu(mu), X, tol=tol)
        except NewtonFailure as e:
            largest = orbits[0].mu if orbits else None
            raise NewtonFailure(f"Continuation stopped at mu={mu:.3g}: {e}", largest_mu=largest) from e
        logger.info(f"Continuation mu={mu:.3g} converged in {orbit.iterations} Newton steps")
        orbits.append(orbit)
        X = orbit.X
    return orbits


def _chain_curve(chain: HeteroclinicChain, samples: int) -> list[tuple[Trajectory | None, np.ndarray, np.ndarray]]:
    curve = []
    for orbit in chain.orbits:
        if orbit.trajectory is None:
            raise SpecError("Chain orbits need trajectories to measure shadowing distances")
        times, states = orbit.trajectory.sample(samples)
        curve.append((orbit.trajectory, times, states))
    for orbit in chain.orbits:
        corner = np.concatenate([orbit.c_minus, np.zeros(len(orbit.v_minus) * 2)])
        curve.append((None, np.zeros(1), corner[None, :]))
    return curve


def _nearest(points: np.ndarray, cloud: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    indices = np.empty(len(points), dtype=int)
    distances = np.empty(len(points))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        squared = ((block[:, None, :] - cloud[None, :, :]) ** 2).sum(axis=-1)
        indices[start:start + chunk] = np.argmin(squared, axis=1)
        distances[start:start + chunk] = np.sqrt(squared[np.arange(len(block)), indices[start:start + chunk]])
    return indices, distances


def _refined_max(points: np.ndarray, coarse: np.ndarray, owners: np.ndarray) -> float:
    best = 0.0
    for index in np.argsort(-coarse):
        if coarse[index] <= best:
            break
        trajectory, times, local = owners[index]
        if trajectory is None:
            best = max(best, float(coarse[index]))
            continue
        lower, upper = times[max(local - 1, 0)], times[min(local + 1, len(times) - 1)]
        point = points[index]
        result = minimize_scalar(lambda t: float(np.linalg.norm(trajectory(t) - point)), bounds=(lower, upper),
                                 method="bounded", options={"xatol": 1e-12})
        best = max(best, min(float(result.fun), float(coarse[index])))
    return best


def shadowing_distance(orbit: ShadowOrbit, chain: HeteroclinicChain, tube_radius: float,
                       samples: int = 4000) -> tuple[float, float]:
    """Largest distance from the orbit to the chain curve, globally and outside the tube |w| <= tube_radius."""
    d = orbit.trajectory.dims
    curve = _chain_curve(chain, samples)
    cloud = np.concatenate([states for _, _, states in curve])
    owners_table = [(trajectory, times, local) for trajectory, times, states in curve for local in range(len(states))]
    _, uniform = orbit.trajectory.sample(samples * len(chain.orbits))
    points = np.concatenate([orbit.trajectory.states, uniform])
    indices, coarse = _nearest(points, cloud)
    owners = np.empty(len(points), dtype=object)
    for i, index in enumerate(indices):
        owners[i] = owners_table[index]
    d_global = _refined_max(points, coarse, owners)
    radial = np.linalg.norm(points[:, d.w], axis=1)
    outside = radial > tube_radius
    d_outside = _refined_max(points[outside], coarse[outside], owners[outside]) if outside.any() else 0.0
    logger.info(f"Shadowing distance at mu={orbit.mu:.3g}: global {d_global:.4g}, outside tube {d_outside:.4g}")
    return d_global, d_outside


@dataclass
class MultiplierReport:
    multipliers: np.ndarray
    small: np.ndarray
    large: np.ndarray
    pairing_error: float
    symplectic_defect: float
    condition: float

    def to_dict(self) -> dict:
        def complex_list(values):
            return {"real": np.real(values).tolist(), "imag": np.imag(values).tolist()}

        return {"multipliers": complex_list(self.multipliers), "small": complex_list(self.small),
                "large": complex_list(self.large), "pairing_error": self.pairing_error,
                "symplectic_defect": self.symplectic_defect, "condition": self.condition}


def multiplier_spectrum(orbit: ShadowOrbit, sys: HamiltonianSystem, tol: float = 1e-12) -> MultiplierReport:
    """Nontrivial multipliers of the return map to a section transverse to the flow inside H = mu."""
    d = sys.dims
    monodromy = np.eye(d.n)
    for start, duration in orbit.pieces:
        monodromy = propagate(sys, start, duration, tol=tol, stm=True).stm @ monodromy
    condition = float(np.linalg.cond(monodromy))
    if not np.all(np.isfinite(monodromy)) or condition > MONODROMY_CONDITION:
        raise IllConditioned(f"Monodromy condition number {condition:.3g} overflows")
    base = orbit.pieces[0][0]
    velocity = sys.vector_field(base)
    section = null_space(np.vstack([sys.gradient(base), velocity]))
    projector = np.eye(d.n) - np.outer(velocity, velocity) / float(velocity @ velocity)
    reduced = section.T @ projector @ monodromy @ section
    multipliers = np.linalg.eigvals(reduced)
    products = np.abs(multipliers[:, None] * multipliers[None, :] - 1.0)
    np.fill_diagonal(products, np.inf)
    pairing_error = float(np.max(np.min(products, axis=1)))
    J = sys.symplectic
    defect = float(np.linalg.norm(monodromy.T @ J @ monodromy - J) / np.linalg.norm(monodromy) ** 2)
    order = np.argsort(np.abs(np.log(np.abs(multipliers))))
    small = multipliers[order[:2 * d.m]]
    large = multipliers[order[2 * d.m:]]
    logger.info(f"Multipliers at mu={orbit.mu:.3g}: {np.round(multipliers, 6).tolist()}")
    return MultiplierReport(multipliers, small, large, pairing_error, defect, condition)


def spectral_distance(values, reference) -> float:
    values, reference = np.asarray(values), np.asarray(reference)
    return float(max(np.min(np.abs(reference - value)) for value in values))


def check_sign_condition(chain: HeteroclinicChain, h: Callable) -> tuple[bool, list[float]]:
    """a_i h(c_i) < 0 at every corner of the chain for the perturbation H0 + mu h."""
    angles = chain.angles
    values = []
    for angle, index in zip(angles, chain.corner_indices()):
        orbit = chain.orbits[index]
        corner = np.concatenate([orbit.c_minus, np.zeros(2 * len(orbit.v_minus))])
        values.append(angle * float(h(corner)))
    return all(value < 0 for value in values), values
