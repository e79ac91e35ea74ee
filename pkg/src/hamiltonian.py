import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, permutations
from typing import Callable

import numpy as np
import sympy as sp
from loguru import logger
from scipy.optimize import brentq

from src.errors import ConfigError, DomainError, NotHyperbolic, SpecError


@dataclass(frozen=True)
class Dims:
    """Half-dimensions of the critical manifold (m) and of the hyperbolic block (k)."""

    m: int
    k: int

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise SpecError(f"Dimensions must satisfy m >= 1 and k >= 1, got m={self.m}, k={self.k}")

    @property
    def n(self) -> int:
        return 2 * (self.m + self.k)

    @property
    def x(self) -> slice:
        return slice(0, self.m)

    @property
    def y(self) -> slice:
        return slice(self.m, 2 * self.m)

    @property
    def q(self) -> slice:
        return slice(2 * self.m, 2 * self.m + self.k)

    @property
    def p(self) -> slice:
        return slice(2 * self.m + self.k, self.n)

    @property
    def z(self) -> slice:
        return slice(0, 2 * self.m)

    @property
    def w(self) -> slice:
        return slice(2 * self.m, self.n)


@dataclass(frozen=True)
class PhaseState:
    """Point (x, y, q, p) of the canonical phase space."""

    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "q", "p"):
            value = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(value)):
                raise DomainError(f"Non-finite {name} component in phase state")
            object.__setattr__(self, name, value)

    @property
    def dims(self) -> Dims:
        return Dims(len(self.x), len(self.q))

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    @classmethod
    def from_vector(cls, vector, dims: Dims) -> "PhaseState":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (dims.n,):
            raise ValueError(f"Expected a vector of length {dims.n}, got shape {vector.shape}")
        return cls(vector[dims.x], vector[dims.y], vector[dims.q], vector[dims.p])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.y, self.q, self.p])

    def to_bytes(self) -> bytes:
        return self.to_vector().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, dims: Dims) -> "PhaseState":
        return cls.from_vector(np.frombuffer(data, dtype="<f8"), dims)


def phase_symbols(dims: Dims) -> tuple[sp.Symbol, ...]:
    xs = sp.symbols(f"x1:{dims.m + 1}", real=True)
    ys = sp.symbols(f"y1:{dims.m + 1}", real=True)
    qs = sp.symbols(f"q1:{dims.k + 1}", real=True)
    ps = sp.symbols(f"p1:{dims.k + 1}", real=True)
    return tuple(xs) + tuple(ys) + tuple(qs) + tuple(ps)


def symplectic_matrix(dims: Dims) -> np.ndarray:
    """Matrix J with vector field J grad H for omega = dy^dx + dp^dq."""
    J = np.zeros((dims.n, dims.n))
    m, k = dims.m, dims.k
    J[dims.x, dims.y] = np.eye(m)
    J[dims.y, dims.x] = -np.eye(m)
    J[dims.q, dims.p] = np.eye(k)
    J[dims.p, dims.q] = -np.eye(k)
    return J


class HamiltonianSystem:
    """Hamiltonian system on (x, y, q, p) with the canonical structure.

    Args:
        dims (Dims): Manifold and hyperbolic half-dimensions.
        energy (Callable): Energy of a flat state vector.
        gradient (Callable): Analytic gradient; central differences are used when omitted.
        hessian (Callable): Analytic Hessian; differences of the gradient when omitted.
        label (str): Name used in logs and reports.
        domain_check (Callable): Raises DomainError on states outside the domain.
        h_fd (float): Relative central-difference step.
        metadata (dict): Construction data (kind, parameters, ``adapted`` flag).
    """

    def __init__(self, dims: Dims, energy: Callable, gradient: Callable | None = None,
                 hessian: Callable | None = None, label: str = "", domain_check: Callable | None = None,
                 h_fd: float = 1e-6, metadata: dict | None = None):
        self.dims = dims
        self.label = label
        self.h_fd = h_fd
        self.metadata = dict(metadata or {})
        self.expression = None
        self.symbols = None
        self._energy = energy
        self._gradient = gradient
        self._hessian = hessian
        self._domain_check = domain_check
        self._J = symplectic_matrix(dims)
        self._derivatives: dict[tuple, list] = {}
        self._jets: dict[int, tuple] = {}

    @classmethod
    def from_expression(cls, expression: sp.Expr, dims: Dims, label: str = "",
                        domain_check: Callable | None = None, metadata: dict | None = None) -> "HamiltonianSystem":
        """Build a system from a sympy expression in the symbols of ``phase_symbols``."""
        symbols = phase_symbols(dims)
        gradient_exprs = [sp.diff(expression, s) for s in symbols]
        hessian_exprs = [[sp.diff(g, s) for s in symbols] for g in gradient_exprs]
        energy_fn = sp.lambdify(symbols, expression, "numpy")
        gradient_fn = sp.lambdify(symbols, gradient_exprs, "numpy")
        hessian_fn = sp.lambdify(symbols, hessian_exprs, "numpy")
        system = cls(
            dims,
            energy=lambda v: float(energy_fn(*v)),
            gradient=lambda v: np.array(gradient_fn(*v), dtype=float),
            hessian=lambda v: np.array(hessian_fn(*v), dtype=float),
            label=label,
            domain_check=domain_check,
            metadata=metadata,
        )
        system.expression = expression
        system.symbols = symbols
        system._gradient_exprs = gradient_exprs
        return system

    @property
    def symplectic(self) -> np.ndarray:
        return self._J

    @property
    def adapted(self) -> bool:
        """True when (q, p) are already the stable/unstable coordinates at every point of M."""
        return bool(self.metadata.get("adapted", False))

    def check_domain(self, vector: np.ndarray) -> None:
        if self._domain_check is not None:
            self._domain_check(vector)

    def energy(self, vector) -> float:
        vector = np.asarray(vector, dtype=float)
        self.check_domain(vector)
        return float(self._energy(vector))

    def gradient(self, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        self.check_domain(vector)
        if self._gradient is not None:
            return self._gradient(vector)
        return central_difference_gradient(self._energy, vector, self.h_fd)

    def hessian(self, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        self.check_domain(vector)
        if self._hessian is not None:
            return self._hessian(vector)
        columns = []
        for i in range(len(vector)):
            h = self.h_fd * 100 * max(1.0, abs(vector[i]))
            step = np.zeros_like(vector)
            step[i] = h
            columns.append((self.gradient(vector + step) - self.gradient(vector - step)) / (2 * h))
        hessian = np.array(columns).T
        return 0.5 * (hessian + hessian.T)

    def vector_field(self, vector) -> np.ndarray:
        return self._J @ self.gradient(vector)

    def field_jacobian(self, vector) -> np.ndarray:
        return self._J @ self.hessian(vector)

    def _field_exprs(self) -> list:
        d = self.dims
        g = self._gradient_exprs
        return (list(g[d.y]) + [-e for e in g[d.x]] + list(g[d.p]) + [-e for e in g[d.q]])

    def _jet_functions(self, order: int) -> None:
        if all(j in self._jets for j in range(1, order + 1)):
            return
        d = self.dims
        w_symbols = self.symbols[d.w]
        z_symbols = self.symbols[d.z]
        zero = {s: 0 for s in w_symbols}
        if () not in self._derivatives:
            self._derivatives[()] = self._field_exprs()
        for j in range(1, order + 1):
            if j in self._jets:
                continue
            combos = list(combinations_with_replacement(range(2 * d.k), j))
            exprs = []
            for combo in combos:
                if combo not in self._derivatives:
                    parent = self._derivatives[combo[:-1]]
                    self._derivatives[combo] = [sp.diff(e, w_symbols[combo[-1]]) for e in parent]
                exprs.extend(sp.sympify(e).subs(zero) for e in self._derivatives[combo])
            self._jets[j] = (combos, sp.lambdify(z_symbols, exprs, "numpy"))
            logger.debug(f"{self.label}: built order-{j} transverse jet ({len(exprs)} entries)")

    def transverse_jets(self, z, order: int) -> list[np.ndarray]:
        """Derivatives of the vector field with respect to (q, p) at (z, 0, 0).

        Entry ``j - 1`` has shape (n, 2k, ..., 2k) with ``j`` trailing axes.
        """
        z = np.asarray(z, dtype=float)
        d = self.dims
        if self.expression is None:
            return self._difference_jets(z, order)
        self._jet_functions(order)
        tensors = []
        for j in range(1, order + 1):
            combos, fn = self._jets[j]
            values = np.asarray(fn(*z), dtype=float).reshape(len(combos), d.n)
            tensor = np.zeros((d.n,) + (2 * d.k,) * j)
            for c, combo in enumerate(combos):
                for perm in set(permutations(combo)):
                    tensor[(slice(None),) + perm] = values[c]
            tensors.append(tensor)
        return tensors

    def _difference_jets(self, z: np.ndarray, order: int) -> list[np.ndarray]:
        d = self.dims
        base = np.concatenate([z, np.zeros(2 * d.k)])
        kk = 2 * d.k

        def transverse_jacobian(offset):
            vector = base.copy()
            vector[d.w] += offset
            return self.field_jacobian(vector)[:, d.w]

        tensors = [transverse_jacobian(np.zeros(kk))]
        if order >= 2:
            h = 1e-5
            second = np.zeros((d.n, kk, kk))
            for a in range(kk):
                e = np.zeros(kk)
                e[a] = h
                second[:, :, a] = (transverse_jacobian(e) - transverse_jacobian(-e)) / (2 * h)
            tensors.append(0.5 * (second + second.transpose(0, 2, 1)))
        if order >= 3:
            h = 1e-3
            third = np.zeros((d.n, kk, kk, kk))
            for a in range(kk):
                for b in range(kk):
                    ea = np.zeros(kk)
                    eb = np.zeros(kk)
                    ea[a] = h
                    eb[b] = h
                    third[:, :, a, b] = (transverse_jacobian(ea + eb) - transverse_jacobian(ea - eb)
                                         - transverse_jacobian(-ea + eb) + transverse_jacobian(-ea - eb)) / (4 * h * h)
            tensors.append(third)
        if order > 3:
            raise SpecError("Difference jets are available up to order 3")
        return tensors

    def __repr__(self) -> str:
        return f"HamiltonianSystem(label={self.label!r}, m={self.dims.m}, k={self.dims.k})"


def central_difference_gradient(energy: Callable, vector: np.ndarray, h_fd: float = 1e-6) -> np.ndarray:
    gradient = np.zeros_like(vector)
    for i in range(len(vector)):
        h = h_fd * max(1.0, abs(vector[i]))
        step = np.zeros_like(vector)
        step[i] = h
        gradient[i] = (energy(vector + step) - energy(vector - step)) / (2 * h)
    return gradient


def vector_field(sys: HamiltonianSystem, s: PhaseState) -> PhaseState:
    """Hamiltonian vector field at ``s`` as a tangent vector in (x, y, q, p) order."""
    return PhaseState.from_vector(sys.vector_field(s.to_vector()), sys.dims)


@dataclass(frozen=True)
class ModelSpec:
    """Polynomial model H = -lambda(z)<q, p> + sum of monomials divisible by both q and p.

    ``lam`` is a sympy-parsable expression in x1.., y1..; ``cubic_coeffs`` maps exponent
    tuples over (q1..qk, p1..pk) to coefficients.
    """

    dims: Dims
    lam: str | float = 1.0
    cubic_coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.dims.k
        for monomial in self.cubic_coeffs:
            if len(monomial) != 2 * k:
                raise SpecError(f"Monomial {monomial} must have {2 * k} exponents")
            q_degree, p_degree = sum(monomial[:k]), sum(monomial[k:])
            if q_degree < 1 or p_degree < 1:
                raise SpecError(f"Monomial {monomial} lacks a q or a p factor")
            if q_degree + p_degree < 3:
                raise SpecError(f"Monomial {monomial} has degree below 3")


def build_model(spec: ModelSpec) -> HamiltonianSystem:
    dims = spec.dims
    symbols = phase_symbols(dims)
    names = {str(s): s for s in symbols}
    lam = sp.sympify(spec.lam, locals=names)
    qs, ps = symbols[dims.q], symbols[dims.p]
    expression = -lam * sum(q * p for q, p in zip(qs, ps))
    for monomial, coefficient in spec.cubic_coeffs.items():
        term = sp.Float(coefficient)
        for variable, exponent in zip(qs + ps, monomial):
            term = term * variable ** exponent
        expression = expression + term
    logger.info(f"Built model system with lambda={lam} and {len(spec.cubic_coeffs)} perturbation terms")
    return HamiltonianSystem.from_expression(
        expression, dims, label="model",
        metadata={"kind": "model", "adapted": True, "lambda": str(lam),
                  "cubic": [[list(k), v] for k, v in spec.cubic_coeffs.items()]},
    )


@dataclass(frozen=True)
class LoopSpec:
    """Synthetic planted chain H = -lambda(z)<q, p> + c(z)(p1 - q1)^3.

    lambda(z) = lambda0 + twist |z|^2 / 2 and c(z) = c0 (1 + skew x1) with
    c0 = -lambda0 / (4 sqrt(2) amplitude). Every fiber carries a homoclinic loop in the
    (q1, p1) plane; along it z follows the flow of lambda / c.
    """

    m: int = 1
    k: int = 1
    lambda0: float = 1.0
    twist: float = 1.0
    amplitude: float = 1.0
    skew: float = 0.0

    def __post_init__(self):
        if self.lambda0 <= 0 or self.amplitude <= 0:
            raise SpecError("Loop system needs lambda0 > 0 and amplitude > 0")

    @property
    def dims(self) -> Dims:
        return Dims(self.m, self.k)

    @property
    def cubic0(self) -> float:
        return -self.lambda0 / (4 * math.sqrt(2) * self.amplitude)

    def lam(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return self.lambda0 + 0.5 * self.twist * float(z @ z)

    def coupling(self, z) -> float:
        return self.cubic0 * (1 + self.skew * float(np.asarray(z, dtype=float)[0]))

    def loop_amplitude(self, z) -> float:
        """Amplitude of the loop profile d(t) = A sech^2(lambda t / 2) in the fiber over z."""
        return self.lam(z) / (4 * math.sqrt(2) * abs(self.coupling(z)))

    def loop_point(self, t: float, z) -> tuple[float, float]:
        """(q1, p1) on the loop at time t, the apex sitting at t = 0 (exact for skew = 0)."""
        lam, amplitude = self.lam(z), self.loop_amplitude(z)
        sech2 = 1.0 / math.cosh(0.5 * lam * t) ** 2
        tanh = math.tanh(0.5 * lam * t)
        q1 = -(amplitude / math.sqrt(2)) * sech2 * (1 + tanh)
        p1 = (amplitude / math.sqrt(2)) * sech2 * (1 - tanh)
        return q1, p1

    def exit_time(self, radius: float, z) -> float:
        """Time at which the loop leaves |p1| = radius on the way out of the corner."""
        lam, amplitude = self.lam(z), self.loop_amplitude(z)
        speed = 4 * math.sqrt(2) * amplitude

        def excess(rho):
            return speed * rho / (1 + rho) ** 3 - radius

        rho = brentq(excess, 1e-16, 0.5)
        return math.log(rho) / lam

    def limit_speed(self, z) -> float:
        return 4 * math.sqrt(2) * self.loop_amplitude(z)

    def rotation_angle(self, z) -> float:
        """Clockwise rotation of z along one loop (exact for skew = 0)."""
        amplitude = self.loop_amplitude(z)
        return 16 * self.twist * amplitude ** 2 / (15 * self.lam(z))

    def critical_corner(self) -> np.ndarray:
        """Critical point of lambda / c, the fixed point of the scattering map."""
        corner = np.zeros(2 * self.m)
        if self.skew != 0.0:
            a = 0.5 * self.twist * self.skew
            corner[0] = (-self.twist + math.sqrt(self.twist ** 2 + 4 * a * self.skew * self.lambda0)) / (2 * a)
        return corner


def build_loop_system(spec: LoopSpec) -> HamiltonianSystem:
    dims = spec.dims
    symbols = phase_symbols(dims)
    zs, qs, ps = symbols[dims.z], symbols[dims.q], symbols[dims.p]
    lam = spec.lambda0 + sp.Rational(1, 2) * spec.twist * sum(z ** 2 for z in zs)
    coupling = spec.cubic0 * (1 + spec.skew * zs[0])
    expression = -lam * sum(q * p for q, p in zip(qs, ps)) + coupling * (ps[0] - qs[0]) ** 3
    logger.info(f"Built loop system m={spec.m}, k={spec.k}, twist={spec.twist}, skew={spec.skew}")
    return HamiltonianSystem.from_expression(
        expression, dims, label="loop",
        metadata={"kind": "loop", "adapted": True, "lambda0": spec.lambda0, "twist": spec.twist,
                  "amplitude": spec.amplitude, "skew": spec.skew},
    )


@dataclass(frozen=True)
class ThreeBodyParams:
    """Mass ratios alpha1 + alpha2 = 1, small mass parameter and fixed energy."""

    alpha1: float = 0.5
    alpha2: float = 0.5
    mu_mass: float = 0.0
    energy: float = 0.0

    def __post_init__(self):
        if not (0 < self.alpha1 < 1 and 0 < self.alpha2 < 1):
            raise SpecError("Mass ratios must lie in (0, 1)")
        if abs(self.alpha1 + self.alpha2 - 1) > 1e-12:
            raise SpecError("Mass ratios must sum to one")
        if self.mu_mass < 0:
            raise SpecError("Mass parameter must be non-negative")


def levi_civita_forward(x: complex, y: complex, xi: complex, eta: complex,
                        params: ThreeBodyParams) -> tuple[complex, complex, complex, complex]:
    """Map regularized (x, y, xi, eta) to the positions and momenta of the two small bodies."""
    if xi == 0:
        raise DomainError("Levi-Civita map is undefined at xi = 0 (double collision)")
    a1, a2 = params.alpha1, params.alpha2
    xi2 = xi * xi
    shift = eta / (2 * np.conj(xi))
    q1 = x - a2 * xi2
    q2 = x + a1 * xi2
    p1 = a1 * y - shift
    p2 = a2 * y + shift
    return complex(q1), complex(q2), complex(p1), complex(p2)


def unregularized_hamiltonian(q1: complex, q2: complex, p1: complex, p2: complex,
                              params: ThreeBodyParams) -> float:
    """Energy of the two small bodies around the primary, mutual term scaled by the mass parameter."""
    a1, a2, mu = params.alpha1, params.alpha2, params.mu_mass
    if q1 == 0 or q2 == 0:
        raise DomainError("Collision with the primary")
    if mu > 0 and q1 == q2:
        raise DomainError("Collision of the small bodies")
    value = abs(p1) ** 2 / (2 * a1) - a1 / abs(q1) + abs(p2) ** 2 / (2 * a2) - a2 / abs(q2)
    if mu > 0:
        value += mu * (abs(p1 + p2) ** 2 / 2 - a1 * a2 / abs(q1 - q2))
    return float(value)


def _regularized_expression(symbols, params: ThreeBodyParams):
    a1, a2 = sp.Float(params.alpha1), sp.Float(params.alpha2)
    mu, energy = sp.Float(params.mu_mass), sp.Float(params.energy)
    x1, x2, y1, y2, q1, q2, p1, p2 = symbols
    re, im = q1 ** 2 - q2 ** 2, 2 * q1 * q2
    d1 = sp.sqrt((a2 * re - x1) ** 2 + (a2 * im - x2) ** 2)
    d2 = sp.sqrt((a1 * re + x1) ** 2 + (a1 * im + x2) ** 2)
    return ((p1 ** 2 + p2 ** 2) / (8 * a1 * a2)
            - (q1 ** 2 + q2 ** 2) * (energy + a1 / d1 + a2 / d2 - (1 + mu) * (y1 ** 2 + y2 ** 2) / 2)
            # minus sign: pullback_residual vanishes only with -mu a1 a2
            - mu * a1 * a2)


def _threebody_domain(params: ThreeBodyParams) -> Callable:
    a1, a2 = params.alpha1, params.alpha2

    def check(vector: np.ndarray) -> None:
        x = complex(vector[0], vector[1])
        xi = complex(vector[4], vector[5])
        if abs(a2 * xi * xi - x) < 1e-12 or abs(a1 * xi * xi + x) < 1e-12:
            raise DomainError(f"State {vector.tolist()} lies on the primary collision set")

    return check


def regularized_hamiltonian(state, params: ThreeBodyParams) -> float:
    """Regularized energy at (x, y, xi, eta) stored as real pairs."""
    vector = state.to_vector() if isinstance(state, PhaseState) else np.asarray(state, dtype=float)
    _threebody_domain(params)(vector)
    x = complex(vector[0], vector[1])
    y = complex(vector[2], vector[3])
    xi = complex(vector[4], vector[5])
    eta = complex(vector[6], vector[7])
    a1, a2, mu = params.alpha1, params.alpha2, params.mu_mass
    xi2 = xi * xi
    return float(abs(eta) ** 2 / (8 * a1 * a2)
                 - abs(xi) ** 2 * (params.energy + a1 / abs(a2 * xi2 - x) + a2 / abs(a1 * xi2 + x)
                                   - (1 + mu) * abs(y) ** 2 / 2)
                 # minus sign: pullback_residual vanishes only with -mu a1 a2
                 - mu * a1 * a2)


def pullback_residual(state, params: ThreeBodyParams) -> float:
    """Relative gap between the regularized energy and |xi|^2 (H o g - E) at a non-collision state."""
    vector = state.to_vector() if isinstance(state, PhaseState) else np.asarray(state, dtype=float)
    x, y = complex(vector[0], vector[1]), complex(vector[2], vector[3])
    xi, eta = complex(vector[4], vector[5]), complex(vector[6], vector[7])
    pulled = abs(xi) ** 2 * (unregularized_hamiltonian(*levi_civita_forward(x, y, xi, eta, params), params)
                             - params.energy)
    regularized = regularized_hamiltonian(vector, params)
    return abs(regularized - pulled) / max(abs(regularized), abs(pulled), 1e-300)


def threebody_lambda(x, y, params: ThreeBodyParams) -> float:
    """Closed-form transverse eigenvalue on the collision manifold."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    radius = float(np.linalg.norm(x))
    if radius == 0:
        raise DomainError("Collision manifold point at the primary")
    kinetic = (1 + params.mu_mass) * float(y @ y) / 2
    radicand = (params.energy + 1 / radius - kinetic) / (2 * params.alpha1 * params.alpha2)
    if radicand <= 0:
        raise NotHyperbolic(f"Point x={x.tolist()}, y={y.tolist()} lies outside the hyperbolic region")
    return math.sqrt(radicand)


def build_threebody(params: ThreeBodyParams) -> HamiltonianSystem:
    dims = Dims(2, 2)
    symbols = phase_symbols(dims)
    expression = _regularized_expression(symbols, params)
    logger.info(f"Built regularized three-body system alpha=({params.alpha1}, {params.alpha2}), "
                f"mu={params.mu_mass}, E={params.energy}")
    return HamiltonianSystem.from_expression(
        expression, dims, label="threebody", domain_check=_threebody_domain(params),
        metadata={"kind": "threebody", "adapted": False, "alpha1": params.alpha1, "alpha2": params.alpha2,
                  "mu_mass": params.mu_mass, "energy": params.energy},
    )


def build_kepler_pair(params: ThreeBodyParams) -> HamiltonianSystem:
    """Unregularized two-body-pair system; x, y hold body 1 and q, p hold body 2."""
    dims = Dims(2, 2)
    symbols = phase_symbols(dims)
    x1, x2, y1, y2, q1, q2, p1, p2 = symbols
    a1, a2, mu = sp.Float(params.alpha1), sp.Float(params.alpha2), sp.Float(params.mu_mass)
    expression = ((y1 ** 2 + y2 ** 2) / (2 * a1) - a1 / sp.sqrt(x1 ** 2 + x2 ** 2)
                  + (p1 ** 2 + p2 ** 2) / (2 * a2) - a2 / sp.sqrt(q1 ** 2 + q2 ** 2))
    if params.mu_mass > 0:
        expression += mu * (((y1 + p1) ** 2 + (y2 + p2) ** 2) / 2
                            - a1 * a2 / sp.sqrt((x1 - q1) ** 2 + (x2 - q2) ** 2))

    def check(vector: np.ndarray) -> None:
        if np.hypot(vector[0], vector[1]) < 1e-12 or np.hypot(vector[4], vector[5]) < 1e-12:
            raise DomainError("Collision with the primary")
        if params.mu_mass > 0 and np.hypot(vector[0] - vector[4], vector[1] - vector[5]) < 1e-12:
            raise DomainError("Collision of the small bodies")

    return HamiltonianSystem.from_expression(
        expression, dims, label="kepler", domain_check=check,
        metadata={"kind": "kepler", "adapted": False, "alpha1": params.alpha1, "alpha2": params.alpha2,
                  "mu_mass": params.mu_mass},
    )


def system_from_config(block: dict) -> HamiltonianSystem:
    """Build a system from a ``system`` block of the experiment configuration."""
    kind = block.get("kind")
    try:
        if kind == "model":
            dims = Dims(**block.get("dims", {"m": 1, "k": 1}))
            cubic = {tuple(entry["monomial"]): float(entry["coefficient"]) for entry in block.get("cubic", [])}
            return build_model(ModelSpec(dims, lam=block.get("lambda", 1.0), cubic_coeffs=cubic))
        if kind == "loop":
            return build_loop_system(loop_spec_from_config(block))
        if kind == "threebody":
            return build_threebody(ThreeBodyParams(**block.get("params", {})))
        if kind == "kepler":
            return build_kepler_pair(ThreeBodyParams(**block.get("params", {})))
    except (TypeError, KeyError) as e:
        raise ConfigError(f"Invalid system block for kind {kind!r}: {e}") from e
    raise ConfigError(f"Unknown system kind {kind!r}")


def loop_spec_from_config(block: dict) -> LoopSpec:
    dims = block.get("dims", {"m": 1, "k": 1})
    return LoopSpec(
        m=int(dims.get("m", 1)), k=int(dims.get("k", 1)),
        lambda0=float(block.get("lambda0", 1.0)), twist=float(block.get("twist", 1.0)),
        amplitude=float(block.get("amplitude", 1.0)), skew=float(block.get("skew", 0.0)),
    )
