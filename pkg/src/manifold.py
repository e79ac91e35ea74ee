import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from loguru import logger
from scipy.linalg import null_space

from src.errors import (ChartOverflow, NotEqualEigenvalues, NotHyperbolic, ResonanceObstruction, SpecError)
from src.hamiltonian import HamiltonianSystem
from src.polynomial import Polynomial, evaluate_all, evaluate_jacobian, jacobian, tensor_polynomials

SUPPORTED_ORDERS = (2, 3)
CACHE_SIZES = {"frames": 512, "jets": 64, "maps": 16}
EIGEN_REL_TOL = 1e-6


@dataclass(frozen=True)
class TransverseFrame:
    """Symplectic frame B(z) taking chart (q, p) to native transverse coordinates."""

    lam: float
    basis: np.ndarray
    inverse: np.ndarray


def _transverse_linearization(sys: HamiltonianSystem, z) -> np.ndarray:
    d = sys.dims
    vector = np.concatenate([np.asarray(z, dtype=float), np.zeros(2 * d.k)])
    return sys.field_jacobian(vector)[d.w, d.w]


def eigenvalue_lambda(sys: HamiltonianSystem, z, rel_tol: float = EIGEN_REL_TOL) -> float:
    """Positive transverse eigenvalue at (z, 0, 0), checked to be +-lambda with multiplicity k each."""
    k = sys.dims.k
    A = _transverse_linearization(sys, z)
    eigenvalues = np.linalg.eigvals(A)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if np.min(np.abs(eigenvalues.real)) < 1e-9 * scale:
        raise NotHyperbolic(f"Transverse eigenvalues {np.round(eigenvalues, 12).tolist()} at z={list(z)} "
                            f"are not hyperbolic")
    if np.max(np.abs(eigenvalues.imag)) > rel_tol * scale:
        raise NotEqualEigenvalues(f"Complex transverse eigenvalues at z={list(z)}")
    real = np.sort(eigenvalues.real)
    negative, positive = real[:k], real[k:]
    lam = float(np.mean(positive))
    if lam <= 0 or np.any(negative >= 0):
        raise NotHyperbolic(f"Transverse spectrum at z={list(z)} is not split into k stable and k unstable values")
    spread = max(np.max(np.abs(positive - lam)), np.max(np.abs(negative + lam)))
    if spread > rel_tol * lam:
        raise NotEqualEigenvalues(f"Transverse eigenvalues {real.tolist()} are not +-lambda within {rel_tol}")
    if null_space(A - lam * np.eye(2 * k), rcond=1e-7).shape[1] != k:
        raise NotEqualEigenvalues(f"Eigenvalue {lam} is not semisimple at z={list(z)}")
    return lam


def transverse_frame(sys: HamiltonianSystem, z) -> TransverseFrame:
    k = sys.dims.k
    lam = eigenvalue_lambda(sys, z)
    if sys.adapted:
        return TransverseFrame(lam, np.eye(2 * k), np.eye(2 * k))
    A = _transverse_linearization(sys, z)
    stable = null_space(A + lam * np.eye(2 * k), rcond=1e-7)
    unstable = null_space(A - lam * np.eye(2 * k), rcond=1e-7)
    stable = stable @ np.linalg.inv(stable[:k])
    unstable = unstable @ np.linalg.inv(unstable[k:])
    k_s, k_u = stable[k:], unstable[:k]
    unstable = unstable @ np.linalg.inv(np.eye(k) - k_s.T @ k_u)
    basis = np.hstack([stable, unstable])
    return TransverseFrame(lam, basis, np.linalg.inv(basis))


def _contract(tensor: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Change every trailing (transverse) index of ``tensor`` by ``basis``."""
    order = tensor.ndim - 1
    letters = "abcdefgh"[:order]
    upper = "ABCDEFGH"[:order]
    subscripts = "i" + letters + "," + ",".join(f"{a}{b}" for a, b in zip(letters, upper)) + "->i" + upper
    return np.einsum(subscripts, tensor, *([basis] * order))


def _linear_combine(matrix: np.ndarray, polys: list[Polynomial]) -> list[Polynomial]:
    out = []
    for row in matrix:
        total = Polynomial.zero(polys[0].nvars)
        for coefficient, poly in zip(row, polys):
            if coefficient != 0.0:
                total = total + poly * coefficient
        out.append(total)
    return out


def _cache_key(z) -> bytes:
    # 13 decimals; +0.0 folds -0.0 onto 0.0
    return (np.round(np.asarray(z, dtype=float), 13) + 0.0).tobytes()


def _restrict(poly: Polynomial, indices: range) -> Polynomial:
    """Polynomial in the variables listed in ``indices`` (all other exponents must vanish)."""
    terms = {}
    for exponent, coefficient in poly.terms.items():
        if any(e for i, e in enumerate(exponent) if i not in indices):
            raise ValueError("Polynomial depends on variables outside the restriction")
        terms[tuple(exponent[i] for i in indices)] = coefficient
    return Polynomial(len(indices), terms)


@dataclass
class LocalJets:
    """Frozen-base expansions at one manifold point, all in chart coordinates w = (q, p)."""

    z: np.ndarray
    lam: float
    frame: TransverseFrame
    vz: list
    vw: list
    f_plus: list
    f_minus: list
    shift_plus: list
    shift_minus: list
    sternberg_plus: list
    sternberg_minus: list


class ManifoldChart:
    """Chart of the critical manifold with stable/unstable graphs and normal-form data.

    Args:
        sys (HamiltonianSystem): System with critical manifold {q = p = 0}.
        center (array): Chart center in z = (x, y).
        radius (float): Transverse radius r of the chart tube.
        half_width (float): Half-width of the domain box V0 around the center.
        order (int): Truncation order N of all expansions.
    """

    def __init__(self, sys: HamiltonianSystem, center, radius: float = 0.1, half_width: float = 0.5, order: int = 3):
        if order not in SUPPORTED_ORDERS:
            raise SpecError(f"Truncation order {order} unsupported; use one of {SUPPORTED_ORDERS}")
        if radius <= 0 or half_width <= 0:
            raise SpecError("Chart radius and half-width must be positive")
        self.sys = sys
        self.dims = sys.dims
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.half_width = float(half_width)
        self.order = order
        self._frame_at = lru_cache(maxsize=CACHE_SIZES["frames"])(self._frame_at)
        self._jets_at = lru_cache(maxsize=CACHE_SIZES["jets"])(self._jets_at)
        self._map_at = lru_cache(maxsize=CACHE_SIZES["maps"])(self._map_at)
        self.actions: list[str] = []

    def contains(self, z) -> bool:
        return bool(np.max(np.abs(np.asarray(z, dtype=float) - self.center)) <= self.half_width)

    def cache_info(self) -> dict:
        return {"frames": self._frame_at.cache_info(), "jets": self._jets_at.cache_info(),
                "maps": self._map_at.cache_info()}

    def _frame_at(self, key: bytes) -> TransverseFrame:
        return transverse_frame(self.sys, np.frombuffer(key).copy())

    def frame(self, z) -> TransverseFrame:
        return self._frame_at(_cache_key(z))

    def lam(self, z) -> float:
        return self.frame(z).lam

    def _frame_derivatives(self, z) -> list[np.ndarray]:
        z = np.asarray(z, dtype=float)
        h = 1e-6
        derivatives = []
        for l in range(len(z)):
            step = np.zeros_like(z)
            step[l] = h
            derivatives.append((transverse_frame(self.sys, z + step).basis
                                - transverse_frame(self.sys, z - step).basis) / (2 * h))
        return derivatives

    def to_chart(self, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        if self.sys.adapted:
            return vector.copy()
        d = self.dims
        out = vector.copy()
        out[d.w] = self.frame(vector[d.z]).inverse @ vector[d.w]
        return out

    def from_chart(self, chart_vector) -> np.ndarray:
        chart_vector = np.asarray(chart_vector, dtype=float)
        if self.sys.adapted:
            return chart_vector.copy()
        d = self.dims
        out = chart_vector.copy()
        out[d.w] = self.frame(chart_vector[d.z]).basis @ chart_vector[d.w]
        return out

    def to_chart_jacobian(self, vector) -> np.ndarray:
        """Derivative of ``to_chart`` with the frame held fixed at the current z."""
        d = self.dims
        jac = np.eye(d.n)
        if not self.sys.adapted:
            jac[d.w, d.w] = self.frame(np.asarray(vector, dtype=float)[d.z]).inverse
        return jac

    def chart_velocity(self, chart_vector) -> np.ndarray:
        """Vector field expressed in chart coordinates."""
        chart_vector = np.asarray(chart_vector, dtype=float)
        native = self.from_chart(chart_vector)
        velocity = self.sys.vector_field(native)
        if self.sys.adapted:
            return velocity
        d = self.dims
        z = chart_vector[d.z]
        frame = self.frame(z)
        drift = sum(dB * velocity[l] for l, dB in enumerate(self._frame_derivatives(z)))
        out = velocity.copy()
        out[d.w] = frame.inverse @ (velocity[d.w] - drift @ chart_vector[d.w])
        return out

    def _jets_at(self, key: bytes) -> LocalJets:
        return self._fit(np.frombuffer(key).copy())

    def jets(self, z) -> LocalJets:
        return self._jets_at(_cache_key(z))

    def _fit(self, z: np.ndarray) -> LocalJets:
        d = self.dims
        m, k, N = d.m, d.k, self.order
        kk = 2 * k
        frame = self.frame(z)
        lam = frame.lam
        tensors = [_contract(t, frame.basis) for t in self.sys.transverse_jets(z, N)]
        field_polys = tensor_polynomials(tensors, kk)
        vz = field_polys[: 2 * m]
        vw = _linear_combine(frame.inverse, field_polys[2 * m:])
        if not self.sys.adapted:
            w_vars = [Polynomial.variable(kk, i) for i in range(kk)]
            drift = [Polynomial.zero(kk) for _ in range(kk)]
            for l, dB in enumerate(self._frame_derivatives(z)):
                M = frame.inverse @ dB
                moved = _linear_combine(M, w_vars)
                drift = [a + b.multiply(vz[l], N) for a, b in zip(drift, moved)]
            vw = [(a - b).truncate(N) for a, b in zip(vw, drift)]

        linear = np.array([[poly.homogeneous(1).terms.get(tuple(int(i == j) for i in range(kk)), 0.0)
                            for j in range(kk)] for poly in vw])
        expected = np.diag([-lam] * k + [lam] * k)
        if np.max(np.abs(linear - expected)) > 1e-6 * max(1.0, lam):
            raise NotEqualEigenvalues(f"Chart linearization at z={z.tolist()} is not diag(-lambda, lambda)")

        q_vars = [Polynomial.variable(kk, i) for i in range(k)]
        p_vars = [Polynomial.variable(kk, k + i) for i in range(k)]
        rq = [vw[i] + q_vars[i] * lam for i in range(k)]
        rp = [vw[k + i] - p_vars[i] * lam for i in range(k)]
        q_index, p_index = range(k), range(k, kk)

        def divide(value: float) -> float:
            if abs(value) < 1e-12:
                raise ResonanceObstruction(f"Singular homological equation at z={z.tolist()}")
            return 1.0 / value

        f_plus = [Polynomial.zero(kk) for _ in range(k)]
        f_minus = [Polynomial.zero(kk) for _ in range(k)]
        for j in range(2, N + 1):
            on_plus = q_vars + f_plus
            rq_on = [r.compose(on_plus, j) for r in rq]
            rp_on = [r.compose(on_plus, j) for r in rp]
            for i in range(k):
                rest = sum((f_plus[i].diff(l).multiply(rq_on[l], j) for l in q_index), Polynomial.zero(kk)) - rp_on[i]
                f_plus[i] = f_plus[i] + rest.homogeneous(j) * divide((j + 1) * lam)
            on_minus = f_minus + p_vars
            rq_on = [r.compose(on_minus, j) for r in rq]
            rp_on = [r.compose(on_minus, j) for r in rp]
            for i in range(k):
                rest = rq_on[i] - sum((f_minus[i].diff(l).multiply(rp_on[l - k], j) for l in p_index),
                                      Polynomial.zero(kk))
                f_minus[i] = f_minus[i] + rest.homogeneous(j) * divide((j + 1) * lam)

        on_plus = q_vars + f_plus
        on_minus = f_minus + p_vars
        vz_plus = [v.compose(on_plus, N) for v in vz]
        vz_minus = [v.compose(on_minus, N) for v in vz]
        g_plus = [r.compose(on_plus, N) for r in rq]
        g_minus = [r.compose(on_minus, N) for r in rp]
        shift_plus = [Polynomial.zero(kk) for _ in range(2 * m)]
        shift_minus = [Polynomial.zero(kk) for _ in range(2 * m)]
        for j in range(2, N + 1):
            for i in range(2 * m):
                rest = vz_plus[i] + sum((shift_plus[i].diff(l).multiply(g_plus[l], j) for l in q_index),
                                         Polynomial.zero(kk))
                shift_plus[i] = shift_plus[i] + rest.homogeneous(j) * divide(j * lam)
                rest = vz_minus[i] + sum((shift_minus[i].diff(l).multiply(g_minus[l - k], j) for l in p_index),
                                          Polynomial.zero(kk))
                shift_minus[i] = shift_minus[i] - rest.homogeneous(j) * divide(j * lam)
        sternberg_plus = [Polynomial.zero(kk) for _ in range(k)]
        sternberg_minus = [Polynomial.zero(kk) for _ in range(k)]
        for j in range(2, N + 1):
            for i in range(k):
                rest = g_plus[i] + sum((sternberg_plus[i].diff(l).multiply(g_plus[l], j) for l in q_index),
                                        Polynomial.zero(kk))
                sternberg_plus[i] = sternberg_plus[i] + rest.homogeneous(j) * divide((j - 1) * lam)
                rest = g_minus[i] + sum((sternberg_minus[i].diff(l).multiply(g_minus[l - k], j) for l in p_index),
                                         Polynomial.zero(kk))
                sternberg_minus[i] = sternberg_minus[i] - rest.homogeneous(j) * divide((j - 1) * lam)

        logger.debug(f"Fitted order-{N} graphs at z={np.round(z, 6).tolist()} (lambda={lam:.10g})")
        return LocalJets(
            z=z, lam=lam, frame=frame, vz=vz, vw=vw,
            f_plus=[_restrict(f, q_index) for f in f_plus],
            f_minus=[_restrict(f, p_index) for f in f_minus],
            shift_plus=[_restrict(s, q_index) for s in shift_plus],
            shift_minus=[_restrict(s, p_index) for s in shift_minus],
            sternberg_plus=[_restrict(s, q_index) for s in sternberg_plus],
            sternberg_minus=[_restrict(s, p_index) for s in sternberg_minus],
        )

    def f_plus(self, z, q) -> np.ndarray:
        return evaluate_all(self.jets(z).f_plus, np.asarray(q, dtype=float))

    def f_minus(self, z, p) -> np.ndarray:
        return evaluate_all(self.jets(z).f_minus, np.asarray(p, dtype=float))

    def f_plus_jacobian(self, z, q) -> np.ndarray:
        return evaluate_jacobian(jacobian(self.jets(z).f_plus), np.asarray(q, dtype=float))

    def f_minus_jacobian(self, z, p) -> np.ndarray:
        return evaluate_jacobian(jacobian(self.jets(z).f_minus), np.asarray(p, dtype=float))

    def stable_point(self, z, q) -> np.ndarray:
        """Chart point (z, q, f_plus(z, q))."""
        return np.concatenate([np.asarray(z, dtype=float), np.asarray(q, dtype=float), self.f_plus(z, q)])

    def unstable_point(self, z, p) -> np.ndarray:
        """Chart point (z, f_minus(z, p), p)."""
        return np.concatenate([np.asarray(z, dtype=float), self.f_minus(z, p), np.asarray(p, dtype=float)])

    def invariance_residual(self, z, samples: int = 32, seed: int = 0) -> dict:
        """Frozen-base residual of the graph invariance equations on the sphere |q| = r (resp. |p| = r)."""
        d = self.dims
        z = np.asarray(z, dtype=float)
        rng = np.random.default_rng(seed)
        directions = rng.normal(size=(samples, d.k))
        directions = self.radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)
        worst_plus = worst_minus = 0.0
        for direction in directions:
            point = self.stable_point(z, direction)
            velocity = self.chart_velocity(point)
            residual = velocity[d.p] - self.f_plus_jacobian(z, direction) @ velocity[d.q]
            worst_plus = max(worst_plus, float(np.max(np.abs(residual))))
            point = self.unstable_point(z, direction)
            velocity = self.chart_velocity(point)
            residual = velocity[d.q] - self.f_minus_jacobian(z, direction) @ velocity[d.p]
            worst_minus = max(worst_minus, float(np.max(np.abs(residual))))
        scale = self.radius ** (self.order + 1)
        report = {"plus": worst_plus, "minus": worst_minus, "scaled": max(worst_plus, worst_minus) / scale}
        self.actions.append(f"Invariance residual at z={np.round(z, 6).tolist()}: "
                            f"{report['scaled']:.3g} r^{self.order + 1}")
        logger.info(self.actions[-1])
        return report

    def straightening(self, base=None) -> "StraighteningMap":
        base = self.center if base is None else base
        return self._map_at(_cache_key(base))

    def _map_at(self, key: bytes) -> "StraighteningMap":
        return StraighteningMap.build(self, np.frombuffer(key).copy())

    def to_dict(self) -> dict:
        jets = self.jets(self.center)
        return {
            "system": self.sys.label,
            "center": self.center.tolist(),
            "radius": self.radius,
            "half_width": self.half_width,
            "order": self.order,
            "lambda": jets.lam,
            "frame": jets.frame.basis.tolist(),
            "f_plus": [poly.to_table() for poly in jets.f_plus],
            "f_minus": [poly.to_table() for poly in jets.f_minus],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        logger.info(f"Saved chart to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path, sys: HamiltonianSystem) -> "ManifoldChart":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File {path} does not exist.")
        data = json.loads(path.read_text())
        chart = cls(sys, data["center"], data["radius"], data["half_width"], data["order"])
        jets = chart.jets(chart.center)
        k = sys.dims.k
        for name in ("f_plus", "f_minus"):
            stored = [Polynomial.from_table(k, table) for table in data[name]]
            drift = max((a - b).max_abs_coefficient() for a, b in zip(stored, getattr(jets, name)))
            if drift > 1e-10:
                logger.warning(f"Stored {name} coefficients differ from a refit by {drift:.3g}")
            setattr(jets, name, stored)
        logger.info(f"Loaded chart from {path}")
        return chart


def fit_local_graphs(sys: HamiltonianSystem, center, radius: float = 0.1, order: int = 3,
                     half_width: float = 0.5) -> ManifoldChart:
    """Fit the order-N graphs of the local stable/unstable manifolds at the chart center."""
    chart = ManifoldChart(sys, center, radius, half_width, order)
    jets = chart.jets(chart.center)
    chart.actions.append(f"Fitted order-{order} graphs for {sys.label} at {chart.center.tolist()} "
                         f"(lambda={jets.lam:.10g}, r={radius})")
    logger.info(chart.actions[-1])
    return chart


@dataclass(frozen=True)
class LimitDirection:
    base: np.ndarray
    vector: np.ndarray
    kind: str


@dataclass
class StraighteningMap:
    """Truncated normal-form change (z, q, p) -> (w, u, v) frozen at ``base``.

    w = z + eta_plus(u0) + eta_minus(v0), u = u0 + S_plus(u0), v = v0 + S_minus(v0),
    where u0 = q - f_minus(p) and v0 = p - f_plus(q).
    """

    chart: ManifoldChart
    base: np.ndarray
    order: int
    lam: float
    shift: list = field(default_factory=list)
    u_map: list = field(default_factory=list)
    v_map: list = field(default_factory=list)

    @classmethod
    def build(cls, chart: ManifoldChart, base) -> "StraighteningMap":
        d = chart.dims
        k, kk, N = d.k, 2 * d.k, chart.order
        jets = chart.jets(base)
        q_vars = [Polynomial.variable(kk, i) for i in range(k)]
        p_vars = [Polynomial.variable(kk, k + i) for i in range(k)]
        f_plus = [f.embed(kk, range(k)) for f in jets.f_plus]
        f_minus = [f.embed(kk, range(k, kk)) for f in jets.f_minus]
        u0 = [q - f for q, f in zip(q_vars, f_minus)]
        v0 = [p - f for p, f in zip(p_vars, f_plus)]
        shift = [a.compose(u0, N) + b.compose(v0, N) for a, b in zip(jets.shift_plus, jets.shift_minus)]
        u_map = [(u + s.compose(u0, N)).truncate(N) for u, s in zip(u0, jets.sternberg_plus)]
        v_map = [(v + s.compose(v0, N)).truncate(N) for v, s in zip(v0, jets.sternberg_minus)]
        straight = cls(chart, np.asarray(base, dtype=float), N, jets.lam, shift, u_map, v_map)
        straight._fiber_jacobian = jacobian(u_map + v_map)
        straight._shift_jacobian = jacobian(shift)
        return straight

    def forward(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        d = self.chart.dims
        w = points[..., d.w]
        z = points[..., d.z] + evaluate_all(self.shift, w)
        return np.concatenate([z, evaluate_all(self.u_map, w), evaluate_all(self.v_map, w)], axis=-1)

    def jacobian(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        d = self.chart.dims
        w = points[..., d.w]
        jac = np.zeros(points.shape[:-1] + (d.n, d.n))
        jac[..., d.z, d.z] = np.eye(2 * d.m)
        jac[..., d.z, d.w] = evaluate_jacobian(self._shift_jacobian, w)
        jac[..., d.w, d.w] = evaluate_jacobian(self._fiber_jacobian, w)
        return jac

    def inverse(self, points, tol: float = 1e-15, max_iter: int = 30) -> np.ndarray:
        """Invert by Newton iteration on the fiber part, then undo the base shift."""
        points = np.asarray(points, dtype=float)
        d = self.chart.dims
        target = points[..., d.w]
        w = target.copy()
        fiber = self.u_map + self.v_map
        for _ in range(max_iter):
            residual = evaluate_all(fiber, w) - target
            if np.max(np.abs(residual), initial=0.0) <= tol * max(1.0, self.chart.radius):
                break
            jac = evaluate_jacobian(self._fiber_jacobian, w)
            w = w - np.linalg.solve(jac, residual[..., None])[..., 0]
        z = points[..., d.z] - evaluate_all(self.shift, w)
        return np.concatenate([z, w], axis=-1)

    def pushforward_field(self, points) -> np.ndarray:
        """Vector field in straightened coordinates at straightened points of shape (..., n)."""
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, points.shape[-1])
        chart_points = self.inverse(flat)
        velocities = np.array([self.chart.chart_velocity(x) for x in chart_points])
        pushed = np.einsum("mij,mj->mi", self.jacobian(chart_points), velocities)
        return pushed.reshape(points.shape)

    def composition_residual(self, points) -> float:
        points = np.asarray(points, dtype=float)
        return float(np.max(np.abs(self.forward(self.inverse(points)) - points)))


def straighten(sys: HamiltonianSystem, chart: ManifoldChart, order: int | None = None, base=None) -> StraighteningMap:
    if order is not None and order != chart.order:
        raise SpecError(f"Chart was fitted to order {chart.order}, requested {order}")
    return chart.straightening(base)


def limit_direction(sys: HamiltonianSystem, chart: ManifoldChart, z0, q_plus=None, p_minus=None) -> LimitDirection:
    """Limit direction of arrival (from ``q_plus``) or departure (from ``p_minus``) at z0."""
    if (q_plus is None) == (p_minus is None):
        raise ValueError("Give exactly one of q_plus and p_minus")
    z0 = np.asarray(z0, dtype=float)
    straight = chart.straightening(z0)
    d = chart.dims
    if q_plus is not None:
        q_plus = np.asarray(q_plus, dtype=float)
        if np.linalg.norm(q_plus) > chart.radius * (1 + 1e-9):
            raise ChartOverflow(f"|q+|={np.linalg.norm(q_plus):.6g} exceeds chart radius {chart.radius}")
        image = straight.forward(chart.stable_point(z0, q_plus))
        return LimitDirection(z0, image[d.q], "stable")
    p_minus = np.asarray(p_minus, dtype=float)
    if np.linalg.norm(p_minus) > chart.radius * (1 + 1e-9):
        raise ChartOverflow(f"|p-|={np.linalg.norm(p_minus):.6g} exceeds chart radius {chart.radius}")
    image = straight.forward(chart.unstable_point(z0, p_minus))
    return LimitDirection(z0, image[d.p], "unstable")
