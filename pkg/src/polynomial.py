import math
from typing import Sequence

import numpy as np

Exponent = tuple[int, ...]


class Polynomial:
    """Sparse multivariate polynomial with float coefficients.

    Args:
        nvars (int): Number of variables.
        terms (dict): Mapping from exponent tuples to coefficients.
    """

    def __init__(self, nvars: int, terms: dict | None = None):
        self.nvars = nvars
        self.terms: dict[Exponent, float] = {}
        for exponent, coefficient in (terms or {}).items():
            exponent = tuple(int(e) for e in exponent)
            if len(exponent) != nvars:
                raise ValueError(f"Exponent {exponent} does not match {nvars} variables")
            if coefficient != 0.0:
                self.terms[exponent] = self.terms.get(exponent, 0.0) + float(coefficient)

    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars)

    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, index: int) -> "Polynomial":
        exponent = [0] * nvars
        exponent[index] = 1
        return cls(nvars, {tuple(exponent): 1.0})

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=-1)

    @property
    def lowest_degree(self) -> int:
        return min((sum(e) for e in self.terms), default=-1)

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def copy(self) -> "Polynomial":
        return Polynomial(self.nvars, dict(self.terms))

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("Polynomials live in different variable sets")
            return other
        return Polynomial.constant(self.nvars, float(other))

    def __add__(self, other) -> "Polynomial":
        other = self._coerce(other)
        terms = dict(self.terms)
        for exponent, coefficient in other.terms.items():
            terms[exponent] = terms.get(exponent, 0.0) + coefficient
        return Polynomial(self.nvars, {e: c for e, c in terms.items() if c != 0.0})

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            return Polynomial(self.nvars, {e: c * float(other) for e, c in self.terms.items()})
        return self.multiply(other)

    __rmul__ = __mul__

    def multiply(self, other: "Polynomial", max_degree: int | None = None) -> "Polynomial":
        other = self._coerce(other)
        terms: dict[Exponent, float] = {}
        for e1, c1 in self.terms.items():
            d1 = sum(e1)
            for e2, c2 in other.terms.items():
                if max_degree is not None and d1 + sum(e2) > max_degree:
                    continue
                exponent = tuple(a + b for a, b in zip(e1, e2))
                terms[exponent] = terms.get(exponent, 0.0) + c1 * c2
        return Polynomial(self.nvars, terms)

    def truncate(self, max_degree: int) -> "Polynomial":
        return Polynomial(self.nvars, {e: c for e, c in self.terms.items() if sum(e) <= max_degree})

    def homogeneous(self, degree: int) -> "Polynomial":
        return Polynomial(self.nvars, {e: c for e, c in self.terms.items() if sum(e) == degree})

    def diff(self, index: int) -> "Polynomial":
        terms = {}
        for exponent, coefficient in self.terms.items():
            if exponent[index] == 0:
                continue
            lowered = list(exponent)
            lowered[index] -= 1
            terms[tuple(lowered)] = coefficient * exponent[index]
        return Polynomial(self.nvars, terms)

    def compose(self, substitutions: Sequence["Polynomial"], max_degree: int | None = None) -> "Polynomial":
        """Substitute polynomial ``substitutions[i]`` for variable ``i``."""
        if len(substitutions) != self.nvars:
            raise ValueError("One substitution per variable is required")
        nvars_out = substitutions[0].nvars
        powers: dict[tuple[int, int], Polynomial] = {}

        def power(index: int, exponent: int) -> Polynomial:
            if exponent == 0:
                return Polynomial.constant(nvars_out, 1.0)
            key = (index, exponent)
            if key not in powers:
                powers[key] = power(index, exponent - 1).multiply(substitutions[index], max_degree)
            return powers[key]

        result = Polynomial.zero(nvars_out)
        for exponent, coefficient in self.terms.items():
            term = Polynomial.constant(nvars_out, coefficient)
            for index, e in enumerate(exponent):
                if e:
                    term = term.multiply(power(index, e), max_degree)
            result = result + term
        return result

    def embed(self, nvars: int, positions: Sequence[int]) -> "Polynomial":
        """Re-index variables: variable ``i`` becomes variable ``positions[i]`` of ``nvars``."""
        terms = {}
        for exponent, coefficient in self.terms.items():
            target = [0] * nvars
            for index, e in enumerate(exponent):
                target[positions[index]] += e
            terms[tuple(target)] = coefficient
        return Polynomial(nvars, terms)

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        result = np.zeros(points.shape[:-1])
        for exponent, coefficient in self.terms.items():
            result = result + coefficient * np.prod(points ** np.asarray(exponent), axis=-1)
        return result

    def to_table(self) -> list[dict]:
        return [
            {"exponent": list(exponent), "coefficient": coefficient}
            for exponent, coefficient in sorted(self.terms.items())
        ]

    @classmethod
    def from_table(cls, nvars: int, table: list[dict]) -> "Polynomial":
        return cls(nvars, {tuple(row["exponent"]): float(row["coefficient"]) for row in table})

    def __repr__(self) -> str:
        return f"Polynomial(nvars={self.nvars}, terms={len(self.terms)}, degree={self.degree})"


def evaluate_all(polys: Sequence[Polynomial], points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if not polys:
        return np.zeros(points.shape[:-1] + (0,))
    return np.stack([poly(points) for poly in polys], axis=-1)


def jacobian(polys: Sequence[Polynomial]) -> list[list[Polynomial]]:
    return [[poly.diff(i) for i in range(poly.nvars)] for poly in polys]


def evaluate_jacobian(jac: list[list[Polynomial]], points) -> np.ndarray:
    """Evaluate a polynomial Jacobian at points of shape (..., nvars) into (..., rows, cols)."""
    points = np.asarray(points, dtype=float)
    rows = [np.stack([entry(points) for entry in row], axis=-1) for row in jac]
    return np.stack(rows, axis=-2)


def tensor_polynomials(tensors: Sequence[np.ndarray], nvars: int) -> list[Polynomial]:
    """Build Taylor polynomials from derivative tensors.

    ``tensors[j - 1]`` holds the order-j derivatives with shape (nout, nvars, ..., nvars);
    the result for output ``i`` is sum_j T_j[i, a1..aj] w_a1...w_aj / j!.
    """
    nout = tensors[0].shape[0]
    terms: list[dict[Exponent, float]] = [dict() for _ in range(nout)]
    for order, tensor in enumerate(tensors, start=1):
        scale = 1.0 / math.factorial(order)
        for index in np.ndindex(*tensor.shape[1:]):
            exponent = [0] * nvars
            for a in index:
                exponent[a] += 1
            exponent = tuple(exponent)
            for i in range(nout):
                value = tensor[(i,) + index]
                if value != 0.0:
                    terms[i][exponent] = terms[i].get(exponent, 0.0) + scale * value
    return [Polynomial(nvars, t) for t in terms]
