"""B-spline bases, difference penalties and closed-form orthonormal bases.

The B-spline evaluator is a vectorised Cox--de Boor recursion. Clamped
(non-cyclic) bases repeat each boundary knot ``degree + 1`` times so that
``n_basis = len(knots) - degree - 1`` holds exactly; cyclic bases are built
on uniformly spaced breakpoints and wrap the trailing functions onto the
leading ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import DomainError, ValidationError

_DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    """A univariate B-spline basis on a closed interval.

    For clamped bases ``knot_vector`` is the full knot sequence (boundary
    knots repeated). For cyclic bases it holds the ``n_basis + 1`` distinct
    breakpoints of one period.
    """

    knot_vector: np.ndarray
    degree: int = 3
    domain: tuple[float, float] = (0.0, 1.0)
    cyclic: bool = False

    def __post_init__(self):
        knots = np.asarray(self.knot_vector, dtype=float)
        object.__setattr__(self, "knot_vector", knots)
        object.__setattr__(self, "domain", (float(self.domain[0]), float(self.domain[1])))
        if self.degree < 0:
            raise ValidationError("degree must be non-negative")
        if knots.ndim != 1 or not np.all(np.isfinite(knots)):
            raise ValidationError("knot vector must be a finite 1-d sequence")
        if np.any(np.diff(knots) < 0):
            raise ValidationError("knot vector must be non-decreasing")
        a, b = self.domain
        if not a < b:
            raise ValidationError(f"empty domain [{a}, {b}]")
        if self.cyclic:
            if knots.size < 2 or np.any(np.diff(knots) <= 0):
                raise ValidationError("cyclic breakpoints must be strictly increasing")
            if knots.size - 1 <= self.degree:
                raise ValidationError("cyclic basis needs more than `degree` intervals")
        elif knots.size < 2 * (self.degree + 1):
            raise ValidationError(f"knot vector must have at least {2 * (self.degree + 1)} knots for degree {self.degree}")

    @property
    def n_basis(self) -> int:
        if self.cyclic:
            return self.knot_vector.size - 1
        return self.knot_vector.size - self.degree - 1

    def __call__(self, points) -> np.ndarray:
        return evaluate_bspline_basis(self, points)


def bspline_basis(
    n_basis: int,
    domain: tuple[float, float] = (0.0, 1.0),
    degree: int = 3,
    cyclic: bool = False,
) -> SplineBasis:
    """Uniform B-spline basis with ``n_basis`` functions on ``domain``."""
    a, b = map(float, domain)
    if cyclic:
        if n_basis <= degree:
            raise ValidationError("cyclic basis needs n_basis > degree")
        return SplineBasis(np.linspace(a, b, n_basis + 1), degree, (a, b), cyclic=True)
    n_intervals = n_basis - degree
    if n_intervals < 1:
        raise ValidationError(f"n_basis must exceed degree ({degree}) for a clamped basis")
    inner = np.linspace(a, b, n_intervals + 1)
    knots = np.concatenate([np.full(degree, a), inner, np.full(degree, b)])
    return SplineBasis(knots, degree, (a, b))


def _check_points(points, domain):
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise DomainError("points must be one-dimensional")
    a, b = domain
    tol = _DOMAIN_TOL * max(1.0, b - a)
    bad = ~np.isfinite(x) | (x < a - tol) | (x > b + tol)
    if np.any(bad):
        raise DomainError(f"point {x[bad][0]!r} outside domain [{a}, {b}]")
    return np.clip(x, a, b)


def _cox_de_boor(knots: np.ndarray, degree: int, x: np.ndarray) -> np.ndarray:
    n_spans = knots.size - 1
    positive = np.nonzero(np.diff(knots) > 0)[0]
    span = np.searchsorted(knots, x, side="right") - 1
    # right endpoint belongs to the last span of positive length
    span = np.clip(span, positive[0], positive[-1])
    out = np.zeros((x.size, n_spans))
    out[np.arange(x.size), span] = 1.0
    for d in range(1, degree + 1):
        n = knots.size - 1 - d
        lo, hi = knots[:n], knots[d : d + n]
        lo1, hi1 = knots[1 : 1 + n], knots[d + 1 : d + 1 + n]
        den_l = hi - lo
        den_r = hi1 - lo1
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(den_l > 0, (x[:, None] - lo) / den_l, 0.0)
            right = np.where(den_r > 0, (hi1 - x[:, None]) / den_r, 0.0)
        out = left * out[:, :n] + right * out[:, 1 : n + 1]
    return out


def evaluate_bspline_basis(basis: SplineBasis, points) -> np.ndarray:
    """Evaluate all basis functions at ``points``; returns ``[n_points, n_basis]``."""
    x = _check_points(points, basis.domain)
    p = basis.degree
    if not basis.cyclic:
        return _cox_de_boor(basis.knot_vector, p, x)
    brk = basis.knot_vector
    period = brk[-1] - brk[0]
    m = brk.size - 1
    # extend the breakpoints periodically, then fold the wrapped functions
    ext = np.concatenate([brk[m - p : m] - period, brk, brk[1 : p + 1] + period])
    x = np.where(x >= brk[-1], brk[0], x)
    full = _cox_de_boor(ext, p, x)
    full = full[:, : m + p]
    out = full[:, :m].copy()
    out[:, :p] += full[:, m : m + p]
    return out


def difference_operator(M: int, order: int = 2, cyclic: bool = False) -> np.ndarray:
    """The ``order``-th difference matrix acting on ``M`` coefficients."""
    if order < 1:
        raise ValidationError("order must be a positive integer")
    if M <= order:
        raise ValidationError(f"M={M} must exceed the difference order {order}")
    if not cyclic:
        return np.diff(np.eye(M), n=order, axis=0)
    D = np.eye(M)
    for _ in range(order):
        D = np.roll(D, -1, axis=1) - D
    return D


def difference_penalty(M: int, order: int = 2, cyclic: bool = False) -> np.ndarray:
    """Return ``D.T @ D`` for the ``order``-th difference operator on ``M`` coefficients.

    The penalty is symmetric PSD with rank ``M - order`` (``M - 1`` when cyclic).
    """
    D = difference_operator(M, order, cyclic)
    return D.T @ D


def penalty_rank(M: int, order: int = 2, cyclic: bool = False) -> int:
    return M - 1 if cyclic else M - order


ClosedFormKind = Literal["fourier", "orthogonal_polynomial"]

_SQRT2 = np.sqrt(2.0)


def _fourier(s):
    t = 2.0 * np.pi * s
    return [_SQRT2 * np.sin(t), _SQRT2 * np.cos(t), _SQRT2 * np.sin(2 * t), _SQRT2 * np.cos(2 * t)]


def _orthopoly(s):
    return [
        np.ones_like(s),
        np.sqrt(3.0) * (2 * s - 1),
        np.sqrt(5.0) * (6 * s**2 - 6 * s + 1),
        np.sqrt(7.0) * (20 * s**3 - 30 * s**2 + 12 * s - 1),
    ]


_CLOSED_FORM = {"fourier": _fourier, "orthogonal_polynomial": _orthopoly}


def evaluate_closed_form_basis(kind: ClosedFormKind, L: int, points: Sequence[float]) -> np.ndarray:
    """Evaluate the first ``L`` functions of an orthonormal basis on [0, 1].

    ``fourier`` is sin/cos at frequencies 1 and 2; ``orthogonal_polynomial``
    is the shifted Legendre family up to degree 3. Both are orthonormal
    under the continuous inner product on [0, 1].
    """
    if kind not in _CLOSED_FORM:
        raise ValidationError(f"unknown closed-form basis {kind!r}")
    if not 1 <= L <= 4:
        raise ValidationError(f"closed-form bases provide 1..4 functions, got L={L}")
    s = _check_points(points, (0.0, 1.0))
    return np.column_stack(_CLOSED_FORM[kind](s)[:L])
