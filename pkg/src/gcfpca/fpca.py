"""Smoothed covariance eigendecomposition of the assembled random effects.

The empirical covariance is smoothed with a penalised-spline sandwich
smoother ``S C S`` where ``S = B (B'B + lam P)^{-1} B'``. Diagonalising the
penalty in the ``B'B`` metric (Demmler--Reinsch) gives ``S = A diag(d) A'``
with orthonormal ``A``, so every quantity needed for GCV and for the
eigenproblem lives in ``c x c`` matrices.

Eigenfunctions are normalised on the observation grid with weight ``1/K``
and are represented in the smoothing basis for off-grid evaluation. The
continuous domain extends half a grid cell past the first and last grid
points, so that the ``1/K`` sum is the midpoint rule for that interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .basis import SplineBasis, bspline_basis, difference_penalty
from .errors import FitError, ValidationError

DEFAULT_PVE = 0.95


@dataclass
class EigenSystem:
    grid: np.ndarray
    eigenfunctions: np.ndarray  # [K, L]
    spline_coefs: np.ndarray  # [c, L]
    eigenvalues: np.ndarray  # [L]
    pve: float
    n_smooth_basis: int
    basis: SplineBasis = field(repr=False)
    all_eigenvalues: np.ndarray = field(default=None, repr=False)
    smoothing: float = 0.0
    gcv: float = float("nan")
    selector: str = "gcv"

    @property
    def L(self) -> int:
        return self.eigenfunctions.shape[1]

    @property
    def K(self) -> int:
        return self.grid.size

    @property
    def domain(self) -> tuple[float, float]:
        return self.basis.domain

    def truncate(self, L: int) -> "EigenSystem":
        total = _positive_total(self.all_eigenvalues)
        ev = self.all_eigenvalues if self.all_eigenvalues is not None else self.eigenvalues
        pve = float(np.sum(ev[:L]) / total) if total > 0 else 0.0
        return replace(
            self,
            eigenfunctions=self.eigenfunctions[:, :L],
            spline_coefs=self.spline_coefs[:, :L],
            eigenvalues=self.eigenvalues[:L],
            pve=pve,
        )


def _positive_total(ev):
    if ev is None:
        return 0.0
    return float(np.sum(np.clip(ev, 0.0, None)))


def default_n_smooth_basis(K: int) -> int:
    return int(max(4, min(35, int(np.ceil(K / 4)))))


def extended_domain(grid) -> tuple[float, float]:
    grid = np.asarray(grid, dtype=float)
    half = 0.5 * (grid[-1] - grid[0]) / (grid.size - 1)
    return float(grid[0] - half), float(grid[-1] + half)


@dataclass
class _Smoother:
    basis: SplineBasis
    A: np.ndarray  # [K, c], orthonormal columns spanning the basis
    R: np.ndarray  # [c, c], A = B @ R
    s: np.ndarray  # penalty eigenvalues in the A coordinates


def _make_smoother(grid, c: int) -> _Smoother:
    basis = bspline_basis(c, extended_domain(grid), degree=3)
    B = basis(grid)
    G = B.T @ B
    try:
        Lc = linalg.cholesky(G, lower=True)
    except linalg.LinAlgError:
        raise FitError(f"smoothing basis with c={c} is singular on this grid") from None
    P = difference_penalty(c, 2)
    Linv = linalg.solve_triangular(Lc, np.eye(c), lower=True)
    s, U = linalg.eigh(Linv @ P @ Linv.T)
    s = np.clip(s, 0.0, None)
    R = Linv.T @ U
    return _Smoother(basis, B @ R, R, s)


def _center(bhat, mask):
    X = np.array(bhat, dtype=float)
    if mask is None:
        return X - X.mean(axis=0), None
    obs = ~mask
    counts = obs.sum(axis=0)
    if np.any(counts < 2):
        raise FitError("fewer than two observed random effects in some column")
    means = np.where(obs, X, 0.0).sum(axis=0) / counts
    X = np.where(obs, X - means, 0.0)
    return X, obs.astype(float)


def _gcv(log_lam, s, Ct, frob_c, K):
    d = 1.0 / (1.0 + np.exp(log_lam) * s)
    fitted = d[:, None] * Ct * d[None, :]
    rss = frob_c - np.sum(Ct**2) + np.sum((Ct - fitted) ** 2)
    edf = np.sum(d) ** 2
    n = float(K) ** 2
    denom = (1.0 - edf / n) ** 2
    if denom <= 0:
        return np.inf
    return (max(rss, 0.0) / n) / denom


def _select_smoothing(s, Ct, frob_c, K):
    grid = np.linspace(-12.0, 12.0, 49) * np.log(10.0)
    vals = np.array([_gcv(g, s, Ct, frob_c, K) for g in grid])
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(_gcv, bounds=(lo, hi), args=(s, Ct, frob_c, K), method="bounded", options={"xatol": 1e-6})
        if res.fun <= vals[j]:
            return float(np.exp(res.x)), float(res.fun)
    return float(np.exp(grid[j])), float(vals[j])


def select_n_components(eigenvalues, pve: float) -> int:
    """Smallest ``L`` whose cumulative share of the positive eigenvalues reaches ``pve``."""
    if not 0.0 < pve <= 1.0:
        raise ValidationError(f"pve threshold must lie in (0, 1], got {pve}")
    ev = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = ev.sum()
    if total <= 0:
        return 0
    cum = np.cumsum(ev) / total
    return int(np.searchsorted(cum, pve - 1e-12) + 1)


def _sign_fix(phi):
    phi = phi.copy()
    for j in range(phi.shape[1]):
        col = phi[:, j]
        m = col.mean()
        if abs(m) < 1e-8:
            nz = np.nonzero(np.abs(col) > 1e-8)[0]
            flip = nz.size > 0 and col[nz[0]] < 0
        else:
            flip = m < 0
        if flip:
            phi[:, j] = -col
    return phi


def estimate_eigensystem(
    bhat,
    grid=None,
    mask=None,
    n_smooth_basis: int | None = None,
    pve: float | None = DEFAULT_PVE,
    fixed_L: int | None = None,
    smoothing: float | None = None,
) -> EigenSystem:
    """Smooth the covariance of ``bhat`` and return its leading eigenfunctions.

    Parameters
    ----------
    bhat : array, shape (I, K)
        Subject-level random effects on the grid.
    grid : array, shape (K,), optional
        Grid locations; defaults to ``k / K`` for ``k = 1..K``.
    mask : bool array, shape (I, K), optional
        True where an entry is unavailable. Covariances then use pairwise
        complete observations.
    n_smooth_basis : int, optional
        Dimension ``c`` of the cubic smoothing basis.
    pve, fixed_L
        Truncation rule; ``fixed_L`` wins when given.
    smoothing : float, optional
        Fixed smoothing parameter. ``None`` selects it by GCV; ``0`` with
        ``c == K`` reproduces the raw covariance.
    """
    bhat = np.asarray(bhat, dtype=float)
    if bhat.ndim != 2:
        raise ValidationError("bhat must be a 2-d [I, K] array")
    I, K = bhat.shape
    if I < 2:
        raise ValidationError("need at least two subjects")
    grid = np.arange(1, K + 1) / K if grid is None else np.asarray(grid, dtype=float)
    if grid.shape != (K,):
        raise ValidationError("grid length does not match bhat")
    c = default_n_smooth_basis(K) if n_smooth_basis is None else int(n_smooth_basis)
    if c > K:
        raise ValidationError(f"n_smooth_basis={c} exceeds the grid size {K}")
    if c < 4:
        raise ValidationError("n_smooth_basis must be at least 4 for a cubic basis")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != bhat.shape:
            raise ValidationError("mask shape does not match bhat")
        if not mask.any():
            mask = None
        elif np.any(mask.mean(axis=0) >= 0.2):
            raise ValidationError("20% or more entries masked in some column")
    if fixed_L is None and pve is None:
        raise ValidationError("give a pve threshold or fixed_L")

    Xc, obs = _center(bhat, mask)
    if not np.any(np.abs(Xc) > 0):
        raise FitError("no subject-level variation")
    sm = _make_smoother(grid, c)
    if obs is None:
        proj = Xc @ sm.A  # O(I K c)
        Ct = proj.T @ proj / (I - 1)
        gram = Xc @ Xc.T if I <= K else Xc.T @ Xc
        frob_c = float(np.sum(gram**2)) / (I - 1) ** 2
    else:
        pairs = obs.T @ obs
        C = (Xc.T @ Xc) / np.maximum(pairs - 1.0, 1.0)
        Ct = sm.A.T @ C @ sm.A
        frob_c = float(np.sum(C**2))

    if smoothing is None:
        lam, gcv = _select_smoothing(sm.s, Ct, frob_c, K)
        selector = "gcv"
    else:
        lam, gcv, selector = float(smoothing), float("nan"), "fixed"
    d = 1.0 / (1.0 + lam * sm.s)
    Msm = d[:, None] * Ct * d[None, :]
    Msm = 0.5 * (Msm + Msm.T)
    w, U = linalg.eigh(Msm)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    all_ev = np.clip(w, 0.0, None) / K
    if fixed_L is not None:
        if fixed_L < 1 or fixed_L > c:
            raise ValidationError(f"fixed_L={fixed_L} must lie in 1..{c}")
        L = int(fixed_L)
    else:
        L = max(1, select_n_components(all_ev, pve))
    phi = np.sqrt(K) * (sm.A @ U[:, :L])
    phi = _sign_fix(phi)
    # coefficients reproduce phi exactly on the grid: phi = B R U sqrt(K)
    coefs = np.linalg.lstsq(sm.A, phi, rcond=None)[0]
    coefs = sm.R @ coefs
    total = _positive_total(all_ev)
    return EigenSystem(
        grid=grid,
        eigenfunctions=phi,
        spline_coefs=coefs,
        eigenvalues=all_ev[:L].copy(),
        pve=float(all_ev[:L].sum() / total) if total > 0 else 0.0,
        n_smooth_basis=c,
        basis=sm.basis,
        all_eigenvalues=all_ev,
        smoothing=lam,
        gcv=gcv,
        selector=selector,
    )


def evaluate_eigenfunctions(es: EigenSystem, points) -> np.ndarray:
    """Evaluate the eigenfunctions anywhere in their domain."""
    return es.basis(points) @ es.spline_coefs


def align_sign(estimated: EigenSystem, reference) -> EigenSystem:
    """Flip columns so each has a non-negative inner product with ``reference``."""
    reference = np.asarray(reference, dtype=float)
    if reference.shape != estimated.eigenfunctions.shape:
        raise ValidationError(f"reference shape {reference.shape} != {estimated.eigenfunctions.shape}")
    signs = np.where(np.sum(estimated.eigenfunctions * reference, axis=0) < 0, -1.0, 1.0)
    return replace(estimated, eigenfunctions=estimated.eigenfunctions * signs, spline_coefs=estimated.spline_coefs * signs)


def align_sign_matrix(estimated, reference) -> np.ndarray:
    """Matrix form of :func:`align_sign`."""
    estimated = np.asarray(estimated, dtype=float)
    signs = np.where(np.sum(estimated * np.asarray(reference, dtype=float), axis=0) < 0, -1.0, 1.0)
    return estimated * signs
