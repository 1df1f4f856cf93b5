"""Per-bin random-intercept GLMMs.

Inside a bin every subject has a constant linear predictor
``x_i' beta + b_i`` with ``b_i ~ N(0, sigma^2)``, so the bin likelihood only
depends on per-subject sufficient statistics (count, sum of outcomes and the
summed base measure). Non-Gaussian families are fitted by maximising the
Laplace approximation to the marginal likelihood over ``(beta, sigma)``;
the Gaussian family uses the exact profiled REML criterion.

The Laplace objective is parametrised through the standardised effect
``u_i = b_i / sigma``. This keeps it smooth down to ``sigma = 0``, which is
where the boundary estimate lives.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .binning import BinPlan
from .dataset import LongDataset
from .errors import FitError, ValidationError
from .family import Family

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalControls:
    ftol: float = 1e-8
    xtol: float = 1e-6
    max_iter: int = 200
    inner_tol: float = 1e-10
    inner_max_iter: int = 100
    sigma2_fixed: float | None = None
    # sigma^2 at or below this (or no better than the GLM fit) is pinned to 0
    boundary_sigma2: float = 1e-10
    max_failure_fraction: float = 0.2


@dataclass
class BinStats:
    """Per-subject sufficient statistics of one bin.

    ``n``: observation counts, ``sy``: outcome sums, ``syy``: sums of
    squares (Gaussian only), ``sc``: summed ``c(y)`` (Poisson only).
    """

    design: np.ndarray
    n: np.ndarray
    sy: np.ndarray
    syy: np.ndarray
    sc: np.ndarray

    @property
    def n_subjects(self) -> int:
        return self.n.size

    @classmethod
    def from_block(cls, y: np.ndarray, design: np.ndarray, family: Family) -> "BinStats":
        obs = ~np.isnan(y)
        y0 = np.where(obs, y, 0.0)
        sc = np.zeros(y.shape[0])
        if family.kind == "poisson_log":
            sc = np.where(obs, family.log_base(y0), 0.0).sum(axis=1)
        return cls(design, obs.sum(axis=1).astype(float), y0.sum(axis=1), (y0**2).sum(axis=1), sc)


@dataclass
class LocalFit:
    bin_center: int
    beta_star: np.ndarray
    sigma2: float
    blups: np.ndarray
    converged: bool
    n_iter: int
    dispersion: float = 1.0
    log_likelihood: float = float("nan")
    observed: np.ndarray | None = None
    message: str = ""

    def __post_init__(self):
        if self.sigma2 <= 0.0:
            self.sigma2 = 0.0
            self.blups = np.zeros_like(self.blups)


@dataclass
class BinFailure:
    bin_center: int
    error: str


@dataclass
class _InnerState:
    u: np.ndarray
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Laplace objective
# ---------------------------------------------------------------------------


def _subject_terms(stats: BinStats, family: Family, eta, phi):
    A = family.cumulant(eta)
    mu = family.mean(eta)
    g = (stats.sy - stats.n * mu) / phi
    W = stats.n * family.variance(eta) / phi
    W3 = stats.n * family.variance_slope(eta) / phi
    return A, g, W, W3


def _conditional_loglik(stats, family, eta, phi):
    if family.is_gaussian:
        base = -0.5 * stats.syy / phi - 0.5 * stats.n * np.log(2 * np.pi * phi)
    else:
        base = stats.sc
    return (stats.sy * eta - stats.n * family.cumulant(eta)) / phi + base


def solve_modes(stats, family, beta, sigma, phi=1.0, u0=None, tol=1e-10, max_iter=100, trace=None):
    """Posterior modes of the standardised random effects ``u_i = b_i / sigma``.

    Damped Newton, vectorised over subjects. Each subject's objective
    ``log f(y_i | x_i'beta + sigma u) - u^2 / 2`` is concave, and step
    halving keeps it non-decreasing. When ``trace`` is a list, the summed
    objective is appended after every iteration.
    """
    lin = stats.design @ beta
    u = np.zeros(stats.n_subjects) if u0 is None else np.array(u0, dtype=float)

    def h(u):
        return _conditional_loglik(stats, family, lin + sigma * u, phi) - 0.5 * u**2

    cur = h(u)
    if trace is not None:
        trace.append(float(cur.sum()))
    for it in range(max_iter):
        _, g, W, _ = _subject_terms(stats, family, lin + sigma * u, phi)
        grad = sigma * g - u
        step = grad / (sigma**2 * W + 1.0)
        if np.max(np.abs(step)) < tol:
            break
        t = np.ones_like(u)
        for _ in range(60):
            cand = h(u + t * step)
            worse = cand < cur - 1e-12 * (1.0 + np.abs(cur))
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        new_u = u + t * step
        new = h(new_u)
        keep = new >= cur - 1e-12 * (1.0 + np.abs(cur))
        u = np.where(keep, new_u, u)
        cur = np.where(keep, new, cur)
        if trace is not None:
            trace.append(float(cur.sum()))
    return u


def laplace_loglik_and_grad(theta, stats: BinStats, family: Family, phi=1.0, state: _InnerState | None = None, tol=1e-10):
    """Laplace-approximated marginal log-likelihood and its gradient.

    ``theta = (beta_0 .. beta_p, sigma)`` with ``sigma >= 0``. The gradient
    accounts for the dependence of the modes on ``theta`` by implicit
    differentiation of the mode equation.
    """
    theta = np.asarray(theta, dtype=float)
    beta, sigma = theta[:-1], float(theta[-1])
    u0 = state.u if state is not None else None
    u = solve_modes(stats, family, beta, sigma, phi, u0=u0, tol=tol)
    if state is not None:
        state.u = u
    eta = stats.design @ beta + sigma * u
    _, g, W, W3 = _subject_terms(stats, family, eta, phi)
    H = sigma**2 * W + 1.0
    value = float(np.sum(_conditional_loglik(stats, family, eta, phi) - 0.5 * u**2 - 0.5 * np.log(H)))
    d_beta = stats.design.T @ (g - 0.5 * sigma**2 * W3 / H**2)
    du_dsigma = (g - sigma * W * u) / H
    dH_dsigma = 2 * sigma * W + sigma**2 * W3 * (u + sigma * du_dsigma)
    d_sigma = float(np.sum(u * g - 0.5 * dH_dsigma / H))
    return value, np.append(d_beta, d_sigma)


def laplace_loglik(stats: BinStats, family: Family, beta, sigma2, phi=1.0) -> float:
    """Laplace log marginal likelihood at ``(beta, sigma2)`` (exact when Gaussian)."""
    theta = np.append(np.asarray(beta, dtype=float), np.sqrt(max(sigma2, 0.0)))
    return laplace_loglik_and_grad(theta, stats, family, phi)[0]


# ---------------------------------------------------------------------------
# Pooled GLM (sigma^2 = 0)
# ---------------------------------------------------------------------------


def fit_pooled_glm(stats: BinStats, family: Family, phi=1.0, tol=1e-12, max_iter=200, beta0=None):
    """Newton/IRLS fit of the GLM that ignores the random intercept.

    Returns ``(beta, converged, n_iter)``.
    """
    X = stats.design
    if family.is_gaussian:
        ybar = np.divide(stats.sy, stats.n, out=np.zeros_like(stats.sy), where=stats.n > 0)
        A = X.T @ (stats.n[:, None] * X)
        return np.linalg.solve(A, X.T @ (stats.n * ybar)), True, 1
    if beta0 is None:
        # start from the link of the pooled mean, shrunk away from the boundary
        mbar = (stats.sy.sum() + 0.5) / (stats.n.sum() + 1.0)
        beta = np.zeros(X.shape[1])
        beta[0] = float(family.link(mbar))
    else:
        beta = np.array(beta0, dtype=float)

    def obj(b):
        return float(np.sum(_conditional_loglik(stats, family, X @ b, phi)))

    cur = obj(beta)
    for it in range(1, max_iter + 1):
        _, g, W, _ = _subject_terms(stats, family, X @ beta, phi)
        grad = X.T @ g
        hess = X.T @ (W[:, None] * X)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False, it
        t = 1.0
        while t > 1e-10:
            cand = obj(beta + t * step)
            if cand >= cur - 1e-12 * abs(cur):
                break
            t *= 0.5
        beta = beta + t * step
        cur = obj(beta)
        if np.max(np.abs(t * step)) < tol * (1.0 + np.max(np.abs(beta))):
            return beta, True, it
    return beta, False, max_iter


# ---------------------------------------------------------------------------
# Gaussian REML
# ---------------------------------------------------------------------------


def _reml_profile(log_ratio, stats: BinStats, nobs_total, rank):
    gamma = 0.0 if log_ratio is None else float(np.exp(log_ratio))
    n, X = stats.n, stats.design
    a = n / (1.0 + n * gamma)
    ybar = np.divide(stats.sy, n, out=np.zeros_like(stats.sy), where=n > 0)
    XtAX = X.T @ (a[:, None] * X)
    beta = np.linalg.solve(XtAX, X.T @ (a * ybar))
    r = ybar - X @ beta
    wss = stats.syy - n * ybar**2
    Q = float(np.sum(wss) + np.sum(a * r**2))
    sign, logdet = np.linalg.slogdet(XtAX)
    crit = -0.5 * ((nobs_total - rank) * np.log(Q) + np.sum(np.log1p(n * gamma)) + logdet)
    return crit, beta, Q, a, r


def _fit_gaussian(stats: BinStats, controls: LocalControls, center: int) -> LocalFit:
    nobs = float(stats.n.sum())
    rank = stats.design.shape[1]
    if nobs - rank <= 0:
        raise FitError("not enough observations for REML")
    if controls.sigma2_fixed is not None and controls.sigma2_fixed <= 0:
        best = None
    else:
        res = optimize.minimize_scalar(
            lambda lr: -_reml_profile(lr, stats, nobs, rank)[0],
            bounds=(-25.0, 12.0),
            method="bounded",
            options={"xatol": 1e-8, "maxiter": controls.max_iter},
        )
        best = float(res.x)
        if -res.fun <= _reml_profile(None, stats, nobs, rank)[0]:
            best = None
    crit, beta, Q, a, r = _reml_profile(best, stats, nobs, rank)
    phi = Q / (nobs - rank)
    if not phi > 0:
        raise FitError("zero residual variance in bin (degenerate outcomes)")
    gamma = 0.0 if best is None else float(np.exp(best))
    sigma2 = gamma * phi
    if sigma2 <= controls.boundary_sigma2:
        sigma2, gamma = 0.0, 0.0
    blups = gamma * a * r
    loglik = laplace_loglik(stats, Family("gaussian_identity"), beta, sigma2, phi)
    return LocalFit(center, beta, sigma2, blups, True, 1, phi, loglik, stats.n > 0, "reml")


# ---------------------------------------------------------------------------
# Public fitting API
# ---------------------------------------------------------------------------


def _check_stats(stats: BinStats, family: Family, y_obs: np.ndarray):
    if y_obs.size == 0:
        raise FitError("bin has no observations")
    if np.all(y_obs == y_obs[0]):
        raise FitError("degenerate bin: all outcomes identical")
    Xo = stats.design[stats.n > 0]
    if np.linalg.matrix_rank(Xo) < stats.design.shape[1]:
        raise FitError("rank-deficient covariates in bin")


def fit_bin_stats(stats: BinStats, family: Family, controls: LocalControls | None = None, center: int = 0) -> LocalFit:
    """Fit the random-intercept GLMM from precomputed sufficient statistics."""
    controls = controls or LocalControls()
    if family.is_gaussian:
        return _fit_gaussian(stats, controls, center)
    phi = 1.0
    beta_glm, glm_ok, glm_iter = fit_pooled_glm(stats, family, phi)
    if controls.sigma2_fixed is not None and controls.sigma2_fixed <= 0:
        ll = laplace_loglik(stats, family, beta_glm, 0.0, phi)
        return LocalFit(center, beta_glm, 0.0, np.zeros(stats.n_subjects), glm_ok, glm_iter, phi, ll, stats.n > 0, "glm")

    # working residuals of the pooled fit set the initial sigma^2
    eta0 = stats.design @ beta_glm
    has = stats.n > 0
    mu0 = family.mean(eta0[has])
    v0 = family.variance(eta0[has])
    ybar = stats.sy[has] / stats.n[has]
    work = (ybar - mu0) / np.maximum(v0, 1e-10)
    sigma_init = np.sqrt(max(0.1 * float(np.var(work)), 1e-4))
    state = _InnerState(u=np.zeros(stats.n_subjects))

    if controls.sigma2_fixed is not None:
        sig = np.sqrt(controls.sigma2_fixed)

        def f(b):
            v, g = laplace_loglik_and_grad(np.append(b, sig), stats, family, phi, state, controls.inner_tol)
            return -v, -g[:-1]

        res = optimize.minimize(f, beta_glm, jac=True, method="L-BFGS-B",
                                options={"ftol": controls.ftol, "gtol": controls.xtol, "maxiter": controls.max_iter})
        theta = np.append(res.x, sig)
    else:
        def f(th):
            v, g = laplace_loglik_and_grad(th, stats, family, phi, state, controls.inner_tol)
            return -v, -g

        x0 = np.append(beta_glm, sigma_init)
        bounds = [(None, None)] * beta_glm.size + [(0.0, None)]
        res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": controls.ftol, "gtol": controls.xtol, "maxiter": controls.max_iter})
        theta = res.x
    value = -float(res.fun)
    beta, sigma = theta[:-1], float(theta[-1])
    converged = bool(res.success) or res.nit < controls.max_iter
    n_iter = int(res.nit)
    if controls.sigma2_fixed is None:
        ll_glm = laplace_loglik(stats, family, beta_glm, 0.0, phi)
        if sigma**2 <= controls.boundary_sigma2 or ll_glm >= value - 1e-10:
            return LocalFit(center, beta_glm, 0.0, np.zeros(stats.n_subjects), glm_ok, n_iter, phi, ll_glm, stats.n > 0, "boundary")
    u = solve_modes(stats, family, beta, sigma, phi, u0=state.u, tol=controls.inner_tol)
    return LocalFit(center, beta, sigma**2, sigma * u, converged, n_iter, phi, value, stats.n > 0, str(res.message))


def fit_local_glmm(data: LongDataset, family: Family, controls: LocalControls | None = None, bin_center: int = 0) -> LocalFit:
    """Fit the bin model to a dataset whose grid points all belong to one bin."""
    design = data.design()
    stats = BinStats.from_block(data.outcomes, design, family)
    y_obs = data.outcomes[~np.isnan(data.outcomes)]
    _check_stats(stats, family, y_obs)
    return fit_bin_stats(stats, family, controls, bin_center)


def _window_stats(data: LongDataset, plan: BinPlan, family: Family):
    """Sufficient statistics of every bin via cumulative sums over the grid."""
    y = data.outcomes
    obs = ~np.isnan(y)
    y0 = np.where(obs, y, 0.0)
    cols = [obs.astype(float), y0, y0**2]
    if family.kind == "poisson_log":
        cols.append(np.where(obs, family.log_base(y0), 0.0))
    else:
        cols.append(np.zeros_like(y0))
    design = data.design()
    out = []
    for k in plan.centers:
        idx = plan.members_zero_based(int(k))
        n, sy, syy, sc = (c[:, idx].sum(axis=1) for c in cols)
        out.append((BinStats(design, n, sy, syy, sc), idx))
    return out


def fit_all_bins(data: LongDataset, plan: BinPlan, family: Family, controls: LocalControls | None = None, threads: int = 1):
    """Fit every bin of ``plan``; returns a list of ``LocalFit`` or ``BinFailure``.

    Bins are independent, so the result does not depend on ``threads`` or on
    execution order. Raises ``FitError`` when more than
    ``controls.max_failure_fraction`` of the bins fail.
    """
    controls = controls or LocalControls()
    if plan.n_grid != data.K:
        raise ValidationError(f"bin plan covers {plan.n_grid} grid points, data has {data.K}")
    work = _window_stats(data, plan, family)

    def run(item):
        k, (stats, idx) = item
        block = data.outcomes[:, idx]
        try:
            _check_stats(stats, family, block[~np.isnan(block)])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return fit_bin_stats(stats, family, controls, int(k))
        except (FitError, np.linalg.LinAlgError) as exc:
            return BinFailure(int(k), str(exc))

    items = list(zip(plan.centers, work))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(run, items))
    else:
        fits = [run(it) for it in items]
    n_fail = sum(isinstance(f, BinFailure) for f in fits)
    if n_fail:
        logger.warning("%d of %d local fits failed", n_fail, len(fits))
    if n_fail > controls.max_failure_fraction * len(fits):
        raise FitError(f"{n_fail} of {len(fits)} local fits failed")
    return fits


def assemble_random_effect_matrix(fits, I: int, K: int):
    """Stack per-bin BLUPs into an ``[I, K]`` matrix plus a boolean mask.

    ``mask[i, k]`` is True where the entry is unavailable: the bin failed or
    subject ``i`` had no observation in it.
    """
    bhat = np.zeros((I, K))
    mask = np.zeros((I, K), dtype=bool)
    seen = np.zeros(K, dtype=bool)
    for fit in fits:
        k = fit.bin_center - 1
        if not 0 <= k < K:
            raise ValidationError(f"bin center {fit.bin_center} outside 1..{K}")
        seen[k] = True
        if isinstance(fit, BinFailure):
            mask[:, k] = True
            continue
        if fit.blups.shape != (I,):
            raise ValidationError(f"bin {fit.bin_center}: expected {I} BLUPs, got {fit.blups.shape}")
        bhat[:, k] = fit.blups
        if fit.observed is not None:
            mask[:, k] = ~np.asarray(fit.observed, dtype=bool)
    if not np.all(seen):
        raise ValidationError(f"fits do not cover bins {np.nonzero(~seen)[0] + 1}")
    bhat[mask] = 0.0
    return bhat, mask
