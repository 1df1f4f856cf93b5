"""Joint penalised GLMM with spline fixed effects and eigenfunction random slopes.

The linear predictor of subject ``i`` at grid point ``k`` is

    eta_ik = sum_r x_ir * B(s_k)' beta_r + Phi(s_k)' xi_i,     x_i0 = 1,

with a second-order difference penalty ``tau_r * P`` on each ``beta_r`` and
independent ``xi_il ~ N(0, lambda_l)``. The penalised log-likelihood is
maximised by Newton's method. Each Newton system is solved by eliminating
the per-subject ``L x L`` random-effect blocks (Schur complement onto the
fixed effects), so no ``IL x IL`` matrix is ever formed. Subjects are
processed in fixed-size chunks whose partial sums are reduced in chunk
order. The result therefore does not depend on the worker count.

Between inner solves the variance components are refreshed: ``lambda`` by
an EM step and ``tau`` by maximising the restricted likelihood of the
working Gaussian model at the current mode.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.stats import norm

from .basis import SplineBasis, bspline_basis, difference_penalty, penalty_rank
from .dataset import LongDataset
from .errors import ConvergenceError, ValidationError
from .family import Family
from .fpca import EigenSystem, evaluate_eigenfunctions, extended_domain

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 256


@dataclass(frozen=True)
class JointControls:
    max_outer: int = 50
    outer_tol: float = 1e-4
    max_inner: int = 50
    inner_tol: float = 1e-10
    smoothing: tuple | None = None  # fixed tau per covariate block; None estimates
    lambda_fixed: tuple | None = None  # fixed random-slope variances; None estimates
    dispersion_fixed: float | None = None
    log_tau_bounds: tuple = (-15.0, 20.0)
    drop_ratio: float = 1e-6
    chunk_size: int = DEFAULT_CHUNK
    threads: int = 1
    divergence_tol: float = 1e-4  # relative drop per outer step that counts as a decrease


@dataclass
class JointDesign:
    """Everything needed to evaluate the joint model, stored in factored form.

    ``X`` (fixed effects) rows are ``x_i (kron) B(s_k)``; ``Z`` (random
    effects) is block-diagonal with ``Phi`` for every subject. Neither is
    materialised by the fitter; :meth:`fixed_matrix` and
    :meth:`random_matrix` build them explicitly for inspection and tests.
    """

    y: np.ndarray  # [I, K], NaN = missing
    subj_design: np.ndarray  # [I, p+1]
    B: np.ndarray  # [K, M]
    Phi: np.ndarray  # [K, L]
    fixed_basis: SplineBasis
    penalty: np.ndarray  # [M, M]
    penalty_rank: int
    grid: np.ndarray
    eigensystem: EigenSystem | None = None
    subjects: np.ndarray | None = None
    covariate_names: tuple = ()

    @property
    def I(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.y.shape[1]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def L(self) -> int:
        return self.Phi.shape[1]

    @property
    def n_terms(self) -> int:
        return self.subj_design.shape[1]

    @property
    def q(self) -> int:
        return self.n_terms * self.M

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    def fixed_matrix(self) -> np.ndarray:
        """Dense ``[n_obs, (p+1) M]`` fixed-effect design over observed cells."""
        rows = np.einsum("ir,km->ikrm", self.subj_design, self.B).reshape(self.I, self.K, self.q)
        return rows[self.observed]

    def random_matrix(self) -> sparse.csr_matrix:
        """Sparse ``[n_obs, I L]`` random-effect design over observed cells."""
        obs = self.observed
        L = self.L
        data, cols, indptr = [], [], [0]
        for i in range(self.I):
            for k in np.nonzero(obs[i])[0]:
                data.append(self.Phi[k])
                cols.append(i * L + np.arange(L))
                indptr.append(indptr[-1] + L)
        n = len(indptr) - 1
        data = np.concatenate(data) if data else np.zeros(0)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        return sparse.csr_matrix((data, cols, np.asarray(indptr)), shape=(n, self.I * L))

    def response(self) -> np.ndarray:
        return self.y[self.observed]


def fixed_effect_basis(grid, n_basis: int, cyclic: bool = False) -> SplineBasis:
    return bspline_basis(n_basis, extended_domain(grid), degree=3, cyclic=cyclic)


def assemble_joint_design(data: LongDataset, fixed_basis: SplineBasis, es: EigenSystem | None, penalty_order: int = 2) -> JointDesign:
    """Factored design for the joint model of ``data`` on ``es``'s eigenfunctions.

    ``es=None`` gives a model without random slopes.
    """
    if es is not None:
        if es.grid.shape != data.grid.shape or not np.allclose(es.grid, data.grid, rtol=0, atol=1e-12):
            raise ValidationError("eigensystem grid does not match the data grid")
        Phi = es.eigenfunctions
    else:
        Phi = np.zeros((data.K, 0))
    B = fixed_basis(data.grid)
    M = fixed_basis.n_basis
    if M > penalty_order:
        pen, rank = difference_penalty(M, penalty_order, fixed_basis.cyclic), penalty_rank(M, penalty_order, fixed_basis.cyclic)
    else:
        # too few coefficients to have any roughness: leave them unpenalised
        pen, rank = np.zeros((M, M)), 0
    return JointDesign(
        y=data.outcomes,
        subj_design=data.design(),
        B=B,
        Phi=np.asarray(Phi, dtype=float),
        fixed_basis=fixed_basis,
        penalty=pen,
        penalty_rank=rank,
        grid=data.grid,
        eigensystem=es,
        subjects=data.subjects,
        covariate_names=("intercept",) + tuple(data.covariate_names),
    )


@dataclass
class GcFpcaFit:
    family: Family
    fixed_basis: SplineBasis
    beta_coefs: np.ndarray  # [p+1, M]
    coef_cov: np.ndarray  # [(p+1)M, (p+1)M]
    lambda_: np.ndarray  # [L]
    scores: np.ndarray  # [I, L]
    eigensystem: EigenSystem | None
    smoothing: np.ndarray  # [p+1]
    converged: bool
    log_likelihood: float
    dispersion: float = 1.0
    conditional_loglik: float = float("nan")
    subjects: np.ndarray | None = None
    subj_design: np.ndarray | None = None
    covariate_names: tuple = ()
    n_outer: int = 0
    n_inner: int = 0
    dropped: tuple = ()
    trace: list = field(default_factory=list, repr=False)
    grid: np.ndarray | None = None

    @property
    def L(self) -> int:
        return self.scores.shape[1]

    def coef_block(self, r: int) -> np.ndarray:
        M = self.fixed_basis.n_basis
        return self.coef_cov[r * M : (r + 1) * M, r * M : (r + 1) * M]


# ---------------------------------------------------------------------------
# Core linear algebra
# ---------------------------------------------------------------------------


class _Problem:
    def __init__(self, design: JointDesign, family: Family, controls: JointControls):
        self.d = design
        self.family = family
        self.controls = controls
        self.obs = design.observed
        self.y0 = np.where(self.obs, design.y, 0.0)
        self.n_obs = int(self.obs.sum())
        I = design.I
        cs = max(1, int(controls.chunk_size))
        self.chunks = [slice(a, min(a + cs, I)) for a in range(0, I, cs)]
        if family.kind == "poisson_log":
            self.base = float(np.sum(np.where(self.obs, family.log_base(self.y0), 0.0)))
        else:
            self.base = 0.0

    def map_chunks(self, fn):
        if self.controls.threads > 1 and len(self.chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.controls.threads) as pool:
                return list(pool.map(fn, self.chunks))
        return [fn(c) for c in self.chunks]

    def penalty_matrix(self, tau) -> np.ndarray:
        return np.kron(np.diag(np.asarray(tau, dtype=float)), self.d.penalty)

    def eta(self, beta, xi) -> np.ndarray:
        d = self.d
        curves = d.B @ beta.reshape(d.n_terms, d.M).T  # [K, p+1]
        return d.subj_design @ curves.T + xi @ d.Phi.T

    def loglik(self, eta, phi) -> float:
        fam = self.family
        ll = (self.y0 * eta - fam.cumulant(eta)) / phi
        if fam.is_gaussian:
            ll = ll - 0.5 * self.y0**2 / phi - 0.5 * np.log(2 * np.pi * phi)
        return float(np.sum(np.where(self.obs, ll, 0.0))) + self.base

    def pen_objective(self, beta, xi, lam, tau, phi) -> float:
        S = self.penalty_matrix(tau)
        return self.loglik(self.eta(beta, xi), phi) - 0.5 * beta @ S @ beta - 0.5 * np.sum(xi**2 / lam)

    def working(self, eta, phi):
        fam = self.family
        W = np.where(self.obs, fam.variance(eta) / phi, 0.0)
        e = np.where(self.obs, (self.y0 - fam.mean(eta)) / phi, 0.0)
        return W, e

    def gradient(self, eta, beta, xi, lam, tau, phi):
        d = self.d
        _, e = self.working(eta, phi)
        g_beta = (d.subj_design.T @ (e @ d.B)).ravel() - self.penalty_matrix(tau) @ beta
        g_xi = e @ d.Phi - xi / lam
        return g_beta, g_xi

    def xtwx(self, W) -> np.ndarray:
        d = self.d
        T = np.einsum("ir,is,ik->rsk", d.subj_design, d.subj_design, W)
        out = np.einsum("rsk,km,kn->rmsn", T, d.B, d.B)
        return out.reshape(d.q, d.q)

    def cross(self, W, sl) -> np.ndarray:
        """``E_i = Phi' W_i X_i`` for the subjects in ``sl``: ``[n, L, q]``."""
        d = self.d
        F = np.einsum("ik,kl,km->ilm", W[sl], d.Phi, d.B)
        E = d.subj_design[sl][:, None, :, None] * F[:, :, None, :]
        return E.reshape(F.shape[0], d.L, d.q)

    def reduce(self, W, lam, g_xi, extra_rhs=None):
        """First elimination pass: per-subject inverses and Schur contributions."""
        d = self.d
        L, q = d.L, d.q
        inv_lam = 1.0 / lam

        def work(sl):
            Wc = W[sl]
            D = np.einsum("ik,kl,kn->iln", Wc, d.Phi, d.Phi)
            D[:, np.arange(L), np.arange(L)] += inv_lam
            Dinv = np.linalg.inv(D)
            logdet = float(np.sum(np.linalg.slogdet(D)[1]))
            E = self.cross(W, sl)
            DinvE = Dinv @ E
            schur = np.einsum("ilq,ilr->qr", E, DinvE)
            rhs = np.einsum("ilq,il->q", DinvE, g_xi[sl])
            rhs2 = None if extra_rhs is None else np.einsum("ilq,il->q", DinvE, extra_rhs[sl])
            quad2 = None if extra_rhs is None else float(np.einsum("il,ilm,im->", extra_rhs[sl], Dinv, extra_rhs[sl]))
            return Dinv, logdet, schur, rhs, rhs2, quad2

        parts = self.map_chunks(work) if L else []
        Dinv = np.concatenate([p[0] for p in parts]) if parts else np.zeros((d.I, 0, 0))
        schur = np.zeros((q, q))
        rhs = np.zeros(q)
        rhs2 = np.zeros(q)
        quad2 = 0.0
        logdet = 0.0
        for p in parts:
            logdet += p[1]
            schur += p[2]
            rhs += p[3]
            if extra_rhs is not None:
                rhs2 += p[4]
                quad2 += p[5]
        return Dinv, logdet, schur, rhs, rhs2, quad2

    def back(self, W, Dinv, g_xi, dbeta, V=None):
        """Second pass: random-effect updates and, optionally, their variances."""
        d = self.d

        def work(sl):
            if d.L == 0:
                n = sl.stop - sl.start
                return np.zeros((n, 0)), np.zeros((n, 0))
            E = self.cross(W, sl)
            Di = Dinv[sl]
            dxi = np.einsum("ilm,im->il", Di, g_xi[sl] - E @ dbeta)
            var = None
            if V is not None:
                DinvE = Di @ E
                var = np.diagonal(Di, axis1=1, axis2=2) + np.einsum("ilq,qr,ilr->il", DinvE, V, DinvE)
            return dxi, var

        parts = self.map_chunks(work)
        dxi = np.concatenate([p[0] for p in parts])
        var = np.concatenate([p[1] for p in parts]) if V is not None else None
        return dxi, var


def _chol_solve(C, b):
    try:
        cf = linalg.cho_factor(C, lower=True, check_finite=False)
        return linalg.cho_solve(cf, b, check_finite=False), cf
    except linalg.LinAlgError:
        return np.linalg.lstsq(C, b, rcond=None)[0], None


def _logdet_pd(C, cf=None) -> float:
    if cf is not None:
        return float(2.0 * np.sum(np.log(np.diag(cf[0]))))
    sign, ld = np.linalg.slogdet(C)
    return float(ld) if sign > 0 else -np.inf


def newton_direction(prob: _Problem, beta, xi, lam, tau, phi):
    """Newton direction for the penalised log-likelihood via Schur elimination.

    Returns ``(dbeta, dxi, aux)`` where ``aux`` carries the pieces reused
    by the variance updates.
    """
    eta = prob.eta(beta, xi)
    W, _ = prob.working(eta, phi)
    g_beta, g_xi = prob.gradient(eta, beta, xi, lam, tau, phi)
    S = prob.penalty_matrix(tau)
    XtWX = prob.xtwx(W)
    Dinv, logdetD, schur, rhs_xi, _, _ = prob.reduce(W, lam, g_xi)
    C = XtWX + S - schur
    C = 0.5 * (C + C.T)
    dbeta, cf = _chol_solve(C, g_beta - rhs_xi)
    dxi, _ = prob.back(W, Dinv, g_xi, dbeta)
    aux = {"W": W, "C": C, "cf": cf, "Dinv": Dinv, "logdetD": logdetD, "XtWX": XtWX, "schur": schur, "eta": eta}
    return dbeta, dxi, aux


def dense_newton_direction(design: JointDesign, family: Family, beta, xi, lam, tau, phi=1.0):
    """Reference Newton direction from the explicitly assembled system."""
    X = design.fixed_matrix()
    Z = design.random_matrix().toarray()
    y = design.response()
    b = np.concatenate([beta, xi.ravel()])
    A = np.hstack([X, Z])
    eta = A @ b
    w = family.variance(eta) / phi
    e = (y - family.mean(eta)) / phi
    S = np.kron(np.diag(tau), design.penalty)
    P = linalg.block_diag(S, np.diag(np.tile(1.0 / np.asarray(lam), design.I)))
    H = A.T @ (w[:, None] * A) + P
    g = A.T @ e - P @ b
    step = np.linalg.solve(H, g)
    return step[: X.shape[1]], step[X.shape[1] :].reshape(design.I, design.L)


def penalized_objective(design: JointDesign, family: Family, beta, xi, lam, tau, phi=1.0) -> float:
    prob = _Problem(design, family, JointControls())
    return prob.pen_objective(np.asarray(beta, float), np.asarray(xi, float), np.asarray(lam, float), tau, phi)


def penalized_gradient(design: JointDesign, family: Family, beta, xi, lam, tau, phi=1.0):
    prob = _Problem(design, family, JointControls())
    beta, xi = np.asarray(beta, float), np.asarray(xi, float)
    return prob.gradient(prob.eta(beta, xi), beta, xi, np.asarray(lam, float), tau, phi)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _inner(prob: _Problem, beta, xi, lam, tau, phi, trace=None):
    ctl = prob.controls
    cur = prob.pen_objective(beta, xi, lam, tau, phi)
    if trace is not None:
        trace.append(cur)
    n = 0
    for n in range(1, ctl.max_inner + 1):
        dbeta, dxi, _ = newton_direction(prob, beta, xi, lam, tau, phi)
        t = 1.0
        while True:
            nb, nx = beta + t * dbeta, xi + t * dxi
            new = prob.pen_objective(nb, nx, lam, tau, phi)
            if new >= cur - 1e-12 * abs(cur) or t < 1e-8:
                break
            t *= 0.5
        if new < cur - 1e-10 * (1.0 + abs(cur)):
            # no ascent along the Newton direction: already at the optimum up to rounding
            break
        change = new - cur
        beta, xi, cur = nb, nx, max(new, cur)
        if trace is not None:
            trace.append(cur)
        step = max(np.max(np.abs(t * dbeta), initial=0.0), np.max(np.abs(t * dxi), initial=0.0))
        if abs(change) <= ctl.inner_tol * (1.0 + abs(cur)) or step < 1e-9:
            return beta, xi, cur, n, True
    return beta, xi, cur, n, n < ctl.max_inner


def _reml_tau(prob: _Problem, C0, b0, tau0):
    """Maximise the working-model restricted likelihood over ``log tau``."""
    d = prob.d
    P = d.penalty
    M, R = d.M, d.n_terms
    rank = d.penalty_rank
    lo, hi = prob.controls.log_tau_bounds

    def f(rho):
        tau = np.exp(rho)
        A = C0 + np.kron(np.diag(tau), P)
        try:
            cf = linalg.cho_factor(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return 1e300, np.zeros_like(rho)
        bh = linalg.cho_solve(cf, b0, check_finite=False)
        Ainv = linalg.cho_solve(cf, np.eye(A.shape[0]), check_finite=False)
        val = -b0 @ bh + 2.0 * np.sum(np.log(np.diag(cf[0]))) - rank * np.sum(rho)
        grad = np.empty(R)
        for r in range(R):
            blk = slice(r * M, (r + 1) * M)
            grad[r] = tau[r] * (bh[blk] @ P @ bh[blk] + np.sum(Ainv[blk, blk] * P)) - rank
        return val, grad

    rho0 = np.clip(np.log(tau0), lo, hi)
    res = optimize.minimize(f, rho0, jac=True, method="L-BFGS-B", bounds=[(lo, hi)] * R, options={"ftol": 1e-12, "gtol": 1e-8, "maxiter": 200})
    return np.exp(res.x)


def _initial_beta(prob: _Problem, phi):
    d = prob.d
    beta = np.zeros(d.q)
    y = d.y[prob.obs]
    ybar = float(np.mean(y))
    fam = prob.family
    if fam.kind == "bernoulli_logit":
        ybar = min(max(ybar, 1e-3), 1 - 1e-3)
    elif fam.kind == "poisson_log":
        ybar = max(ybar, 1e-3)
    # B-splines sum to one, so equal coefficients give a constant curve
    beta[: d.M] = float(fam.link(ybar))
    return beta


def fit_joint(design: JointDesign, family: Family, controls: JointControls | None = None, lambda_init=None, tau_init=None) -> GcFpcaFit:
    """Fit the joint model; see the module docstring for the algorithm."""
    ctl = controls or JointControls()
    d = design
    prob = _Problem(d, family, ctl)
    R, L = d.n_terms, d.L
    phi = float(ctl.dispersion_fixed or family.dispersion)
    if family.is_gaussian and ctl.dispersion_fixed is None:
        phi = float(np.nanvar(d.y)) or 1.0

    if ctl.lambda_fixed is not None:
        lam = np.asarray(ctl.lambda_fixed, dtype=float).copy()
    elif lambda_init is not None:
        lam = np.asarray(lambda_init, dtype=float).copy()
    elif d.eigensystem is not None:
        lam = d.eigensystem.eigenvalues[:L].copy()
    else:
        lam = np.ones(L)
    if lam.shape != (L,):
        raise ValidationError(f"need {L} random-slope variances, got {lam.shape}")
    lam = np.maximum(lam, 1e-4 * max(float(np.max(lam, initial=1.0)), 1e-8))
    if ctl.smoothing is not None:
        tau = np.asarray(ctl.smoothing, dtype=float).copy()
        if tau.shape != (R,):
            raise ValidationError(f"need {R} smoothing parameters, got {tau.shape}")
    else:
        tau = np.ones(R) if tau_init is None else np.asarray(tau_init, dtype=float).copy()

    active = np.ones(L, dtype=bool)
    beta = _initial_beta(prob, phi)
    xi = np.zeros((d.I, L))
    trace = []
    dropped = []
    laml_prev = None
    n_decrease = 0
    n_inner_total = 0
    converged = False
    estimate_var = ctl.lambda_fixed is None and L > 0
    estimate_tau = ctl.smoothing is None
    estimate_phi = family.is_gaussian and ctl.dispersion_fixed is None
    outer = 0

    def sub(lam_vec, xi_mat):
        return lam_vec[active], xi_mat[:, active]

    for outer in range(1, ctl.max_outer + 1):
        sprob = prob if np.all(active) else _Problem(_restrict(d, active), family, ctl)
        la, xa = sub(lam, xi)
        beta, xa, pen, n_in, inner_ok = _inner(sprob, beta, xa, la, tau, phi)
        xi[:, active] = xa
        n_inner_total += n_in

        # blocks at the mode
        eta = sprob.eta(beta, xa)
        W, e = sprob.working(eta, phi)
        wz = W * eta + e
        Dinv, logdetD, schur, _, rhs_z, quad_z = sprob.reduce(W, la, np.zeros_like(xa), extra_rhs=wz @ sprob.d.Phi)
        XtWX = sprob.xtwx(W)
        S = sprob.penalty_matrix(tau)
        C = XtWX + S - schur
        cfC = None
        try:
            cfC = linalg.cho_factor(C, lower=True)
            V = linalg.cho_solve(cfC, np.eye(d.q))
        except linalg.LinAlgError:
            V = np.linalg.pinv(C)
        _, var_xi = sprob.back(W, Dinv, np.zeros_like(xa), np.zeros(d.q), V=V)

        laml = pen - 0.5 * (logdetD + _logdet_pd(C, cfC)) + 0.5 * d.penalty_rank * _sum_log_pos(tau) - 0.5 * d.I * np.sum(np.log(la))
        trace.append({"outer": outer, "laml": laml, "pen": pen, "inner": n_in, "lambda": lam.tolist(), "tau": tau.tolist(), "phi": phi})
        if laml_prev is not None and laml < laml_prev - ctl.divergence_tol * (1.0 + abs(laml_prev)):
            n_decrease += 1
            if n_decrease >= 2:
                raise ConvergenceError("joint fit diverged: restricted likelihood decreased twice", trace)
        else:
            n_decrease = 0
        laml_prev = laml

        old = np.concatenate([lam, tau, [phi]])
        if estimate_var:
            la_new = (np.sum(xa**2, axis=0) + np.sum(var_xi, axis=0)) / d.I
            lam[active] = la_new
            floor = ctl.drop_ratio * float(np.max(lam[active]))
            tiny = active & (lam < floor)
            if np.any(tiny):
                for j in np.nonzero(tiny)[0]:
                    dropped.append(int(j))
                    logger.info("random slope %d dropped: variance at boundary", j)
                active &= ~tiny
                xi[:, tiny] = 0.0
                lam[tiny] = 0.0
        if estimate_tau:
            C0 = XtWX - schur
            b0 = (d.subj_design.T @ (wz @ d.B)).ravel() - rhs_z
            tau = _reml_tau(sprob, 0.5 * (C0 + C0.T), b0, tau)
        if estimate_phi:
            resid = np.where(prob.obs, d.y - eta, 0.0)
            rss = float(np.sum(resid**2))
            trSV = float(np.sum(V * S))
            tr_xi = float(np.sum(var_xi / la)) if la.size else 0.0
            edf = d.q + d.I * int(active.sum()) - phi * 0.0 - (trSV + tr_xi)
            phi = max(rss / max(prob.n_obs - edf, 1.0), 1e-12)

        new = np.concatenate([lam, tau, [phi]])
        denom = np.maximum(np.abs(old), 1e-12)
        rel = np.max(np.abs(new - old) / denom) if new.size else 0.0
        if not (estimate_var or estimate_tau or estimate_phi) or (rel < ctl.outer_tol and inner_ok):
            converged = inner_ok
            break

    # final solve and covariance at the converged components
    sprob = prob if np.all(active) else _Problem(_restrict(d, active), family, ctl)
    la, xa = sub(lam, xi)
    beta, xa, pen, n_in, inner_ok = _inner(sprob, beta, xa, la, tau, phi)
    n_inner_total += n_in
    xi[:, active] = xa
    eta = sprob.eta(beta, xa)
    W, _ = sprob.working(eta, phi)
    Dinv, logdetD, schur, _, _, _ = sprob.reduce(W, la, np.zeros_like(xa))
    C = sprob.xtwx(W) + sprob.penalty_matrix(tau) - schur
    C = 0.5 * (C + C.T)
    try:
        cfC = linalg.cho_factor(C, lower=True)
        V = linalg.cho_solve(cfC, np.eye(d.q))
    except linalg.LinAlgError:
        cfC = None
        V = np.linalg.pinv(C)
    V = 0.5 * (V + V.T)
    laml = pen - 0.5 * (logdetD + _logdet_pd(C, cfC)) + 0.5 * d.penalty_rank * _sum_log_pos(tau) - 0.5 * d.I * np.sum(np.log(la))
    if not converged:
        logger.warning("joint fit stopped after %d outer iterations without converging", outer)
    return GcFpcaFit(
        family=family if not family.is_gaussian else Family(family.kind, phi),
        fixed_basis=d.fixed_basis,
        beta_coefs=beta.reshape(R, d.M).copy(),
        coef_cov=V,
        lambda_=lam.copy(),
        scores=xi.copy(),
        eigensystem=d.eigensystem,
        smoothing=tau.copy(),
        converged=bool(converged and inner_ok),
        log_likelihood=float(laml),
        dispersion=phi,
        conditional_loglik=sprob.loglik(eta, phi),
        subjects=d.subjects,
        subj_design=d.subj_design,
        covariate_names=d.covariate_names,
        n_outer=outer,
        n_inner=n_inner_total,
        dropped=tuple(dropped),
        trace=trace,
        grid=d.grid,
    )


def _sum_log_pos(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(np.log(v[v > 0])))


def _restrict(d: JointDesign, active) -> JointDesign:
    return JointDesign(d.y, d.subj_design, d.B, d.Phi[:, active], d.fixed_basis, d.penalty, d.penalty_rank, d.grid, d.eigensystem, d.subjects, d.covariate_names)


# ---------------------------------------------------------------------------
# Inference and prediction
# ---------------------------------------------------------------------------


@dataclass
class CurveBand:
    points: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    quantile: float


def fixed_effect_curves(fit: GcFpcaFit, points, level: float = 0.95) -> list[CurveBand]:
    """Pointwise Wald bands for every coefficient function ``beta_r(s)``."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    points = np.atleast_1d(np.asarray(points, dtype=float))
    Bp = fit.fixed_basis(points)
    z = float(norm.ppf(0.5 * (1.0 + level)))
    out = []
    for r in range(fit.beta_coefs.shape[0]):
        est = Bp @ fit.beta_coefs[r]
        V = fit.coef_block(r)
        se = np.sqrt(np.clip(np.einsum("pm,mn,pn->p", Bp, V, Bp), 0.0, None))
        out.append(CurveBand(points, est, se, est - z * se, est + z * se, z))
    return out


def _psd_sqrt(V):
    w, U = np.linalg.eigh(0.5 * (V + V.T))
    if np.any(w < -1e-10 * max(abs(w).max(), 1e-300)):
        logger.warning("covariance not positive semidefinite; using the clipped square root")
    return U * np.sqrt(np.clip(w, 0.0, None))


def cma_quantile(rows, cov, level: float = 0.95, n_draws: int = 10_000, seed: int = 0, block: int = 1000) -> float:
    """Quantile of ``max_s |rows(s)' d| / se(s)`` for ``d ~ N(0, cov)``.

    Draw block ``j`` uses the counter-based generator keyed by
    ``(seed, j)``, so the result is the same however blocks are scheduled.
    """
    if n_draws < 1000:
        raise ValidationError("need at least 1000 draws for a simultaneous band")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    cov = np.asarray(cov, dtype=float)
    root = _psd_sqrt(cov)
    se = np.sqrt(np.clip(np.einsum("pm,mn,pn->p", rows, cov, rows), 0.0, None))
    proj = rows @ root
    ok = se > 0
    maxima = []
    for j in range(math.ceil(n_draws / block)):
        n = min(block, n_draws - j * block)
        rng = np.random.Generator(np.random.Philox(key=[int(seed), j]))
        z = rng.standard_normal((n, root.shape[1]))
        vals = np.abs(z @ proj[ok].T) / se[ok]
        maxima.append(vals.max(axis=1) if vals.shape[1] else np.zeros(n))
    q = float(np.quantile(np.concatenate(maxima), level))
    return max(q, float(norm.ppf(0.5 * (1.0 + level))))


def cma_bands(fit: GcFpcaFit, r: int, points, level: float = 0.95, n_draws: int = 10_000, seed: int = 0) -> CurveBand:
    """Correlation- and multiplicity-adjusted band for ``beta_r``."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    Bp = fit.fixed_basis(points)
    V = fit.coef_block(r)
    q = cma_quantile(Bp, V, level, n_draws, seed)
    est = Bp @ fit.beta_coefs[r]
    se = np.sqrt(np.clip(np.einsum("pm,mn,pn->p", Bp, V, Bp), 0.0, None))
    return CurveBand(points, est, se, est - q * se, est + q * se, q)


def predict_linear_predictor(fit: GcFpcaFit, subject_ids=None, points=None, response: bool = False) -> np.ndarray:
    """Subject-level linear predictor (or mean when ``response``) at ``points``."""
    if fit.subjects is None:
        raise ValidationError("fit carries no subject ids")
    ids = list(fit.subjects)
    if subject_ids is None:
        rows = np.arange(len(ids))
    else:
        lookup = {s: i for i, s in enumerate(ids)}
        try:
            rows = np.array([lookup[s] for s in subject_ids], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"unknown subject {exc.args[0]!r}; out-of-sample scores are not supported") from None
    points = fit.grid if points is None else np.atleast_1d(np.asarray(points, dtype=float))
    Bp = fit.fixed_basis(points)
    eta = fit.subj_design[rows] @ (Bp @ fit.beta_coefs.T).T
    if fit.L and fit.eigensystem is not None:
        Phi = evaluate_eigenfunctions(fit.eigensystem, points)[:, : fit.L]
        eta = eta + fit.scores[rows] @ Phi.T
    return fit.family.mean(eta) if response else eta
