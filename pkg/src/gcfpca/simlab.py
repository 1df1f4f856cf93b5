"""Simulation laboratory: data-generating model, accuracy metrics, replications.

Scenario ``eta_i(s_k) = beta_0(s_k) + beta_1(s_k) x_i + sum_l xi_il phi_l(s_k)``
on the grid ``s_k = k / K``, ``k = 1..K``, with ``xi_il ~ N(0, lambda_l)``
and ``phi_l`` a closed-form orthonormal basis. ``beta_0`` and ``beta_1``
are cubic B-spline curves with 14 equally spaced basis functions on [0, 1].
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .basis import bspline_basis, evaluate_closed_form_basis
from .dataset import LongDataset
from .errors import GcFpcaError, ValidationError
from .family import Family
from .joint_glmm import GcFpcaFit, fixed_effect_curves, predict_linear_predictor
from .pipeline import PipelineConfig, run_pipeline

logger = logging.getLogger(__name__)

M_TRUE = 14
DEFAULT_LAMBDA = (1.0, 0.5, 0.25, 0.125)

# Drawn once as N(0, 1) with numpy's default_rng(20240917); the intercept row was
# then shifted by +0.005089 so that the mean event probability is 0.5 for the
# default binary scenario (Fourier eigenbasis, Bernoulli(1/2) covariate).
DEFAULT_TRUTH_COEFS = (
    (0.168583, -0.337345, -0.694064, 0.936275, -1.237313, 0.755606, 0.823383,
     -0.373476, -2.334758, 2.688038, -0.45462, -0.457361, 1.49891, 0.836705),
    (-2.081043, 0.589119, 0.837472, -0.007523, -2.305124, -2.012578, 0.632074,
     -0.013204, -0.98631, 1.575376, 0.656065, 0.12058, -0.308612, 1.301049),
)
TRUTH_SEED = 20240917

_COVARIATE_KINDS = ("bernoulli_half", "standard_normal")


@dataclass(frozen=True)
class SimScenario:
    I: int = 100
    K: int = 100
    family: str = "bernoulli_logit"
    eigenbasis: str = "fourier"
    covariate_kind: str = "bernoulli_half"
    true_lambda: tuple = DEFAULT_LAMBDA
    truth_coefs: tuple = DEFAULT_TRUTH_COEFS
    bin_fraction: float = 0.05
    seed: int = 0
    noise_sd: float = 1.0  # Gaussian family only
    name: str = ""

    def __post_init__(self):
        if self.I < 2 or self.K < 4:
            raise ValidationError("need I >= 2 and K >= 4")
        Family.from_name(self.family)
        if self.eigenbasis not in ("fourier", "orthogonal_polynomial"):
            raise ValidationError(f"unknown eigenbasis {self.eigenbasis!r}")
        if self.covariate_kind not in _COVARIATE_KINDS:
            raise ValidationError(f"covariate_kind must be one of {_COVARIATE_KINDS}")
        lam = np.asarray(self.true_lambda, dtype=float)
        if lam.shape != (4,) or np.any(lam < 0):
            raise ValidationError("true_lambda must be four non-negative values")
        if np.asarray(self.truth_coefs, dtype=float).shape != (2, M_TRUE):
            raise ValidationError(f"truth_coefs must be 2 x {M_TRUE}")
        if not self.noise_sd >= 0:
            raise ValidationError("noise_sd must be non-negative")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        object.__setattr__(self, "true_lambda", tuple(float(v) for v in lam))
        object.__setattr__(self, "truth_coefs", tuple(tuple(float(v) for v in row) for row in self.truth_coefs))

    @property
    def grid(self) -> np.ndarray:
        return np.arange(1, self.K + 1) / self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_lambda"] = list(self.true_lambda)
        d["truth_coefs"] = [list(r) for r in self.truth_coefs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown scenario fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("true_lambda", "truth_coefs"):
            if key in d:
                d[key] = tuple(tuple(r) if isinstance(r, list) else r for r in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


@dataclass
class SimTruth:
    eta: np.ndarray  # [I, K]
    beta: np.ndarray  # [2, K]
    phi: np.ndarray  # [K, 4]
    scores: np.ndarray  # [I, 4]


def load_scenario(path) -> SimScenario:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario file is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ValidationError("scenario file must hold a JSON object")
    return SimScenario.from_dict(d)


def save_scenario(sc: SimScenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sc.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def truth_curves(sc: SimScenario, points=None) -> np.ndarray:
    points = sc.grid if points is None else np.asarray(points, dtype=float)
    B = bspline_basis(M_TRUE, (0.0, 1.0))(points)
    return np.asarray(sc.truth_coefs) @ B.T


def generate_dataset(sc: SimScenario, rng: np.random.Generator | None = None):
    """Draw one dataset. Without ``rng`` the stream is keyed by ``sc.seed``."""
    rng = np.random.default_rng(sc.seed) if rng is None else rng
    family = Family.from_name(sc.family)
    grid = sc.grid
    beta = truth_curves(sc)
    phi = evaluate_closed_form_basis(sc.eigenbasis, 4, grid)
    if sc.covariate_kind == "bernoulli_half":
        x = rng.integers(0, 2, sc.I).astype(float)
    else:
        x = rng.standard_normal(sc.I)
    scores = rng.standard_normal((sc.I, 4)) * np.sqrt(np.asarray(sc.true_lambda))
    eta = beta[0][None, :] + x[:, None] * beta[1][None, :] + scores @ phi.T
    y = family.sample(eta, rng, dispersion=sc.noise_sd**2)
    data = LongDataset(
        subjects=np.arange(1, sc.I + 1),
        grid=grid,
        outcomes=y,
        covariates=x[:, None],
        covariate_names=("x",),
        family_hint=Family.from_name(sc.family),
        meta={"scenario": sc.to_dict()},
    )
    return data, SimTruth(eta, beta, phi, scores)


@dataclass
class MetricsReport:
    mise_eta: float
    ise_beta: np.ndarray
    ac_beta: np.ndarray
    mise_phi: float
    lambda_hat: np.ndarray
    wall_time_seconds: float = 0.0
    score_corr: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_row(self) -> dict:
        row = {"time": self.wall_time_seconds, "mise_eta": self.mise_eta, "mise_phi": self.mise_phi}
        for r, v in enumerate(self.ise_beta):
            row[f"ise_beta{r}"] = float(v)
        for r, v in enumerate(self.ac_beta):
            row[f"ac_beta{r}"] = float(v)
        for l, v in enumerate(self.lambda_hat):
            row[f"lambda{l + 1}"] = float(v)
        return row


def compute_metrics(fit: GcFpcaFit, truth: SimTruth, cis=None, wall_time: float = 0.0) -> MetricsReport:
    """Accuracy of one fit against the truth it was simulated from.

    ``cis`` is a list of pointwise bands on the grid (one per coefficient
    function); by default 95% Wald bands are computed from ``fit``.
    """
    grid = fit.grid
    K = truth.eta.shape[1]
    if grid is None or grid.size != K or truth.phi.shape[0] != K:
        raise ValidationError("fit and truth are not on the same grid")
    eta_hat = predict_linear_predictor(fit)
    if eta_hat.shape != truth.eta.shape:
        raise ValidationError("fit and truth have different subjects")
    mise_eta = float(np.mean((eta_hat - truth.eta) ** 2))
    if cis is None:
        cis = fixed_effect_curves(fit, grid, 0.95)
    R = min(len(cis), truth.beta.shape[0])
    ise = np.array([np.mean((cis[r].estimate - truth.beta[r]) ** 2) for r in range(R)])
    ac = np.array([np.mean((cis[r].lower <= truth.beta[r]) & (truth.beta[r] <= cis[r].upper)) for r in range(R)])
    mise_phi = float("nan")
    corr = np.zeros(0)
    es = fit.eigensystem
    if es is not None and es.L:
        L = min(es.L, truth.phi.shape[1])
        ref = truth.phi[:, :L]
        est = es.eigenfunctions[:, :L]
        signs = np.where(np.sum(est * ref, axis=0) < 0, -1.0, 1.0)
        est = est * signs
        mise_phi = float(np.mean(np.mean((est - ref) ** 2, axis=0)))
        sc_hat = fit.scores[:, :L] * signs
        corr = np.array([_corr(sc_hat[:, l], truth.scores[:, l]) for l in range(L)])
    return MetricsReport(mise_eta, ise, ac, mise_phi, np.asarray(fit.lambda_, dtype=float).copy(), wall_time, corr)


def _corr(a, b) -> float:
    if np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def simulation_config(sc: SimScenario, **overrides) -> PipelineConfig:
    """Pipeline settings used for simulated data: four components, non-cyclic bins."""
    base = dict(family=sc.family, bin_fraction=sc.bin_fraction, cyclic=False, n_basis=M_TRUE, fixed_L=4, pve=None)
    base.update(overrides)
    return PipelineConfig(**base)


def replicate_seed(sc: SimScenario, rep: int) -> np.random.Generator:
    return np.random.default_rng([sc.seed, rep])


def run_one(sc: SimScenario, rep: int, config: PipelineConfig | None = None):
    """Simulate and fit replicate ``rep``; returns ``(MetricsReport, None)`` or ``(None, error)``."""
    config = config or simulation_config(sc)
    data, truth = generate_dataset(sc, replicate_seed(sc, rep))
    t0 = time.perf_counter()
    try:
        res = run_pipeline(data, config)
    except GcFpcaError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - t0
    return compute_metrics(res.fit, truth, wall_time=elapsed), None


def _run_one_args(args):
    return run_one(*args)


@dataclass
class ReplicationTable:
    scenario: SimScenario
    rows: list  # per-replicate dicts (None where failed)
    errors: list
    medians: dict
    quantiles: dict

    @property
    def n_ok(self) -> int:
        return sum(r is not None for r in self.rows)

    @property
    def n_failed(self) -> int:
        return len(self.rows) - self.n_ok


def aggregate(rows) -> tuple[dict, dict]:
    ok = [r for r in rows if r is not None]
    if not ok:
        return {}, {}
    keys = list(ok[0].keys())
    med, qs = {}, {}
    for k in keys:
        v = np.array([r[k] for r in ok], dtype=float)
        med[k] = float(np.median(v))
        qs[k] = [float(q) for q in np.quantile(v, [0.1, 0.25, 0.75, 0.9])]
    return med, qs


def run_replications(sc: SimScenario, n_reps: int, parallelism: int = 1, config: PipelineConfig | None = None) -> ReplicationTable:
    """Run ``n_reps`` independent replicates and summarise them by medians.

    Replicate ``j`` draws from ``default_rng([sc.seed, j])`` and fits
    single-threaded, so results do not depend on ``parallelism``. Wall
    times are excluded from the determinism contract.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be at least 1")
    config = config or simulation_config(sc)
    args = [(sc, rep, config) for rep in range(n_reps)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_one_args, args))
    else:
        results = [run_one(*a) for a in args]
    rows, errors = [], []
    for rep, (m, err) in enumerate(results):
        rows.append(None if m is None else m.as_row())
        if err is not None:
            errors.append((rep, err))
            logger.warning("replicate %d failed: %s", rep, err)
    med, qs = aggregate(rows)
    return ReplicationTable(sc, rows, errors, med, qs)


TABLE_COLUMNS = ("scenario", "time_min", "mise_eta_x10", "ise_beta0_x100", "ac_beta0", "ise_beta1_x100", "ac_beta1", "mise_phi_x10")


def table_row(name: str, medians: dict) -> dict:
    return {
        "scenario": name,
        "time_min": medians.get("time", float("nan")) / 60.0,
        "mise_eta_x10": 10 * medians.get("mise_eta", float("nan")),
        "ise_beta0_x100": 100 * medians.get("ise_beta0", float("nan")),
        "ac_beta0": medians.get("ac_beta0", float("nan")),
        "ise_beta1_x100": 100 * medians.get("ise_beta1", float("nan")),
        "ac_beta1": medians.get("ac_beta1", float("nan")),
        "mise_phi_x10": 10 * medians.get("mise_phi", float("nan")),
    }


def write_table(path, rows, header_lines=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r["scenario"]] + [_fmt(r[c]) for c in TABLE_COLUMNS[1:]])


def _fmt(v) -> str:
    return "%.17g" % v if isinstance(v, (float, np.floating)) else str(v)


def with_size(sc: SimScenario, **kw) -> SimScenario:
    return replace(sc, **kw)
