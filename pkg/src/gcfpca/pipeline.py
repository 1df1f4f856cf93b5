"""The four-step GC-FPCA fit: bins, local GLMMs, FPCA, joint GLMM."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .binning import BinPlan, make_bins
from .dataset import LongDataset
from .errors import FitError
from .family import Family
from .fpca import DEFAULT_PVE, EigenSystem, estimate_eigensystem
from .joint_glmm import GcFpcaFit, JointControls, assemble_joint_design, fit_joint, fixed_effect_basis
from .local_glmm import BinFailure, LocalControls, assemble_random_effect_matrix, fit_all_bins

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    family: str = "bernoulli_logit"
    bin_fraction: float = 0.05
    cyclic: bool = False
    n_basis: int = 14  # fixed-effect spline dimension M
    n_smooth_basis: int | None = None  # covariance smoother dimension; None = default rule
    pve: float | None = DEFAULT_PVE
    fixed_L: int | None = None
    threads: int = 1
    local: LocalControls = field(default_factory=LocalControls)
    joint: JointControls = field(default_factory=JointControls)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    plan: BinPlan
    local_fits: list
    bhat: np.ndarray
    mask: np.ndarray
    eigensystem: EigenSystem
    fit: GcFpcaFit
    timings: dict
    filled_bins: tuple = ()

    @property
    def n_failed_bins(self) -> int:
        return sum(isinstance(f, BinFailure) for f in self.local_fits)


def _fill_failed_columns(bhat, mask, failed):
    """Linearly interpolate whole columns lost to failed bins from their neighbours."""
    if not failed:
        return bhat, mask
    K = bhat.shape[1]
    good = np.setdiff1d(np.arange(K), failed)
    if good.size == 0:
        raise FitError("every local fit failed")
    bhat = bhat.copy()
    mask = mask.copy()
    for i in range(bhat.shape[0]):
        bhat[i, failed] = np.interp(failed, good, bhat[i, good])
    mask[:, failed] = False
    return bhat, mask


def run_local_steps(data: LongDataset, config: PipelineConfig):
    """Steps 1-3: bins, local fits, eigensystem. Returns a partial result and timings."""
    family = Family.from_name(config.family)
    family.validate_outcomes(data.outcomes)
    timings = {}
    t0 = time.perf_counter()
    plan = make_bins(data.K, config.bin_fraction, config.cyclic)
    timings["bins"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fits = fit_all_bins(data, plan, family, config.local, config.threads)
    bhat, mask = assemble_random_effect_matrix(fits, data.I, data.K)
    failed = [f.bin_center - 1 for f in fits if isinstance(f, BinFailure)]
    bhat, mask = _fill_failed_columns(bhat, mask, failed)
    timings["local"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    es = estimate_eigensystem(
        bhat,
        data.grid,
        mask=mask,
        n_smooth_basis=config.n_smooth_basis,
        pve=config.pve,
        fixed_L=config.fixed_L,
    )
    timings["fpca"] = time.perf_counter() - t0
    return plan, fits, bhat, mask, es, timings, tuple(k + 1 for k in failed)


def run_pipeline(data: LongDataset, config: PipelineConfig | None = None) -> PipelineResult:
    config = config or PipelineConfig()
    family = Family.from_name(config.family)
    plan, fits, bhat, mask, es, timings, filled = run_local_steps(data, config)

    t0 = time.perf_counter()
    fb = fixed_effect_basis(data.grid, config.n_basis, config.cyclic)
    design = assemble_joint_design(data, fb, es)
    joint = config.joint
    if joint.threads != config.threads:
        joint = JointControls(**{**asdict(joint), "threads": config.threads})
    fit = fit_joint(design, family, joint)
    timings["joint"] = time.perf_counter() - t0
    timings["total"] = sum(timings.values())
    return PipelineResult(plan, fits, bhat, mask, es, fit, timings, filled)
