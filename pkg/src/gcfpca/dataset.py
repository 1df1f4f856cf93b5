"""Long-format functional data held as a dense subject-by-grid matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .family import Family


@dataclass
class LongDataset:
    """Functional outcomes ``Z_i(s_k)`` with subject-level covariates.

    ``outcomes`` is ``[I, K]`` with ``NaN`` marking unobserved cells;
    ``covariates`` is ``[I, p]`` and never includes the intercept.
    """

    subjects: np.ndarray
    grid: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    family_hint: Family | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects)
        self.grid = np.asarray(self.grid, dtype=float)
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.size == 0:
            cov = np.zeros((self.outcomes.shape[0], 0))
        self.covariates = cov
        if not self.covariate_names:
            self.covariate_names = tuple(f"x{r + 1}" for r in range(cov.shape[1]))
        self.covariate_names = tuple(self.covariate_names)
        self.validate()

    def validate(self) -> None:
        I, K = self.outcomes.shape if self.outcomes.ndim == 2 else (-1, -1)
        if I < 0:
            raise ValidationError("outcomes must be a 2-d [I, K] array")
        if self.grid.shape != (K,):
            raise ValidationError(f"grid has shape {self.grid.shape}, expected ({K},)")
        if K > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValidationError("grid must be strictly increasing")
        if self.subjects.shape != (I,):
            raise ValidationError("one subject id per outcome row required")
        if len(set(self.subjects.tolist())) != I:
            raise ValidationError("subject ids must be distinct")
        if self.covariates.shape[0] != I:
            raise ValidationError("one covariate row per subject required")
        if not np.all(np.isfinite(self.covariates)):
            raise ValidationError("covariates must be finite")
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValidationError("covariate_names does not match the covariate columns")
        bad = ~np.isnan(self.outcomes) & ~np.isfinite(self.outcomes)
        if np.any(bad):
            raise ValidationError("outcomes must be finite or NaN (missing)")
        if self.family_hint is not None:
            self.family_hint.validate_outcomes(self.outcomes)

    @property
    def I(self) -> int:
        return self.outcomes.shape[0]

    @property
    def K(self) -> int:
        return self.outcomes.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.outcomes)

    @property
    def missing_fraction(self) -> float:
        return float(np.mean(np.isnan(self.outcomes))) if self.outcomes.size else 0.0

    def design(self) -> np.ndarray:
        """Subject-level design ``[1, X_i]`` of shape ``[I, p + 1]``."""
        return np.column_stack([np.ones(self.I), self.covariates])

    def subset(self, rows) -> "LongDataset":
        rows = np.asarray(rows)
        return LongDataset(
            self.subjects[rows],
            self.grid.copy(),
            self.outcomes[rows],
            self.covariates[rows],
            self.covariate_names,
            self.family_hint,
            dict(self.meta),
        )

    def summary(self) -> dict:
        return {"I": self.I, "K": self.K, "p": self.p, "missing_fraction": self.missing_fraction}
