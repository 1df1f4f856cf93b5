"""Canonical-link exponential families.

Every family is written in natural-parameter form
``log f(y; eta) = (y * eta - A(eta)) / phi + c(y, phi)``; since all links are
canonical, ``eta`` is the linear predictor and the derivatives of the
cumulant ``A`` give the mean, variance function and its slope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, gammaln

from .errors import ValidationError

FamilyKind = Literal["gaussian_identity", "bernoulli_logit", "poisson_log"]

_ALIASES = {
    "gaussian": "gaussian_identity",
    "gaussian_identity": "gaussian_identity",
    "binary": "bernoulli_logit",
    "binomial": "bernoulli_logit",
    "bernoulli": "bernoulli_logit",
    "bernoulli_logit": "bernoulli_logit",
    "poisson": "poisson_log",
    "poisson_log": "poisson_log",
}

# exp() overflows beyond ~709; linear predictors this large mean the fit has diverged anyway
_ETA_MAX = 500.0


@dataclass(frozen=True)
class Family:
    kind: FamilyKind
    dispersion: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian_identity", "bernoulli_logit", "poisson_log"):
            raise ValidationError(f"unknown family {self.kind!r}")
        if not self.dispersion > 0:
            raise ValidationError("dispersion must be positive")

    @classmethod
    def from_name(cls, name: str, dispersion: float = 1.0) -> "Family":
        try:
            return cls(_ALIASES[name.lower()], dispersion)
        except KeyError:
            raise ValidationError(f"unknown family {name!r}") from None

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian_identity"

    @property
    def has_dispersion(self) -> bool:
        return self.is_gaussian

    def cumulant(self, eta):
        """``A(eta)``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "bernoulli_logit":
            return np.logaddexp(0.0, eta)
        if self.kind == "poisson_log":
            return np.exp(np.minimum(eta, _ETA_MAX))
        return 0.5 * eta**2

    def mean(self, eta):
        """Inverse link ``A'(eta)``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "bernoulli_logit":
            return expit(eta)
        if self.kind == "poisson_log":
            return np.exp(np.minimum(eta, _ETA_MAX))
        return eta.copy()

    def variance(self, eta):
        """``A''(eta)``, the variance function evaluated at the mean."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "bernoulli_logit":
            mu = expit(eta)
            return mu * (1.0 - mu)
        if self.kind == "poisson_log":
            return np.exp(np.minimum(eta, _ETA_MAX))
        return np.ones_like(eta)

    def variance_slope(self, eta):
        """``A'''(eta)``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "bernoulli_logit":
            mu = expit(eta)
            return mu * (1.0 - mu) * (1.0 - 2.0 * mu)
        if self.kind == "poisson_log":
            return np.exp(np.minimum(eta, _ETA_MAX))
        return np.zeros_like(eta)

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "bernoulli_logit":
            return np.log(mu) - np.log1p(-mu)
        if self.kind == "poisson_log":
            return np.log(mu)
        return mu.copy()

    def log_base(self, y, dispersion=None):
        """``c(y, phi)``, the parameter-free part of the log density."""
        y = np.asarray(y, dtype=float)
        if self.kind == "bernoulli_logit":
            return np.zeros_like(y)
        if self.kind == "poisson_log":
            return -gammaln(y + 1.0)
        phi = self.dispersion if dispersion is None else dispersion
        return -0.5 * y**2 / phi - 0.5 * np.log(2 * np.pi * phi)

    def loglik(self, y, eta, dispersion=None):
        """Pointwise log density."""
        phi = self.dispersion if dispersion is None else dispersion
        y = np.asarray(y, dtype=float)
        return (y * eta - self.cumulant(eta)) / phi + self.log_base(y, phi)

    def validate_outcomes(self, y) -> None:
        y = np.asarray(y, dtype=float)
        obs = y[np.isfinite(y)]
        if self.kind == "bernoulli_logit" and not np.all((obs == 0) | (obs == 1)):
            raise ValidationError("Bernoulli outcomes must be 0 or 1")
        if self.kind == "poisson_log" and not np.all((obs >= 0) & (obs == np.round(obs))):
            raise ValidationError("Poisson outcomes must be non-negative integers")

    def sample(self, eta, rng: np.random.Generator, dispersion=None):
        phi = self.dispersion if dispersion is None else dispersion
        eta = np.asarray(eta, dtype=float)
        if self.kind == "bernoulli_logit":
            return (rng.random(eta.shape) < expit(eta)).astype(float)
        if self.kind == "poisson_log":
            return rng.poisson(np.exp(eta)).astype(float)
        return eta + np.sqrt(phi) * rng.standard_normal(eta.shape)


GAUSSIAN = Family("gaussian_identity")
BERNOULLI = Family("bernoulli_logit")
POISSON = Family("poisson_log")
