"""Reading, writing and preprocessing of functional data files.

Long format has one row per (subject, grid point): ``subject_id, s, value``
followed by the subject-level covariate columns. Multi-day format has one
row per (subject, day, grid point): ``subject_id, day, s, value`` plus an
optional ``valid`` flag marking days that passed quality control.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import LongDataset
from .errors import ValidationError
from .family import Family

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 10.558
LONG_COLUMNS = ("subject_id", "s", "value")
MULTIDAY_COLUMNS = ("subject_id", "day", "s", "value")


@dataclass
class MultiDayProfile:
    subject: object
    days: np.ndarray  # [D, K] raw values, NaN = missing minute
    valid: np.ndarray  # [D] bool

    def __post_init__(self):
        self.days = np.atleast_2d(np.asarray(self.days, dtype=float))
        self.valid = np.ones(self.days.shape[0], dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (self.days.shape[0],):
            raise ValidationError(f"subject {self.subject!r}: one validity flag per day required")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def binarize_day(values, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """``1`` where the raw value reaches ``threshold``, ``0`` below it, NaN where missing."""
    values = np.asarray(values, dtype=float)
    out = (values >= threshold).astype(float)
    out[~np.isfinite(values)] = np.nan
    return out


def median_profile(binary_days) -> np.ndarray:
    """Median across days of binary profiles, with ties resolved to 1.

    A grid point is active when at least half of the days with a finite
    value there are active. Points with no finite value are NaN.
    """
    b = np.atleast_2d(np.asarray(binary_days, dtype=float))
    finite = np.isfinite(b)
    n = finite.sum(axis=0)
    active = np.where(finite, b, 0.0).sum(axis=0)
    z = (2 * active >= n).astype(float)
    z[n == 0] = np.nan
    return z


def binarize_profiles(profiles, threshold: float = DEFAULT_THRESHOLD, grid=None, covariates=None, covariate_names=()) -> LongDataset:
    """Binary median-across-days profiles for every subject with a valid day.

    ``covariates`` maps subject ids to covariate vectors; subjects without
    a valid day are skipped with a warning.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValidationError("no profiles given")
    K = profiles[0].days.shape[1]
    rows, ids, cov = [], [], []
    for p in profiles:
        if p.days.shape[1] != K:
            raise ValidationError(f"subject {p.subject!r}: day length {p.days.shape[1]} != {K}")
        if p.n_valid == 0:
            logger.warning("subject %r has no valid day; skipped", p.subject)
            continue
        binary = np.vstack([binarize_day(d, threshold) for d in p.days[p.valid]])
        rows.append(median_profile(binary))
        ids.append(p.subject)
        if covariates is not None:
            try:
                cov.append(np.atleast_1d(np.asarray(covariates[p.subject], dtype=float)))
            except KeyError:
                raise ValidationError(f"no covariates for subject {p.subject!r}") from None
    if not rows:
        raise ValidationError("no subject has a valid day")
    grid = np.arange(1, K + 1, dtype=float) if grid is None else np.asarray(grid, dtype=float)
    X = np.vstack(cov) if cov else np.zeros((len(rows), 0))
    return LongDataset(np.asarray(ids), grid, np.vstack(rows), X, tuple(covariate_names), Family("bernoulli_logit"))


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def _read_csv(path, required) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, comment="#", skipinitialspace=True, encoding="utf-8", float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: file is empty") from None
    except pd.errors.ParserError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    try:
        df["s"] = df["s"].astype(float)
        df["value"] = pd.to_numeric(df["value"], errors="raise")
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{path}: non-numeric s or value ({exc})") from None
    return df


def load_long_csv(path, covariate_columns=None, family: Family | str | None = None, allow_missing: bool = False) -> LongDataset:
    """Load a long-format CSV into a validated :class:`LongDataset`.

    Subjects keep their order of first appearance and the grid is sorted.
    Cells absent from the file (or with an empty value) are missing; they
    are accepted only with ``allow_missing``.
    """
    df = _read_csv(path, LONG_COLUMNS)
    if covariate_columns is None:
        covariate_columns = [c for c in df.columns if c not in LONG_COLUMNS]
    covariate_columns = list(covariate_columns)
    for c in covariate_columns:
        if c not in df.columns:
            raise ValidationError(f"{path}: covariate column {c!r} not found")
    if df["s"].isna().any() or df["subject_id"].isna().any():
        raise ValidationError(f"{path}: subject_id and s must be present on every row")
    dup = df.duplicated(["subject_id", "s"], keep=False)
    if dup.any():
        j = df.index[dup][0]
        raise ValidationError(f"{path}: duplicate row for (subject_id={_plain(df.at[j, 'subject_id'])!r}, s={_plain(df.at[j, 's'])!r})")
    subjects = pd.unique(df["subject_id"])
    grid = np.sort(pd.unique(df["s"]))
    wide = df.pivot(index="subject_id", columns="s", values="value").reindex(index=subjects, columns=grid)
    y = wide.to_numpy(dtype=float)
    if np.isnan(y).any() and not allow_missing:
        n = int(np.isnan(y).sum())
        raise ValidationError(f"{path}: {n} (subject, s) cells are missing; pass allow_missing to accept them as missing at random")
    if covariate_columns:
        g = df.groupby("subject_id", sort=False)[covariate_columns]
        if (g.nunique(dropna=False) > 1).any().any():
            raise ValidationError(f"{path}: covariates must be constant within subject")
        X = g.first().reindex(subjects).to_numpy(dtype=float)
    else:
        X = np.zeros((len(subjects), 0))
    fam = Family.from_name(family) if isinstance(family, str) else family
    data = LongDataset(subjects, grid, y, X, tuple(covariate_columns), fam)
    logger.info("loaded %s: I=%d K=%d p=%d missing=%.4f", path, data.I, data.K, data.p, data.missing_fraction)
    return data


def load_multiday_csv(path) -> list[MultiDayProfile]:
    """Read a multi-day CSV (``subject_id, day, s, value[, valid]``) into profiles."""
    df = _read_csv(path, MULTIDAY_COLUMNS)
    if df.duplicated(["subject_id", "day", "s"]).any():
        j = df.index[df.duplicated(["subject_id", "day", "s"], keep=False)][0]
        raise ValidationError(
            f"{path}: duplicate row for (subject_id={_plain(df.at[j, 'subject_id'])!r}, day={_plain(df.at[j, 'day'])!r}, s={_plain(df.at[j, 's'])!r})"
        )
    grid = np.sort(pd.unique(df["s"]))
    out = []
    for subject, g in df.groupby("subject_id", sort=False):
        days = pd.unique(g["day"])
        wide = g.pivot(index="day", columns="s", values="value").reindex(index=days, columns=grid)
        if "valid" in g.columns:
            flags = g.groupby("day", sort=False)["valid"].first().reindex(days).astype(bool).to_numpy()
        else:
            flags = np.ones(len(days), dtype=bool)
        out.append(MultiDayProfile(subject, wide.to_numpy(dtype=float), flags))
    return out


def multiday_grid(path) -> np.ndarray:
    df = _read_csv(path, MULTIDAY_COLUMNS)
    return np.sort(pd.unique(df["s"].astype(float)))


def fmt(v) -> str:
    """Shortest text that round-trips a float exactly (17 significant digits)."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_long_csv(data: LongDataset, path, header_lines=()) -> None:
    """Write observed cells in long format; missing cells are omitted."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(LONG_COLUMNS + tuple(data.covariate_names)) + "\n")
        obs = data.observed
        cov_txt = [[fmt(v) for v in row] for row in data.covariates]
        grid_txt = [fmt(v) for v in data.grid]
        for i, subject in enumerate(data.subjects):
            sid = str(subject)
            for k in np.nonzero(obs[i])[0]:
                fh.write(",".join([sid, grid_txt[k], fmt(data.outcomes[i, k])] + cov_txt[i]) + "\n")
