"""Local windows along the functional domain.

Grid indices are 1-based in the public API (``centers = 1..K``) to match
how bins are usually described; ``BinPlan.members_zero_based`` gives the
0-based equivalents used for array slicing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BinPlan:
    n_grid: int
    half_width: int
    cyclic: bool
    width: int
    centers: np.ndarray = field(repr=False)
    members: tuple = field(repr=False)

    @property
    def n_bins(self) -> int:
        return len(self.members)

    def members_zero_based(self, k: int) -> np.ndarray:
        """Members of the bin centred at 1-based index ``k`` as 0-based indices."""
        return self.members[k - 1] - 1

    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_width, self.half_width + 1)


def _window_width(K: int, w_fraction: float | None, width: int | None) -> int:
    if (w_fraction is None) == (width is None):
        raise ValidationError("give exactly one of w_fraction or width")
    if width is None:
        if not 0.0 < w_fraction <= 1.0:
            raise ValidationError(f"w_fraction must lie in (0, 1], got {w_fraction}")
        # round half up so that e.g. 2.5% of 100 gives a width of 3
        width = int(math.floor(w_fraction * K + 0.5))
    if width < 1:
        raise ValidationError(f"window width {width} < 1; increase the bin fraction")
    return int(width)


def make_bins(K: int, w_fraction: float | None = None, cyclic: bool = False, *, width: int | None = None) -> BinPlan:
    """One bin per grid point with members ``k - ceil(w/2) .. k + ceil(w/2)``.

    ``w = round(w_fraction * K)`` unless an integer ``width`` is given.
    Cyclic plans wrap modulo ``K``; non-cyclic plans truncate at the ends.
    """
    if K < 2:
        raise ValidationError("need at least 2 grid points")
    w = _window_width(K, w_fraction, width)
    half = math.ceil(w / 2)
    if w >= K or (cyclic and 2 * half + 1 > K):
        raise ValidationError(f"window width {w} covers the whole grid of {K} points")
    centers = np.arange(1, K + 1)
    offs = np.arange(-half, half + 1)
    members = []
    for k in centers:
        idx = k + offs
        if cyclic:
            idx = (idx - 1) % K + 1
        else:
            idx = idx[(idx >= 1) & (idx <= K)]
        idx.setflags(write=False)
        members.append(idx)
    centers.setflags(write=False)
    return BinPlan(n_grid=K, half_width=half, cyclic=cyclic, width=w, centers=centers, members=tuple(members))
