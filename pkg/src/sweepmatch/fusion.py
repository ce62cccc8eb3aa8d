"""Late fusion: combine pairwise depth maps of one reference view per pixel."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyList, FrameMismatch, InputError
from .regularize import DepthMap


@dataclass(frozen=True)
class FusionConfig:
    """``method`` is ``"median"`` or ``"weighted"`` (confidence-weighted mean);
    ``agreement_window`` is in depth units (None: three fine steps, which the
    caller supplies through ``fuse(..., step=...)``)."""

    method: str = "median"
    min_views: int = 1
    agreement_window: float | None = None

    def __post_init__(self):
        if self.method not in ("median", "weighted"):
            raise InputError(f"unknown fusion method {self.method!r}")
        if self.min_views < 1:
            raise InputError("min_views must be >= 1")
        if self.agreement_window is not None and not self.agreement_window > 0:
            raise InputError("agreement_window must be positive")


def fuse(depthmaps: Sequence[DepthMap], cfg: FusionConfig = FusionConfig(), step: float | None = None) -> DepthMap:
    """Per pixel, keep candidates within the window of the most confident
    one (ties go to the smaller depth) and combine them.

    Candidates are sorted per pixel first, so the result does not depend on
    the order of ``depthmaps``.
    """
    maps = list(depthmaps)
    if not maps:
        raise EmptyList("no depth maps to fuse")
    shape = maps[0].depth.shape
    if any(m.depth.shape != shape for m in maps):
        raise FrameMismatch("depth maps differ in size")
    window = cfg.agreement_window
    if window is None:
        if step is None:
            raise InputError("agreement window needs either a config value or the fine step")
        window = 3.0 * step
    depth = np.stack([np.where(m.valid, m.depth, np.inf) for m in maps])
    conf = np.stack([np.where(m.valid, m.confidence, -np.inf) for m in maps])
    valid = np.stack([m.valid for m in maps])
    # sort candidates by depth, then stable-sort by descending confidence
    order = np.lexsort((depth, -conf), axis=0)
    depth = np.take_along_axis(depth, order, axis=0)
    conf = np.take_along_axis(conf, order, axis=0)
    valid = np.take_along_axis(valid, order, axis=0)
    lead = depth[0]
    with np.errstate(invalid="ignore"):
        agree = valid & (np.abs(depth - lead[None]) <= window)
    n = agree.sum(axis=0)
    # depth-sorted agreeing candidates for order-independent reductions
    keyed = np.sort(np.where(agree, depth, np.inf), axis=0)
    if cfg.method == "median":
        out = _masked_median(keyed, n)
    else:
        w = np.where(agree, np.maximum(conf, 0.0), 0.0)
        wsum = w.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            wmean = (w * np.where(agree, depth, 0.0)).sum(axis=0) / wsum
        plain = _masked_median(keyed, n)
        out = np.where(wsum > 0, wmean, plain)
    ok = (n >= cfg.min_views) & valid.any(axis=0)
    fused_conf = np.where(ok, np.where(np.isfinite(conf[0]), conf[0], 0.0), 0.0)
    z_min = min((m.z_min for m in maps if m.z_min is not None), default=None)
    z_max = max((m.z_max for m in maps if m.z_max is not None), default=None)
    return DepthMap(np.where(ok, out, np.nan), ok, fused_conf, z_min, z_max, maps[0].mode)


def _masked_median(sorted_vals: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Median of the first ``n`` entries of each pre-sorted column."""
    k = len(sorted_vals)
    lo = np.clip((n - 1) // 2, 0, k - 1)
    hi = np.clip(n // 2, 0, k - 1)
    a = np.take_along_axis(sorted_vals, lo[None], axis=0)[0]
    b = np.take_along_axis(sorted_vals, hi[None], axis=0)[0]
    with np.errstate(invalid="ignore"):
        return np.where(n > 0, 0.5 * (a + b), np.nan)
