"""Plane-sweep cost volumes.

For every depth hypothesis the query feature maps are resampled into the
reference frame through the hypothesis plane, compared with the reference
features, averaged over the views that see the pixel, and turned into a
cost in [0, 1].
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import BadRange, DimensionMismatch, EmptyViewList, InputError, MixedRangeTags
from .features import FeatureMap, renormalize
from .geometry import CameraPinhole, MIN_DEPTH, backproject_points, project_points
from .io import atomic_write, write_pfm
from .simlearn import MlpParams, mlp_forward

log = logging.getLogger(__name__)

MODES = ("elevation", "depth")
RANGE_TAGS = ("cosine", "mlp")


@dataclass(frozen=True, eq=False)
class DepthHypotheses:
    values: np.ndarray
    mode: str = "elevation"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size < 2 or not np.all(np.isfinite(v)) or not np.all(np.diff(v) > 0):
            raise BadRange("hypotheses must be >= 2 finite, strictly increasing values")
        if self.mode not in MODES:
            raise InputError(f"unknown hypothesis mode {self.mode!r}")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @property
    def step(self) -> float:
        return float((self.values[-1] - self.values[0]) / (self.values.size - 1))


def make_hypotheses(z_min: float, z_max: float, count: int, mode: str = "elevation") -> DepthHypotheses:
    """Uniformly spaced hypotheses, endpoints included."""
    if not (np.isfinite(z_min) and np.isfinite(z_max)) or not z_min < z_max:
        raise BadRange(f"need z_min < z_max, got {z_min}, {z_max}")
    if count < 2:
        raise BadRange(f"need at least 2 hypotheses, got {count}")
    return DepthHypotheses(np.linspace(z_min, z_max, int(count)), mode)


@dataclass(eq=False)
class SamplingGrid:
    """Query-frame positions of every reference pixel at one hypothesis."""

    coords: np.ndarray
    valid: np.ndarray

    @property
    def size(self) -> tuple[int, int]:
        return (self.coords.shape[1], self.coords.shape[0])


def grid_points(cam_ref: CameraPinhole, cam_query: CameraPinhole, pixels, z, mode: str = "elevation"):
    """Query positions of reference ``pixels`` (N, 2) lifted to hypothesis ``z``."""
    if mode == "elevation":
        pts, ok = backproject_points(cam_ref, pixels, elevation=z)
    elif mode == "depth":
        pts, ok = backproject_points(cam_ref, pixels, depth=z)
    else:
        raise InputError(f"unknown hypothesis mode {mode!r}")
    coords, depth = project_points(cam_query, pts)
    ok &= depth > MIN_DEPTH
    w, h = cam_query.image_size
    with np.errstate(invalid="ignore"):
        ok &= (coords[:, 0] >= 0) & (coords[:, 0] <= w - 1) & (coords[:, 1] >= 0) & (coords[:, 1] <= h - 1)
    coords[~ok] = np.nan
    return coords, ok


def _pixel_list(size):
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def build_grid(cam_ref: CameraPinhole, cam_query: CameraPinhole, z: float, mode: str = "elevation", size=None) -> SamplingGrid:
    """Rectifying grid for hypothesis ``z``: ``project(query, backproject(ref, p, z))``."""
    size = cam_ref.image_size if size is None else size
    coords, ok = grid_points(cam_ref, cam_query, _pixel_list(size), z, mode)
    w, h = size
    return SamplingGrid(coords.reshape(h, w, 2), ok.reshape(h, w))


def _gather(f: FeatureMap, xs: np.ndarray, ys: np.ndarray):
    vals, ok = kernels.bilinear_gather(f.values, f.valid_mask.view(np.uint8), xs, ys)
    if f.unit_normalized:
        vals, ok = renormalize(vals, ok)
    return vals, ok


def sample_features(f: FeatureMap, grid: SamplingGrid) -> FeatureMap:
    """Bilinear resampling of ``f`` at the grid positions (reference-shaped)."""
    h, w = grid.valid.shape
    flat = grid.coords.reshape(-1, 2)
    xs = np.where(grid.valid.ravel(), flat[:, 0], np.nan)
    ys = np.where(grid.valid.ravel(), flat[:, 1], np.nan)
    vals, ok = _gather(f, xs, ys)
    return FeatureMap(vals.reshape(h, w, -1), ok.reshape(h, w), f.unit_normalized)


@dataclass(eq=False)
class ScoreMap:
    values: np.ndarray
    range_tag: str
    valid: np.ndarray

    def __post_init__(self):
        if self.range_tag not in RANGE_TAGS:
            raise InputError(f"unknown range tag {self.range_tag!r}")
        self.valid = np.asarray(self.valid, dtype=bool)
        self.values = np.where(self.valid, np.asarray(self.values, dtype=np.float64), 0.0)


def _cosine_rows(a: np.ndarray, b: np.ndarray, ok: np.ndarray):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = ok & (na > 1e-12) & (nb > 1e-12)
    dot = np.einsum("...c,...c->...", a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(ok, dot / (na * nb), 0.0)
    return s, ok


def _scores(similarity: str, a: np.ndarray, b: np.ndarray, ok: np.ndarray, params: MlpParams | None):
    if similarity == "cosine":
        return _cosine_rows(a, b, ok)
    if similarity == "mlp":
        if params is None:
            raise InputError("mlp similarity needs MLP parameters")
        s = np.zeros(a.shape[0])
        if ok.any():
            s[ok] = mlp_forward(params, a[ok], b[ok])
        return s, ok
    raise InputError(f"unknown similarity {similarity!r}")


def similarity_map(mode: str, f_ref: FeatureMap, f_warped: FeatureMap, params: MlpParams | None = None) -> ScoreMap:
    """Per-pixel cosine or MLP similarity between two aligned feature maps."""
    if f_ref.values.shape != f_warped.values.shape:
        raise DimensionMismatch(f"{f_ref.values.shape} vs {f_warped.values.shape}")
    h, w, c = f_ref.values.shape
    ok = (f_ref.valid_mask & f_warped.valid_mask).ravel()
    s, ok = _scores(mode, f_ref.values.reshape(-1, c), f_warped.values.reshape(-1, c), ok, params)
    return ScoreMap(s.reshape(h, w), mode, ok.reshape(h, w))


def _mean_valid(values: np.ndarray, valid: np.ndarray):
    """Mean over axis 0 of the valid entries, independent of view order.

    Entries are sorted per pixel before summation so any permutation of the
    views yields bit-identical sums.
    """
    filled = np.sort(np.where(valid, values, 0.0), axis=0)
    count = valid.sum(axis=0)
    total = filled.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return mean, count


def aggregate_scores(per_view: Sequence[ScoreMap]):
    """Average each pixel over the views valid there; returns ``(ScoreMap, counts)``."""
    per_view = list(per_view)
    if not per_view:
        raise EmptyViewList("no score maps to aggregate")
    tags = {s.range_tag for s in per_view}
    if len(tags) != 1:
        raise MixedRangeTags(f"mixed range tags {sorted(tags)}")
    shapes = {s.values.shape for s in per_view}
    if len(shapes) != 1:
        raise DimensionMismatch(f"score maps differ in shape: {sorted(shapes)}")
    vals = np.stack([s.values for s in per_view])
    valid = np.stack([s.valid for s in per_view])
    mean, count = _mean_valid(vals, valid)
    return ScoreMap(mean, tags.pop(), count > 0), count.astype(np.uint8)


def score_to_cost(s: ScoreMap) -> np.ndarray:
    """Cost slice: ``1 - s`` for MLP scores, ``(1 - s) / 2`` for cosines; NaN if invalid."""
    if s.range_tag == "mlp":
        c = 1.0 - s.values
    else:
        c = (1.0 - s.values) / 2.0
    return np.where(s.valid, np.clip(c, 0.0, 1.0), np.nan)


def _costs_from(tag: str, s: np.ndarray) -> np.ndarray:
    c = 1.0 - s if tag == "mlp" else (1.0 - s) / 2.0
    return np.clip(c, 0.0, 1.0)


@dataclass(eq=False)
class CostVolume:
    """H x W x D costs; cells with ``view_counts == 0`` are undefined (NaN)."""

    costs: np.ndarray
    view_counts: np.ndarray
    hypotheses: DepthHypotheses
    evaluations: int = 0

    @property
    def shape(self):
        return self.costs.shape


@dataclass(eq=False)
class QueryView:
    """One query image's features and camera. ``ref_features`` overrides the
    shared reference features for this pair (per-pair epipolar priors)."""

    features: FeatureMap
    camera: CameraPinhole
    ref_features: FeatureMap | None = None


def _as_query(q) -> QueryView:
    if isinstance(q, QueryView):
        return q
    return QueryView(*q)


def build_cost_volume(
    f_ref: FeatureMap,
    queries,
    cam_ref: CameraPinhole,
    hyps: DepthHypotheses,
    similarity: str = "cosine",
    params: MlpParams | None = None,
    window: tuple[np.ndarray, np.ndarray] | None = None,
    threads: int = 1,
    max_cells: int = 400_000_000,
) -> CostVolume:
    """Plane-sweep cost volume in the reference frame.

    Slice ``d`` holds ``score_to_cost(aggregate(similarity(f_ref,
    sample(f_q, grid(d)))))`` over all queries. ``window`` optionally gives
    per-pixel inclusive hypothesis index bounds ``(lo, hi)``; cells outside
    are left undefined and are not evaluated.
    """
    queries = [_as_query(q) for q in queries]
    if not queries:
        raise EmptyViewList("need at least one query view")
    h, w, c = f_ref.values.shape
    if (w, h) != cam_ref.image_size:
        raise DimensionMismatch(f"reference features {(w, h)} != camera size {cam_ref.image_size}")
    for q in queries:
        if q.features.channels != c:
            raise DimensionMismatch("query features differ in channel count")
        if q.features.size != q.camera.image_size:
            raise DimensionMismatch("query features do not match their camera size")
    nd = len(hyps)
    if h * w * nd > max_cells:
        raise InputError(f"cost volume {h}x{w}x{nd} exceeds the {max_cells} cell cap")
    costs = np.full((h, w, nd), np.nan)
    counts = np.zeros((h, w, nd), dtype=np.uint8)
    pix_all = _pixel_list((w, h))
    ref_flat = f_ref.values.reshape(-1, c)
    refs = [
        (q.ref_features.values.reshape(-1, c), q.ref_features.valid_mask.ravel()) if q.ref_features is not None
        else (ref_flat, f_ref.valid_mask.ravel())
        for q in queries
    ]
    any_ref = np.zeros(h * w, dtype=bool)
    for _, rv in refs:
        any_ref |= rv
    if window is not None:
        lo = np.asarray(window[0]).ravel()
        hi = np.asarray(window[1]).ravel()

    def do_slice(d):
        sel = any_ref if window is None else any_ref & (lo <= d) & (hi >= d)
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            return d, idx, None, None
        pix = pix_all[idx]
        scores = np.zeros((len(queries), idx.size))
        valid = np.zeros((len(queries), idx.size), dtype=bool)
        for j, q in enumerate(queries):
            coords, ok = grid_points(cam_ref, q.camera, pix, hyps.values[d], hyps.mode)
            vals, gok = _gather(q.features, coords[:, 0].copy(), coords[:, 1].copy())
            rvals, rvalid = refs[j]
            s, sok = _scores(similarity, rvals[idx], vals, ok & gok & rvalid[idx], params)
            scores[j] = s
            valid[j] = sok
        mean, count = _mean_valid(scores, valid)
        return d, idx, _costs_from(similarity, mean), count

    flat_costs = costs.reshape(-1, nd)
    flat_counts = counts.reshape(-1, nd)
    evaluations = 0
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(do_slice, range(nd)))
    else:
        results = map(do_slice, range(nd))
    for d, idx, cst, cnt in results:
        if cst is None:
            continue
        evaluations += idx.size
        defined = cnt > 0
        flat_costs[idx[defined], d] = cst[defined]
        flat_counts[idx, d] = cnt
    return CostVolume(costs, counts, hyps, evaluations)


def export_cost_volume(volume: CostVolume, directory) -> None:
    """Write each slice as ``slice_XXXX.pfm`` plus ``index.txt`` of hypotheses."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# mode {volume.hypotheses.mode}", "# slice value"]
    for d, z in enumerate(volume.hypotheses.values):
        name = f"slice_{d:04d}.pfm"
        write_pfm(directory / name, volume.costs[:, :, d])
        lines.append(f"{name} {float(z)!r}")
    with atomic_write(directory / "index.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
