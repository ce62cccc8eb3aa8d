"""Semi-global matching, depth extraction and the coarse-to-fine driver."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import EmptyScene, InputError, TooFewHypotheses
from .features import (
    FeatureMap,
    PatchExtractor,
    downsample_features,
    downsample_image,
    geometry_aware_features,
)
from .geometry import (
    CameraPinhole,
    backproject_points,
    epipolar_prior,
    homography_prior,
    project_points,
)
from .io import atomic_write, write_pfm
from .planesweep import CostVolume, DepthHypotheses, QueryView, build_cost_volume, make_hypotheses
from .scene import SceneManifest
from .simlearn import MlpParams

log = logging.getLogger(__name__)

UNDEFINED_COST = 10.0

_DIRECTIONS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))
_DIRECTIONS_8 = _DIRECTIONS_4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class SgmConfig:
    """SGM penalties on the [0, 1] cost scale and the number of scan directions."""

    p1: float = 0.03
    p2: float = 0.3
    directions: int = 8

    def __post_init__(self):
        if not 0 <= self.p1 <= self.p2:
            raise InputError(f"need 0 <= p1 <= p2, got p1={self.p1}, p2={self.p2}")
        if self.directions not in (4, 8):
            raise InputError("directions must be 4 or 8")

    def scaled(self, factor: float) -> "SgmConfig":
        return replace(self, p1=self.p1 * factor, p2=self.p2 * factor)

    @property
    def direction_vectors(self) -> tuple[tuple[int, int], ...]:
        """Path directions as ``(dy, dx)`` steps."""
        return _DIRECTIONS_4 if self.directions == 4 else _DIRECTIONS_8


def sgm_direction(costs: np.ndarray, direction: tuple[int, int], p1: float, p2: float) -> np.ndarray:
    """Path costs ``L_r`` for one direction ``(dy, dx)`` over a dense volume."""
    c = np.ascontiguousarray(costs, dtype=np.float64)
    acc = np.zeros_like(c)
    kernels.sgm_path(c, int(direction[0]), int(direction[1]), float(p1), float(p2), acc)
    return c + acc


def sgm(volume: CostVolume, cfg: SgmConfig = SgmConfig()) -> CostVolume:
    """Aggregate costs along scanlines and average over directions.

    Undefined cells enter the recursion with cost ``UNDEFINED_COST`` and are
    NaN again in the output. With zero penalties the output equals the input.
    """
    if volume.costs.shape[2] < 2:
        raise TooFewHypotheses("SGM needs at least 2 hypotheses")
    defined = volume.view_counts > 0
    c = np.ascontiguousarray(np.where(defined, volume.costs, UNDEFINED_COST), dtype=np.float64)
    acc = np.zeros_like(c)
    dirs = cfg.direction_vectors
    for dy, dx in dirs:
        kernels.sgm_path(c, dy, dx, float(cfg.p1), float(cfg.p2), acc)
    out = c + acc / len(dirs)
    out[~defined] = np.nan
    return CostVolume(out, volume.view_counts, volume.hypotheses, volume.evaluations)


@dataclass(eq=False)
class DepthMap:
    """Per-pixel depth (or elevation) estimate in a camera's image frame."""

    depth: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray | None = None
    z_min: float | None = None
    z_max: float | None = None
    mode: str = "elevation"

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.depth)
        if self.valid.shape != self.depth.shape or self.depth.ndim != 2:
            raise InputError("depth and valid must be matching 2-D arrays")
        if self.confidence is None:
            self.confidence = self.valid.astype(np.float64)
        self.confidence = np.where(self.valid, np.asarray(self.confidence, dtype=np.float64), 0.0)
        if not np.all(np.isfinite(self.confidence)):
            raise InputError("confidence must be finite")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def filled(self, value: float = np.nan) -> np.ndarray:
        return np.where(self.valid, self.depth, value)


def extract_depth(volume: CostVolume, subpixel: bool = True, data: CostVolume | None = None) -> DepthMap:
    """Winner-take-all depth with optional parabola refinement.

    The winner is the per-pixel argmin of ``volume``. The parabola is fitted
    to the costs of ``data`` around the winner when given (typically the
    volume before SGM, whose curve is not flattened by the penalties),
    otherwise to ``volume`` itself. Confidence is the gap between the best
    cost and the best cost at least two hypotheses away, clamped to [0, 1].
    """
    costs = np.where(np.isfinite(volume.costs), volume.costs, np.inf)
    fit = costs if data is None else np.where(np.isfinite(data.costs), data.costs, np.inf)
    h, w, nd = costs.shape
    z = volume.hypotheses.values
    best = np.argmin(costs, axis=2)
    cbest = np.take_along_axis(costs, best[..., None], axis=2)[..., 0]
    valid = np.isfinite(cbest)
    depth = z[best].astype(np.float64)
    if subpixel and nd >= 3:
        inner = valid & (best > 0) & (best < nd - 1)
        bm = np.clip(best - 1, 0, nd - 1)
        bp = np.clip(best + 1, 0, nd - 1)
        a = np.take_along_axis(fit, bm[..., None], axis=2)[..., 0]
        b = np.take_along_axis(fit, best[..., None], axis=2)[..., 0]
        c = np.take_along_axis(fit, bp[..., None], axis=2)[..., 0]
        inner &= np.isfinite(a) & np.isfinite(b) & np.isfinite(c)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            denom = a - 2.0 * b + c
            offset = np.where(inner & (denom > 0), (a - c) / (2.0 * denom), 0.0)
        offset = np.clip(offset, -0.5, 0.5)
        idx = best + offset
        # uniform hypotheses: interpolate the value linearly between neighbours
        lo = np.floor(idx).astype(np.intp).clip(0, nd - 2)
        frac = idx - lo
        refined = z[lo] + frac * (z[lo + 1] - z[lo])
        depth = np.where(inner, refined, depth)
    far = np.abs(np.arange(nd)[None, None, :] - best[..., None]) >= 2
    second = np.where(far, costs, np.inf).min(axis=2)
    with np.errstate(invalid="ignore"):
        conf = np.where(valid, np.clip(second - cbest, 0.0, 1.0), 0.0)
    conf = np.nan_to_num(conf, nan=0.0)
    return DepthMap(np.where(valid, depth, np.nan), valid, conf, float(z[0]), float(z[-1]), volume.hypotheses.mode)


def smooth_costs(volume: CostVolume, radius: int) -> CostVolume:
    """Box-filter each cost slice over a ``(2r+1)^2`` window of defined cells."""
    if radius <= 0:
        return volume
    size = (2 * radius + 1, 2 * radius + 1, 1)
    defined = volume.view_counts > 0
    filled = np.where(defined, volume.costs, 0.0)
    total = ndimage.uniform_filter(filled, size=size, mode="constant")
    count = ndimage.uniform_filter(defined.astype(np.float64), size=size, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(defined & (count > 0), total / count, np.nan)
    return CostVolume(out, volume.view_counts, volume.hypotheses, volume.evaluations)


def write_depth_map(path, dm: DepthMap, gsd: float | None = None) -> None:
    """PFM raster (invalid pixels NaN) plus a ``.txt`` sidecar header."""
    path = Path(path)
    write_pfm(path, dm.filled(np.nan))
    header = {
        "mode": dm.mode,
        "z_min": dm.z_min,
        "z_max": dm.z_max,
        "gsd": gsd,
        "valid_pixels": int(dm.valid.sum()),
        "width": dm.width,
        "height": dm.height,
    }
    with atomic_write(path.with_suffix(".txt"), "w") as fh:
        for k, v in header.items():
            fh.write(f"{k} = {'' if v is None else v}\n")


# --------------------------------------------------------------------------
# coarse-to-fine driver


@dataclass(frozen=True)
class PyramidConfig:
    """Downscale factors (coarse to fine), the factor at which supplied
    features switch in, and the half-width of the refinement window."""

    levels: tuple[int, ...] = (8, 4, 2, 1)
    feature_switch_level: int = 4
    envelope_steps: int = 2

    def __post_init__(self):
        lv = tuple(int(v) for v in self.levels)
        object.__setattr__(self, "levels", lv)
        if not lv or lv[-1] != 1 or any(a <= b for a, b in zip(lv, lv[1:])):
            raise InputError(f"levels must decrease strictly to 1, got {lv}")
        if any(v & (v - 1) for v in lv):
            raise InputError("levels must be powers of two")
        if self.feature_switch_level not in lv:
            raise InputError(f"feature_switch_level {self.feature_switch_level} not in {lv}")
        if self.envelope_steps < 0:
            raise InputError("envelope_steps must be >= 0")


@dataclass(frozen=True, eq=False)
class MatchOptions:
    """Feature, similarity and sampling choices for ``pyramid_match``.

    Attributes:
        similarity: ``"cosine"`` or ``"mlp"`` (used at factors at or below the
            feature switch level).
        mlp: decision MLP parameters for ``"mlp"`` similarity.
        prior: ``"none"``, ``"epipolar"`` or ``"homography"``.
        rotation_align: quarter turns appended to the prior.
        external_features: per-view full-resolution feature maps in native
            geometry; they replace the built-in descriptors when engaged.
        patch_radius: built-in descriptor radius.
        step_px: target image displacement (pixels of the current level) per
            hypothesis step; sets the fine step when ``fine_step`` is None.
        fine_step: explicit hypothesis spacing at full resolution.
        refine_on: costs the sub-step parabola is fitted to, ``"data"``
            (before SGM) or ``"regularized"`` (after SGM).
        refine_radius: half-width of the box filter applied to the data
            costs before the fit.
        external_penalty_scale: SGM penalty multiplier when external features
            drive the volume.
    """

    similarity: str = "cosine"
    mlp: MlpParams | None = None
    prior: str = "none"
    rotation_align: int = 0
    external_features: Sequence[FeatureMap] | None = None
    patch_radius: int = 2
    step_px: float = 0.25
    fine_step: float | None = None
    subpixel: bool = True
    refine_on: str = "data"
    refine_radius: int = 2
    external_penalty_scale: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.similarity not in ("cosine", "mlp"):
            raise InputError(f"unknown similarity {self.similarity!r}")
        if self.similarity == "mlp" and self.mlp is None:
            raise InputError("mlp similarity needs MLP parameters")
        if self.prior not in ("none", "epipolar", "homography"):
            raise InputError(f"unknown prior {self.prior!r}")
        if self.refine_on not in ("data", "regularized"):
            raise InputError(f"refine_on must be 'data' or 'regularized', got {self.refine_on!r}")
        if self.step_px <= 0 or (self.fine_step is not None and self.fine_step <= 0):
            raise InputError("hypothesis steps must be positive")


@dataclass(eq=False)
class LevelResult:
    factor: int
    depth: DepthMap
    hypotheses: DepthHypotheses
    evaluations: int


@dataclass(eq=False)
class PyramidResult:
    depth: DepthMap
    levels: list[LevelResult] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return sum(lv.evaluations for lv in self.levels)

    @property
    def fine_step(self) -> float:
        return self.levels[-1].hypotheses.step


def displacement_rate(cam_ref: CameraPinhole, cam_query: CameraPinhole, z: float, mode: str = "elevation") -> float:
    """Query-image displacement in pixels per unit change of the hypothesis,
    measured at the reference image center."""
    w, h = cam_ref.image_size
    pix = np.array([[(w - 1) / 2.0, (h - 1) / 2.0]] * 2)
    vals = np.array([z, z + 1e-3])
    if mode == "elevation":
        pts, ok = backproject_points(cam_ref, pix, elevation=vals)
    else:
        pts, ok = backproject_points(cam_ref, pix, depth=vals)
    q, _ = project_points(cam_query, pts)
    if not ok.all() or not np.all(np.isfinite(q)):
        return 0.0
    return float(np.linalg.norm(q[1] - q[0]) / 1e-3)


def auto_fine_step(scene: SceneManifest, step_px: float) -> float:
    """Hypothesis spacing giving at most ``step_px`` pixels of displacement
    per step in any query at full resolution."""
    zmid = 0.5 * (scene.z_min + scene.z_max)
    ref = scene.cameras[scene.reference]
    rate = max(displacement_rate(ref, scene.cameras[j], zmid, scene.mode) for j in scene.query_ids)
    if rate <= 0:
        raise InputError("queries show no parallax against the reference")
    return step_px / rate


def _window_from(prev: DepthMap, shape: tuple[int, int], hyps: DepthHypotheses, k: int):
    """Per-pixel inclusive hypothesis bounds around the predecessor depth.

    The predecessor's 3x3 min/max is widened by ``k`` steps and upsampled to
    ``shape``; pixels with no valid predecessor get the full range.
    """
    z0, step, nd = hyps.values[0], hyps.step, len(hyps)
    dlo = ndimage.minimum_filter(np.where(prev.valid, prev.depth, np.inf), size=3, mode="nearest")
    dhi = ndimage.maximum_filter(np.where(prev.valid, prev.depth, -np.inf), size=3, mode="nearest")
    h, w = shape
    ph, pw = dlo.shape
    ry = np.minimum(np.arange(h) * ph // h, ph - 1)
    rx = np.minimum(np.arange(w) * pw // w, pw - 1)
    dlo = dlo[np.ix_(ry, rx)]
    dhi = dhi[np.ix_(ry, rx)]
    known = np.isfinite(dlo) & np.isfinite(dhi)
    with np.errstate(invalid="ignore"):
        lo = np.floor((np.where(known, dlo, z0) - z0) / step + 1e-9).astype(np.int64) - k
        hi = np.ceil((np.where(known, dhi, z0) - z0) / step - 1e-9).astype(np.int64) + k
    lo = np.where(known, np.clip(lo, 0, nd - 1), 0)
    hi = np.where(known, np.clip(hi, 0, nd - 1), nd - 1)
    return lo, hi


def _level_views(scene: SceneManifest, factor: int, opts: MatchOptions, engaged: bool):
    """Reference features, per-query views and the similarity for one level."""
    ref = scene.reference
    cams = [c.scaled(factor) if factor > 1 else c for c in scene.cameras]
    images = [downsample_image(im, factor) if factor > 1 else im for im in scene.images]
    extractor = PatchExtractor(opts.patch_radius)
    if not engaged:
        feats = [extractor(im) for im in images]
        queries = [QueryView(feats[j], cams[j]) for j in scene.query_ids]
        return feats[ref], queries, cams[ref], "cosine"
    if opts.external_features is not None:
        feats = [downsample_features(f, factor) if factor > 1 else f for f in opts.external_features]
        queries = [QueryView(feats[j], cams[j]) for j in scene.query_ids]
        return feats[ref], queries, cams[ref], opts.similarity
    zmid = 0.5 * (scene.z_min + scene.z_max)
    queries = []
    f_ref = None
    for j in scene.query_ids:
        if opts.prior == "epipolar":
            prior = epipolar_prior(cams[ref], cams[j], opts.rotation_align)
        elif opts.prior == "homography":
            prior = homography_prior(cams[ref], cams[j], zmid, opts.rotation_align)
        else:
            prior = None
        if prior is None:
            f_q = extractor(images[j])
            f_r = None
        else:
            f_q = geometry_aware_features(images[j], prior.query_transform(cams[j].image_size), extractor)
            f_r = geometry_aware_features(images[ref], prior.reference_transform(cams[ref].image_size), extractor)
        if f_ref is None:
            f_ref = f_r
        # a homography prior shares one reference geometry; epipolar ones do not
        queries.append(QueryView(f_q, cams[j], f_r if opts.prior == "epipolar" else None))
    if f_ref is None:
        f_ref = extractor(images[ref])
    return f_ref, queries, cams[ref], opts.similarity


def pyramid_match(
    scene: SceneManifest,
    pcfg: PyramidConfig = PyramidConfig(),
    scfg: SgmConfig = SgmConfig(),
    opts: MatchOptions = MatchOptions(),
) -> PyramidResult:
    """Coarse-to-fine plane-sweep matching of the reference against all queries.

    The coarsest level sweeps the full range with built-in descriptors and
    cosine similarity. Each finer level only evaluates hypotheses within
    ``envelope_steps`` steps of the predecessor's neighbourhood. At factors
    at or below ``feature_switch_level`` the configured features, prior and
    similarity take over.
    """
    if len(scene.images) < 2:
        raise EmptyScene("matching needs a reference and at least one query")
    if opts.external_features is not None and len(opts.external_features) != len(scene.images):
        raise InputError("need one external feature map per view")
    fine_step = opts.fine_step or auto_fine_step(scene, opts.step_px)
    customized = opts.similarity != "cosine" or opts.prior != "none" or opts.external_features is not None
    result = PyramidResult(depth=None)
    prev = None
    for factor in pcfg.levels:
        step = fine_step * factor
        count = max(2, int(math.ceil((scene.z_max - scene.z_min) / step - 1e-9)) + 1)
        hyps = make_hypotheses(scene.z_min, scene.z_min + step * (count - 1), count, scene.mode)
        engaged = customized and factor <= pcfg.feature_switch_level
        f_ref, queries, cam_ref, sim = _level_views(scene, factor, opts, engaged)
        window = None
        if prev is not None:
            window = _window_from(prev, (cam_ref.height, cam_ref.width), hyps, pcfg.envelope_steps)
        vol = build_cost_volume(f_ref, queries, cam_ref, hyps, sim, opts.mlp, window, opts.threads)
        cfg = scfg
        if engaged and opts.external_features is not None:
            cfg = scfg.scaled(opts.external_penalty_scale)
        data = smooth_costs(vol, opts.refine_radius) if opts.refine_on == "data" else None
        dm = extract_depth(sgm(vol, cfg), opts.subpixel, data)
        log.debug("level %d: %d hypotheses, %d evaluations, %d valid", factor, count, vol.evaluations, dm.valid.sum())
        result.levels.append(LevelResult(factor, dm, hyps, vol.evaluations))
        prev = dm
    result.depth = prev
    return result
