"""Training data for the decision MLP from rendered or ground-truthed views.

A reference/query pair is rectified, both images are described in the
rectified geometry, and the reference surface points give the ground-truth
disparity and an occlusion mask (points hidden from the query).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NoValidSamples
from .features import FeatureMap, Image2D, PatchExtractor
from .geometry import CameraPinhole, _pixel_grid, apply_transform, project_points, rectify_calibrated
from .simlearn import (
    LossConfig,
    MlpParams,
    SampleBatch,
    default_layer_dims,
    init_mlp,
    mine_samples,
    train_mlp,
)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class TrainingPair:
    """Rectified features with ground truth: left pixel ``(i, j)`` matches
    right pixel ``(i, j - disparity[i, j])`` unless ``occlusion[i, j]``."""

    f_left: FeatureMap
    f_right: FeatureMap
    disparity: np.ndarray
    occlusion: np.ndarray
    row_residual: float


def epipolar_training_pair(
    img_ref: Image2D,
    img_query: Image2D,
    cam_ref: CameraPinhole,
    cam_query: CameraPinhole,
    points_ref: np.ndarray,
    depth_query: np.ndarray,
    extractor: Callable[[Image2D], FeatureMap] | None = None,
    occlusion_tol: float = 0.3,
) -> TrainingPair:
    """Rectify a pair and derive disparity and occlusion from surface points.

    Args:
        points_ref: (H, W, 3) world points seen by the reference pixels.
        depth_query: (H, W) camera depth map of the query view.
        occlusion_tol: depth disagreement (m) above which a reference point
            counts as hidden from the query.
    """
    extractor = extractor or PatchExtractor(2)
    pair = rectify_calibrated(cam_ref, cam_query)
    ta, tb = pair.transform_a, pair.transform_b
    left, lok = apply_transform(img_ref.intensities, ta, valid=img_ref.valid_mask)
    right, rok = apply_transform(img_query.intensities, tb, valid=img_query.valid_mask)
    f_left = extractor(Image2D(left, lok))
    f_right = extractor(Image2D(right, rok))
    pts, pok = apply_transform(points_ref, ta, valid=np.isfinite(points_ref).all(axis=-1))
    h, w = pok.shape
    qpix, qz = project_points(cam_query, pts.reshape(-1, 3))
    qr = tb.map_points(qpix)
    grid = _pixel_grid((w, h)).reshape(-1, 2)
    disp = grid[:, 0] - qr[:, 0]
    residual = np.abs(grid[:, 1] - qr[:, 1])
    dq = np.ascontiguousarray(np.nan_to_num(depth_query)[:, :, None])
    seen, sok = kernels.bilinear_gather(dq, np.isfinite(depth_query).astype(np.uint8), qpix[:, 0].copy(), qpix[:, 1].copy())
    ok = pok.ravel() & sok & np.isfinite(disp)
    hidden = ok & (qz > seen[:, 0] + occlusion_tol)
    known = ok & ~hidden
    disp = np.where(known, disp, np.nan).reshape(h, w)
    row_res = float(residual[known].max()) if known.any() else float("nan")
    return TrainingPair(f_left, f_right, disp, hidden.reshape(h, w), row_res)


def split_batch(batch: SampleBatch, size: int, seed: int = 0) -> list[SampleBatch]:
    """Shuffle a batch and cut it into minibatches of about ``size`` samples."""
    rng = np.random.default_rng(seed)
    pn = rng.permutation(batch.n_nocc)
    po = rng.permutation(batch.n_occ)
    parts = max(1, int(np.ceil((batch.n_nocc + batch.n_occ) / size)))
    out = []
    for k in range(parts):
        a = pn[k::parts]
        b = po[k::parts]
        if len(a) + len(b) == 0:
            continue
        out.append(SampleBatch(batch.ref_nocc[a], batch.pos[a], batch.neg[a], batch.ref_occ[b], batch.neg1[b], batch.neg2[b]))
    return out


def train_on_pairs(
    pairs: Sequence[TrainingPair],
    epochs: int = 30,
    learning_rate: float = 0.5,
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    max_pixels: int = 4000,
    minibatch: int = 512,
    params: MlpParams | None = None,
):
    """Train a decision MLP with negatives re-drawn every epoch.

    Returns ``(params, loss_trace)``.
    """
    if not pairs:
        raise NoValidSamples("no training pairs")
    channels = pairs[0].f_left.channels
    p = params or init_mlp(default_layer_dims(channels), seed)
    trace = []
    for epoch in range(epochs):
        batches = []
        for i, tp in enumerate(pairs):
            s = mine_samples(tp.f_left, tp.f_right, tp.disparity, tp.occlusion, loss_cfg,
                             epoch_seed=seed * 7919 + epoch * 31 + i, max_pixels=max_pixels)
            batches.extend(split_batch(s, minibatch, seed + epoch))
        p, t = train_mlp(p, batches, learning_rate, 1, seed=seed + epoch)
        trace.append(t[-1])
        log.debug("epoch %d: loss %.4f", epoch, t[-1])
    return p, trace
