"""Depth-map accuracy metrics and their CSV reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NoOverlap, ShapeMismatch
from .io import atomic_write
from .regularize import DepthMap

NMAD_SCALE = 1.4826
DEFAULT_MULTIPLIERS = (1.0, 2.0, 3.0)


@dataclass(eq=False)
class EvalReport:
    """Accuracy summary of one depth map against ground truth.

    ``d_at`` holds ``(multiplier, percent of inliers with error <= multiplier
    * gsd)``; ``d_at_matched`` the same over all co-valid pixels.
    ``histogram`` holds ``(upper edge, cumulative percent of inliers)``.
    """

    mu: float
    sigma: float
    nmad: float
    d_at: list[tuple[float, float]]
    completeness: float
    histogram: list[tuple[float, float]]
    inlier_threshold: float
    evaluated_pixels: int
    inlier_pixels: int = 0
    d_at_matched: list[tuple[float, float]] = field(default_factory=list)

    def d(self, multiplier: float) -> float:
        for x, v in self.d_at:
            if x == multiplier:
                return v
        raise KeyError(multiplier)


def _median(v: np.ndarray) -> float:
    return float(np.median(v)) if v.size else float("nan")


def evaluate(
    depth: DepthMap,
    gt: DepthMap,
    gsd: float,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    inlier_threshold: float = 1.5,
) -> EvalReport:
    """Compare ``depth`` with ``gt`` over pixels valid in both.

    Errors below ``inlier_threshold`` are inliers. The mean absolute error,
    its standard deviation, the NMAD and the D percentages are computed over
    inliers; completeness is inliers over ground-truth-valid pixels.
    """
    if depth.depth.shape != gt.depth.shape:
        raise ShapeMismatch(f"{depth.depth.shape} vs {gt.depth.shape}")
    if not gsd > 0:
        raise InputError("gsd must be positive")
    both = depth.valid & gt.valid
    if not both.any():
        raise NoOverlap("no pixel is valid in both maps")
    err = np.abs(depth.depth[both] - gt.depth[both])
    inl = err[err < inlier_threshold]
    n_gt = int(gt.valid.sum())
    if inl.size:
        mu = float(inl.mean())
        sigma = float(np.sqrt(np.mean((inl - mu) ** 2)))
        nmad = NMAD_SCALE * _median(np.abs(inl - _median(inl)))
    else:
        mu = sigma = nmad = float("nan")
    mults = sorted(float(x) for x in multipliers)
    d_at = [(x, 100.0 * float(np.mean(inl <= x * gsd)) if inl.size else 0.0) for x in mults]
    d_all = [(x, 100.0 * float(np.mean(err <= x * gsd))) for x in mults]
    width = gsd / 2.0
    nbins = int(np.ceil(inlier_threshold / width - 1e-9))
    edges = np.minimum(np.arange(1, nbins + 1) * width, inlier_threshold)
    if inl.size:
        srt = np.sort(inl)
        cum = 100.0 * np.searchsorted(srt, edges, side="right") / inl.size
        cum[-1] = 100.0
    else:
        cum = np.zeros(nbins)
    return EvalReport(
        mu=mu,
        sigma=sigma,
        nmad=nmad,
        d_at=d_at,
        completeness=100.0 * inl.size / n_gt if n_gt else 0.0,
        histogram=[(float(e), float(c)) for e, c in zip(edges, cum)],
        inlier_threshold=inlier_threshold,
        evaluated_pixels=int(err.size),
        inlier_pixels=int(inl.size),
        d_at_matched=d_all,
    )


def write_report_csv(path, report: EvalReport) -> None:
    """Rows of ``metric,name,value``."""
    rows = [
        ("mu", "mae_m", report.mu),
        ("sigma", "std_m", report.sigma),
        ("nmad", "nmad_m", report.nmad),
        ("completeness", "percent", report.completeness),
        ("count", "evaluated_pixels", report.evaluated_pixels),
        ("count", "inlier_pixels", report.inlier_pixels),
        ("threshold", "inlier_m", report.inlier_threshold),
    ]
    rows += [("d_inliers", f"{x:g}xgsd", v) for x, v in report.d_at]
    rows += [("d_matched", f"{x:g}xgsd", v) for x, v in report.d_at_matched]
    with atomic_write(path, "w") as fh:
        fh.write("metric,name,value\n")
        for metric, name, value in rows:
            text = str(int(value)) if metric == "count" else repr(float(value))
            fh.write(f"{metric},{name},{text}\n")


def write_histogram_csv(path, report: EvalReport) -> None:
    with atomic_write(path, "w") as fh:
        fh.write("edge,cumulative_percent\n")
        for edge, cum in report.histogram:
            fh.write(f"{float(edge)!r},{float(cum)!r}\n")
