"""Pinhole cameras, planar transforms, homography fitting and rectification.

Pixel coordinates follow the pixel-center convention: the center of the
top-left pixel is ``(0, 0)``, ``x`` grows along columns and ``y`` along rows.
World coordinates are in meters with ``Z`` pointing up.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .io import atomic_write
from .errors import (
    CoincidentCenters,
    DegenerateConfiguration,
    DegenerateProjection,
    FormatError,
    InputError,
    InsufficientCorrespondences,
    NoConsensus,
    RayParallelToPlane,
    SingularTransform,
    SizeMismatch,
)

MIN_DEPTH = 1e-9


@dataclass(frozen=True, eq=False)
class CameraPinhole:
    """Distortion-free pinhole camera.

    ``rotation`` maps world to camera axes and ``center`` is the optical
    center in world coordinates, so a world point ``X`` has camera
    coordinates ``rotation @ (X - center)``. ``virtual`` cameras (rectified
    views) may have their principal point outside the frame.
    """

    focal: float
    principal_point: np.ndarray
    rotation: np.ndarray
    center: np.ndarray
    image_size: tuple[int, int]
    name: str = "0"
    virtual: bool = field(default=False, repr=False)

    def __post_init__(self):
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        ctr = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = (int(self.image_size[0]), int(self.image_size[1]))
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)
        object.__setattr__(self, "image_size", size)
        object.__setattr__(self, "focal", float(self.focal))
        if not self.focal > 0:
            raise InputError(f"focal must be positive, got {self.focal}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0):
            raise InputError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise InputError("rotation determinant must be +1")
        w, h = size
        if w < 1 or h < 1:
            raise InputError(f"bad image size {size}")
        if not self.virtual and not (0 <= pp[0] < w and 0 <= pp[1] < h):
            raise InputError(f"principal point {pp} outside image {size}")


    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def K(self) -> np.ndarray:
        f = self.focal
        return np.array(
            [[f, 0.0, self.principal_point[0]], [0.0, f, self.principal_point[1]], [0.0, 0.0, 1.0]]
        )

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K [R | -R c]``."""
        rt = np.hstack([self.rotation, -(self.rotation @ self.center)[:, None]])
        return self.K @ rt

    def scaled(self, factor: float) -> "CameraPinhole":
        """Camera for an image box-downsampled by ``factor``.

        Pixel ``i`` of the downsampled image covers source pixels
        ``[i*factor, (i+1)*factor)``, so centers map as
        ``u' = (u + 0.5) / factor - 0.5``.
        """
        pp = (self.principal_point + 0.5) / factor - 0.5
        w = self.image_size[0] // int(factor)
        h = self.image_size[1] // int(factor)
        pp = np.clip(pp, 0.0, [w - 1e-6, h - 1e-6])
        return CameraPinhole(self.focal / factor, pp, self.rotation, self.center, (w, h), self.name, self.virtual)

    def with_principal_point(self, pp) -> "CameraPinhole":
        return CameraPinhole(self.focal, pp, self.rotation, self.center, self.image_size, self.name, self.virtual)


def project_points(camera: CameraPinhole, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without raising.

    Returns ``(pixels, depth)`` for (N, 3) points; pixels are NaN where the
    camera depth is at most ``MIN_DEPTH``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - camera.center) @ camera.rotation.T
    z = cam[:, 2]
    front = z > MIN_DEPTH
    pix = np.full((pts.shape[0], 2), np.nan)
    zf = z[front]
    pix[front, 0] = camera.focal * (cam[front, 0] / zf) + camera.principal_point[0]
    pix[front, 1] = camera.focal * (cam[front, 1] / zf) + camera.principal_point[1]
    return pix, z


def project(camera: CameraPinhole, point) -> tuple[np.ndarray, float | np.ndarray]:
    """Project world point(s) to pixel coordinates and camera depth.

    Raises:
        DegenerateProjection: if any point has camera depth <= 1e-9.
    """
    p = np.asarray(point, dtype=np.float64)
    pix, z = project_points(camera, p)
    if np.any(~(z > MIN_DEPTH)):
        raise DegenerateProjection("point lies behind or on the camera plane")
    if p.ndim == 1:
        return pix[0], float(z[0])
    return pix, z


def pixel_rays(camera: CameraPinhole, pixels) -> np.ndarray:
    """World-frame ray directions scaled so their camera-z component is 1."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    local = np.empty((px.shape[0], 3))
    local[:, 0] = (px[:, 0] - camera.principal_point[0]) / camera.focal
    local[:, 1] = (px[:, 1] - camera.principal_point[1]) / camera.focal
    local[:, 2] = 1.0
    return local @ camera.rotation


def backproject_points(camera: CameraPinhole, pixels, depth=None, elevation=None):
    """Vectorized backprojection; returns (N, 3) points and a validity mask.

    Exactly one of ``depth`` (camera z) or ``elevation`` (world Z plane) is
    given, either scalar or per pixel. In elevation mode points are invalid
    (NaN) where the ray is parallel to the plane or meets it behind the
    camera.
    """
    rays = pixel_rays(camera, pixels)
    n = rays.shape[0]
    if (depth is None) == (elevation is None):
        raise InputError("give exactly one of depth or elevation")
    if depth is not None:
        z = np.broadcast_to(np.asarray(depth, dtype=np.float64), (n,))
        return camera.center + rays * z[:, None], np.ones(n, dtype=bool)
    zp = np.broadcast_to(np.asarray(elevation, dtype=np.float64), (n,))
    dz = rays[:, 2]
    ok = np.abs(dz) > 1e-12
    t = np.full(n, np.nan)
    t[ok] = (zp[ok] - camera.center[2]) / dz[ok]
    ok &= t > MIN_DEPTH
    pts = camera.center + rays * t[:, None]
    pts[~ok] = np.nan
    return pts, ok


def backproject(camera: CameraPinhole, pixel, depth=None, elevation=None) -> np.ndarray:
    """Lift pixel(s) to world points at a ray depth or a world elevation.

    Raises:
        RayParallelToPlane: elevation mode with a ray parallel to the plane.
    """
    px = np.asarray(pixel, dtype=np.float64)
    if elevation is not None and depth is None:
        rays = pixel_rays(camera, px)
        if np.any(np.abs(rays[:, 2]) <= 1e-12):
            raise RayParallelToPlane("viewing ray is parallel to the elevation plane")
        zp = np.broadcast_to(np.asarray(elevation, dtype=np.float64), (rays.shape[0],))
        t = (zp - camera.center[2]) / rays[:, 2]
        pts = camera.center + rays * t[:, None]
    else:
        pts, _ = backproject_points(camera, px, depth=depth, elevation=elevation)
    return pts[0] if px.ndim == 1 else pts


def elevation_to_depth(camera: CameraPinhole, elevation: np.ndarray, valid=None) -> np.ndarray:
    """Convert a per-pixel world-elevation map to camera depth (NaN if invalid)."""
    h, w = elevation.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    pts, ok = backproject_points(camera, pix, elevation=elevation.ravel())
    depth = ((pts - camera.center) @ camera.rotation.T)[:, 2]
    depth[~ok] = np.nan
    if valid is not None:
        depth[~np.asarray(valid).ravel()] = np.nan
    return depth.reshape(h, w)


# --------------------------------------------------------------------------
# planar transforms


def _normalize_h(m: np.ndarray) -> np.ndarray:
    if abs(m[2, 2]) < 1e-300:
        raise SingularTransform("homography has zero bottom-right entry")
    return m / m[2, 2]


def _apply_h(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    hom = flat @ m[:, :2].T + m[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hom[:, :2] / hom[:, 2:3]
    return out.reshape(pts.shape)


def _pixel_grid(size: tuple[int, int]) -> np.ndarray:
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def _sample_map(grid_map: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate a dense (H, W, 2) coordinate map at points."""
    h, w, _ = grid_map.shape
    flat = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    valid = np.isfinite(grid_map).all(axis=-1).astype(np.uint8)
    vals = np.ascontiguousarray(np.nan_to_num(grid_map))
    out, ok = kernels.bilinear_gather(vals, valid, flat[:, 0].copy(), flat[:, 1].copy())
    out[~ok] = np.nan
    return out.reshape(np.shape(pts))


@dataclass(frozen=True, eq=False)
class PlanarTransform:
    """Invertible map from a source image plane to a target image plane.

    Either a homography (``matrix`` set, bottom-right entry 1) or a dense
    grid storing both directions: ``forward[y, x]`` is the target position of
    source pixel ``(x, y)`` and ``inverse[y, x]`` the source position of target
    pixel ``(x, y)``; NaN marks positions without a counterpart.
    """

    source_size: tuple[int, int]
    target_size: tuple[int, int]
    matrix: np.ndarray | None = None
    forward: np.ndarray | None = field(default=None, repr=False)
    inverse: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "source_size", (int(self.source_size[0]), int(self.source_size[1])))
        object.__setattr__(self, "target_size", (int(self.target_size[0]), int(self.target_size[1])))
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
            if abs(np.linalg.det(m)) < 1e-300:
                raise SingularTransform("homography determinant is zero")
            object.__setattr__(self, "matrix", _normalize_h(m))
        elif self.forward is None or self.inverse is None:
            raise InputError("grid transforms need both forward and inverse maps")

    @property
    def kind(self) -> str:
        return "homography" if self.matrix is not None else "grid"

    def map_points(self, pts) -> np.ndarray:
        """Source -> target coordinates."""
        if self.matrix is not None:
            return _apply_h(self.matrix, pts)
        return _sample_map(self.forward, pts)

    def unmap_points(self, pts) -> np.ndarray:
        """Target -> source coordinates."""
        if self.matrix is not None:
            return _apply_h(np.linalg.inv(self.matrix), pts)
        return _sample_map(self.inverse, pts)

    def is_identity(self) -> bool:
        return (
            self.matrix is not None
            and self.source_size == self.target_size
            and np.array_equal(self.matrix, np.eye(3))
        )


def identity_transform(size: tuple[int, int]) -> PlanarTransform:
    return PlanarTransform(size, size, np.eye(3))


def homography_transform(matrix, source_size, target_size=None) -> PlanarTransform:
    return PlanarTransform(source_size, target_size or source_size, matrix)


def quarter_turn(size: tuple[int, int], turns: int) -> PlanarTransform:
    """Rotate an image by ``turns`` x 90 degrees clockwise (exact pixel permutation)."""
    turns %= 4
    w, h = size
    m = np.eye(3)
    cur_w, cur_h = w, h
    for _ in range(turns):
        # (x, y) -> (cur_h - 1 - y, x) in an image of size (cur_h, cur_w)
        step = np.array([[0.0, -1.0, cur_h - 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        m = step @ m
        cur_w, cur_h = cur_h, cur_w
    return PlanarTransform(size, (cur_w, cur_h), m)


def invert(t: PlanarTransform) -> PlanarTransform:
    """Inverse transform (swaps source and target).

    Raises:
        SingularTransform: if the homography cannot be inverted.
    """
    if t.matrix is not None:
        det = np.linalg.det(t.matrix)
        if not np.isfinite(det) or abs(det) < 1e-14:
            raise SingularTransform(f"homography determinant {det:.3g} too small")
        return PlanarTransform(t.target_size, t.source_size, np.linalg.inv(t.matrix))
    return PlanarTransform(t.target_size, t.source_size, forward=t.inverse, inverse=t.forward)


def compose(first: PlanarTransform, second: PlanarTransform) -> PlanarTransform:
    """Transform applying ``first`` then ``second``."""
    if first.target_size != second.source_size:
        raise SizeMismatch(f"cannot compose {first.target_size} with {second.source_size}")
    if first.matrix is not None and second.matrix is not None:
        return PlanarTransform(first.source_size, second.target_size, second.matrix @ first.matrix)
    fwd = second.map_points(first.map_points(_pixel_grid(first.source_size)))
    inv = first.unmap_points(second.unmap_points(_pixel_grid(second.target_size)))
    return PlanarTransform(first.source_size, second.target_size, forward=fwd, inverse=inv)


def to_grid(t: PlanarTransform) -> PlanarTransform:
    """Rasterize a homography into a dense grid transform.

    Both directions are evaluated from the analytic maps; target positions
    falling outside the other image are kept (they are still bijective) but
    points at infinity become NaN.
    """
    if t.matrix is None:
        return t
    fwd = t.map_points(_pixel_grid(t.source_size))
    inv = _apply_h(np.linalg.inv(t.matrix), _pixel_grid(t.target_size))
    fwd[~np.isfinite(fwd).all(axis=-1)] = np.nan
    inv[~np.isfinite(inv).all(axis=-1)] = np.nan
    return PlanarTransform(t.source_size, t.target_size, forward=fwd, inverse=inv)


def apply_transform(data, t: PlanarTransform, out_size=None, valid=None):
    """Warp an image (H, W) or feature map (H, W, C) into the target plane.

    ``output(p)`` is the bilinear sample of ``data`` at ``t^-1(p)``. Returns
    ``(warped, valid_mask)``; pixels mapping outside the source (or onto
    invalid source pixels with nonzero weight) are invalid and zero.
    """
    arr = np.asarray(data, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, _ = arr.shape
    if (w, h) != t.source_size:
        raise SizeMismatch(f"data size {(w, h)} != transform source {t.source_size}")
    out_size = t.target_size if out_size is None else (int(out_size[0]), int(out_size[1]))
    if out_size != t.target_size:
        raise SizeMismatch(f"output size {out_size} != transform target {t.target_size}")
    src_valid = np.ones((h, w), dtype=np.uint8) if valid is None else np.asarray(valid, dtype=np.uint8)
    vals = np.where(src_valid[:, :, None] != 0, arr, 0.0)
    vals = np.ascontiguousarray(np.nan_to_num(vals))
    ow, oh = out_size
    src = t.unmap_points(_pixel_grid(out_size)).reshape(-1, 2)
    out, ok = kernels.bilinear_gather(vals, np.ascontiguousarray(src_valid), src[:, 0].copy(), src[:, 1].copy())
    out = out.reshape(oh, ow, -1)
    ok = ok.reshape(oh, ow)
    if squeeze:
        out = out[:, :, 0]
    return out, ok


# --------------------------------------------------------------------------
# homography estimation


@dataclass(frozen=True)
class Correspondence:
    point_a: tuple[float, float]
    point_b: tuple[float, float]
    weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise InputError(f"bad correspondence weight {self.weight}")


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 1.0
    max_iterations: int = 2000
    min_inliers: int = 4
    confidence: float = 0.999
    seed: int = 0


@dataclass(frozen=True, eq=False)
class HomographyFit:
    transform: PlanarTransform
    inliers: np.ndarray

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_homography(a: np.ndarray, b: np.ndarray, weights=None) -> np.ndarray:
    """Normalized direct linear transform mapping ``a`` to ``b``."""
    n = a.shape[0]
    ta, tb = _hartley(a), _hartley(b)
    an = _apply_h(ta, a)
    bn = _apply_h(tb, b)
    rows = np.zeros((2 * n, 9))
    x, y = an[:, 0], an[:, 1]
    u, v = bn[:, 0], bn[:, 1]
    rows[0::2, 0:3] = np.stack([x, y, np.ones(n)], axis=1)
    rows[0::2, 6:9] = -u[:, None] * np.stack([x, y, np.ones(n)], axis=1)
    rows[1::2, 3:6] = np.stack([x, y, np.ones(n)], axis=1)
    rows[1::2, 6:9] = -v[:, None] * np.stack([x, y, np.ones(n)], axis=1)
    if weights is not None:
        sw = np.sqrt(np.repeat(np.asarray(weights, dtype=np.float64), 2))
        rows *= sw[:, None]
    _, _, vt = np.linalg.svd(rows)
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(tb) @ hn @ ta
    return _normalize_h(m)


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(np.ptp(pts, axis=0).max(), 1.0)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for k in range(j + 1, len(pts)):
                d1 = pts[j] - pts[i]
                d2 = pts[k] - pts[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * scale * scale:
                    return True
    return False


def _as_arrays(corrs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(corrs, tuple) and len(corrs) in (2, 3):
        a = np.asarray(corrs[0], dtype=np.float64).reshape(-1, 2)
        b = np.asarray(corrs[1], dtype=np.float64).reshape(-1, 2)
        w = np.ones(len(a)) if len(corrs) == 2 else np.asarray(corrs[2], dtype=np.float64)
        return a, b, w
    corrs = list(corrs)
    a = np.array([c.point_a for c in corrs], dtype=np.float64).reshape(-1, 2)
    b = np.array([c.point_b for c in corrs], dtype=np.float64).reshape(-1, 2)
    w = np.array([c.weight for c in corrs], dtype=np.float64)
    return a, b, w


def transfer_errors(m: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    err = np.linalg.norm(_apply_h(m, a) - b, axis=1)
    err[~np.isfinite(err)] = np.inf
    return err


def estimate_homography(
    corrs,
    cfg: RansacConfig = RansacConfig(),
    source_size=(1, 1),
    target_size=None,
) -> HomographyFit:
    """Fit the homography mapping ``point_a`` to ``point_b`` robustly.

    ``corrs`` is a sequence of :class:`Correspondence` or a tuple
    ``(points_a, points_b[, weights])``. Random-sample consensus over minimal
    4-point samples, then a weighted least-squares refit on the inliers.

    Raises:
        InsufficientCorrespondences: fewer than 4 correspondences.
        DegenerateConfiguration: every sample drawn was collinear.
        NoConsensus: the best model has fewer than ``cfg.min_inliers`` inliers.
    """
    a, b, w = _as_arrays(corrs)
    n = len(a)
    if n < 4:
        raise InsufficientCorrespondences(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_inl = None
    best_key = (-1, np.inf)
    needed = cfg.max_iterations
    tried = degenerate = 0
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = np.arange(4) if n == 4 else rng.choice(n, 4, replace=False)
        tried += 1
        if _collinear(a[idx]) or _collinear(b[idx]):
            degenerate += 1
            if n == 4:
                break
            continue
        try:
            m = dlt_homography(a[idx], b[idx])
        except (SingularTransform, np.linalg.LinAlgError):
            degenerate += 1
            continue
        err = transfer_errors(m, a, b)
        inl = err < cfg.threshold
        key = (int(inl.sum()), float(err[inl].sum()))
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key = key
            best_inl = inl
            frac = key[0] / n
            if frac >= 1.0:
                needed = 0
            else:
                denom = np.log(max(1.0 - frac**4, 1e-300))
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom)) if denom < 0 else cfg.max_iterations
        if n == 4:
            break
    if best_inl is None:
        if degenerate == tried:
            raise DegenerateConfiguration("all sampled correspondences were collinear")
        raise NoConsensus("no valid model found")
    if best_key[0] < cfg.min_inliers:
        raise NoConsensus(f"best model has {best_key[0]} inliers < {cfg.min_inliers}")
    inl = best_inl
    m = None
    for _ in range(3):
        cand = dlt_homography(a[inl], b[inl], w[inl])
        new_inl = transfer_errors(cand, a, b) < cfg.threshold
        if new_inl.sum() < cfg.min_inliers:
            break
        m = cand
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    if m is None:
        m = dlt_homography(a[best_inl], b[best_inl], w[best_inl])
        inl = best_inl
    t = PlanarTransform(source_size, target_size or source_size, m)
    return HomographyFit(t, inl)


def plane_homography(cam_a: CameraPinhole, cam_b: CameraPinhole, elevation: float) -> np.ndarray:
    """Homography induced by the world plane ``Z = elevation`` from a to b."""
    # world point on the plane: X = (x, y, elevation); image a: K_a R_a (X - c_a)
    def plane_to_image(cam):
        m = np.empty((3, 3))
        kr = cam.K @ cam.rotation
        m[:, 0] = kr[:, 0]
        m[:, 1] = kr[:, 1]
        m[:, 2] = kr[:, 2] * elevation - kr @ cam.center
        return m

    return _normalize_h(plane_to_image(cam_b) @ np.linalg.inv(plane_to_image(cam_a)))


# --------------------------------------------------------------------------
# calibrated rectification


@dataclass(frozen=True, eq=False)
class RectifiedPair:
    transform_a: PlanarTransform
    transform_b: PlanarTransform
    camera_a: CameraPinhole
    camera_b: CameraPinhole


def rectify_calibrated(cam_a: CameraPinhole, cam_b: CameraPinhole) -> RectifiedPair:
    """Epipolar rectification of a calibrated pinhole pair.

    Both cameras are rotated to share the baseline (a -> b) as x-axis and are
    given the mean focal length and a common principal-point row. The
    principal-point columns are chosen per camera so the rectified image
    centers stay at the image centers.

    Raises:
        CoincidentCenters: if the baseline is shorter than 1e-9 m.
    """
    base = cam_b.center - cam_a.center
    length = np.linalg.norm(base)
    if length < 1e-9:
        raise CoincidentCenters("camera centers coincide")
    v1 = base / length
    v2 = np.cross(cam_a.rotation[2], v1)
    n2 = np.linalg.norm(v2)
    if n2 < 1e-12:
        raise DegenerateConfiguration("baseline is parallel to the optical axis")
    v2 /= n2
    v3 = np.cross(v1, v2)
    r_new = np.stack([v1, v2, v3])
    focal = 0.5 * (cam_a.focal + cam_b.focal)

    def center_offset(cam):
        c = np.array([(cam.width - 1) / 2.0, (cam.height - 1) / 2.0, 1.0])
        ray = r_new @ cam.rotation.T @ np.linalg.inv(cam.K) @ c
        return np.array([(cam.width - 1) / 2.0 - focal * ray[0] / ray[2],
                         (cam.height - 1) / 2.0 - focal * ray[1] / ray[2]])

    pa = center_offset(cam_a)
    pb = center_offset(cam_b)
    row = 0.5 * (pa[1] + pb[1])
    pa[1] = row
    pb[1] = row
    # a pure x-baseline pair with shared rotation keeps its intrinsics
    if np.allclose(r_new, cam_a.rotation, atol=1e-12) and np.allclose(r_new, cam_b.rotation, atol=1e-12) \
            and cam_a.focal == cam_b.focal and np.allclose(cam_a.principal_point, cam_b.principal_point):
        pa = cam_a.principal_point.copy()
        pb = cam_b.principal_point.copy()

    rect_a = CameraPinhole(focal, pa, r_new, cam_a.center, cam_a.image_size, cam_a.name, virtual=True)
    rect_b = CameraPinhole(focal, pb, r_new, cam_b.center, cam_b.image_size, cam_b.name, virtual=True)
    ta = rect_a.K @ r_new @ cam_a.rotation.T @ np.linalg.inv(cam_a.K)
    tb = rect_b.K @ r_new @ cam_b.rotation.T @ np.linalg.inv(cam_b.K)
    return RectifiedPair(
        PlanarTransform(cam_a.image_size, cam_a.image_size, ta),
        PlanarTransform(cam_b.image_size, cam_b.image_size, tb),
        rect_a,
        rect_b,
    )


# --------------------------------------------------------------------------
# geometry priors


@dataclass(frozen=True, eq=False)
class GeometryPrior:
    """Per-pair warps placing reference and query in an aligned geometry.

    ``mode`` is ``"epipolar"`` (transforms for both images), ``"homography"``
    (query transform only; the reference is left in place) or ``"none"``.
    ``rotation_align`` quarter turns are appended to both sides.
    """

    mode: str
    reference: PlanarTransform | None = None
    query: PlanarTransform | None = None
    rotation_align: int = 0

    def __post_init__(self):
        if self.mode not in ("epipolar", "homography", "none"):
            raise InputError(f"unknown prior mode {self.mode!r}")
        if self.mode == "epipolar" and (self.reference is None or self.query is None):
            raise InputError("epipolar prior needs two transforms")
        if self.mode == "homography" and (self.query is None or self.reference is not None):
            raise InputError("homography prior carries exactly one transform")
        if self.rotation_align not in (0, 1, 2, 3):
            raise InputError("rotation_align must be in {0,1,2,3}")

    def _with_turns(self, t: PlanarTransform) -> PlanarTransform:
        if self.rotation_align == 0:
            return t
        return compose(t, quarter_turn(t.target_size, self.rotation_align))

    def reference_transform(self, size: tuple[int, int]) -> PlanarTransform:
        base = self.reference if self.reference is not None else identity_transform(size)
        return self._with_turns(base)

    def query_transform(self, size: tuple[int, int]) -> PlanarTransform:
        base = self.query if self.query is not None else identity_transform(size)
        return self._with_turns(base)


def epipolar_prior(cam_ref: CameraPinhole, cam_query: CameraPinhole, rotation_align: int = 0) -> GeometryPrior:
    pair = rectify_calibrated(cam_ref, cam_query)
    return GeometryPrior("epipolar", pair.transform_a, pair.transform_b, rotation_align)


def homography_prior(
    cam_ref: CameraPinhole,
    cam_query: CameraPinhole,
    elevation: float,
    rotation_align: int = 0,
    samples: int = 12,
    cfg: RansacConfig = RansacConfig(),
) -> GeometryPrior:
    """Homography prior fitted on sparse correspondences.

    Correspondences come from a ``samples x samples`` lattice of reference
    pixels lifted to the ``Z = elevation`` plane and projected into the query.
    """
    w, h = cam_ref.image_size
    us = np.linspace(0, w - 1, samples)
    vs = np.linspace(0, h - 1, samples)
    grid = np.stack(np.meshgrid(us, vs), axis=-1).reshape(-1, 2)
    pts, ok = backproject_points(cam_ref, grid, elevation=elevation)
    qpix, z = project_points(cam_query, pts[ok])
    keep = z > MIN_DEPTH
    fit = estimate_homography((qpix[keep], grid[ok][keep]), cfg, cam_query.image_size, cam_ref.image_size)
    return GeometryPrior("homography", None, fit.transform, rotation_align)


# --------------------------------------------------------------------------
# camera files


def read_cameras(path) -> list[CameraPinhole]:
    """Read camera records: ``id focal ppx ppy r11..r33 cx cy cz width height``."""
    cams = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 18:
            raise FormatError(f"{path}:{lineno}: expected 18 fields, got {len(tok)}")
        try:
            vals = [float(t) for t in tok[1:16]]
            size = (int(tok[16]), int(tok[17]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        cams.append(
            CameraPinhole(vals[0], vals[1:3], np.array(vals[3:12]).reshape(3, 3), vals[12:15], size, tok[0])
        )
    return cams


def write_cameras(path, cameras: Iterable[CameraPinhole]) -> None:
    lines = ["# id focal ppx ppy r11 r12 r13 r21 r22 r23 r31 r32 r33 cx cy cz width height"]
    for cam in cameras:
        nums = [cam.focal, *cam.principal_point, *cam.rotation.ravel(), *cam.center]
        lines.append(" ".join([cam.name] + [repr(float(v)) for v in nums] + [str(cam.width), str(cam.height)]))
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def look_at_rotation(forward: Sequence[float], up_hint: Sequence[float] = (0.0, 1.0, 0.0)) -> np.ndarray:
    """World->camera rotation whose optical axis points along ``forward``."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    down = -np.asarray(up_hint, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], z) if abs(z[0]) < 0.9 else np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])
