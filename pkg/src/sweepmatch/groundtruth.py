"""Ground-truth depth maps from LiDAR point clouds.

Points are projected into the target camera, hidden points are removed by a
neighbourhood depth-range test, the closest samples are kept near outlines,
and the survivors are densified by Delaunay triangulation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import BadMagic, CollinearInput, InputError, NoVisiblePoints, TooFewSamples, TruncatedFile
from .geometry import CameraPinhole, MIN_DEPTH, project_points
from .io import atomic_write
from .regularize import DepthMap

PCL_MAGIC = b"PCL1"


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise InputError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InputError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


@dataclass(eq=False)
class SparseDepthMap:
    """Depth samples at real pixel positions of a ``(width, height)`` frame."""

    pixels: np.ndarray
    depths: np.ndarray
    frame: tuple[int, int]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if self.pixels.shape[0] != self.depths.shape[0]:
            raise InputError("pixel and depth counts differ")
        if np.any(self.depths <= 0):
            raise InputError("sample depths must be positive")

    def __len__(self):
        return self.depths.shape[0]

    def subset(self, keep: np.ndarray) -> "SparseDepthMap":
        return SparseDepthMap(self.pixels[keep], self.depths[keep], self.frame)


@dataclass(frozen=True)
class VisibilityConfig:
    """Neighbour count, visibility threshold, flat-range tolerance and the
    iteration cap of the visibility filter."""

    k: int = 27
    v_th: float = 0.76
    range_epsilon: float = 1e-6
    max_rounds: int = 10

    def __post_init__(self):
        if self.k < 3:
            raise InputError("k must be >= 3")
        if not 0 < self.v_th < 1:
            raise InputError("v_th must be in (0, 1)")


def project_cloud(cloud: PointCloud, cam: CameraPinhole) -> SparseDepthMap:
    """Every point in front of the camera and inside the frame becomes a sample."""
    pix, depth = project_points(cam, cloud.points)
    w, h = cam.image_size
    with np.errstate(invalid="ignore"):
        keep = (depth > MIN_DEPTH) & (pix[:, 0] >= -0.5) & (pix[:, 0] < w - 0.5)
        keep &= (pix[:, 1] >= -0.5) & (pix[:, 1] < h - 0.5)
    if not keep.any():
        raise NoVisiblePoints(f"no point projects into camera {cam.name}")
    return SparseDepthMap(pix[keep], depth[keep], cam.image_size)


def visibility_scores(sparse: SparseDepthMap, k: int, range_epsilon: float = 1e-6) -> np.ndarray:
    """``exp(-((d - d_min) / (d_max - d_min))^2)`` over each sample's planar
    neighbourhood (the sample plus its ``k`` nearest neighbours); 1 where
    the neighbourhood depth range is below ``range_epsilon``."""
    n = len(sparse)
    if n < k + 1:
        raise TooFewSamples(f"need at least {k + 1} samples, got {n}")
    _, idx = cKDTree(sparse.pixels).query(sparse.pixels, k=k + 1)
    nd = sparse.depths[idx]
    dmin = nd.min(axis=1)
    span = nd.max(axis=1) - dmin
    flat = span < range_epsilon
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.exp(-(((sparse.depths - dmin) / np.where(flat, 1.0, span)) ** 2))
    return np.where(flat, 1.0, v)


def visibility_filter(sparse: SparseDepthMap, cfg: VisibilityConfig = VisibilityConfig()) -> SparseDepthMap:
    """Drop samples scoring below ``v_th``; repeat until nothing changes
    or ``max_rounds`` rounds have run."""
    if len(sparse) < cfg.k + 1:
        raise TooFewSamples(f"need at least {cfg.k + 1} samples, got {len(sparse)}")
    cur = sparse
    for _ in range(cfg.max_rounds):
        if len(cur) < cfg.k + 1:
            break
        keep = visibility_scores(cur, cfg.k, cfg.range_epsilon) >= cfg.v_th
        if keep.all():
            break
        cur = cur.subset(keep)
    return cur


def closest_selection(sparse: SparseDepthMap, cell_px: float = 2.0, depth_tolerance: float = 0.2) -> SparseDepthMap:
    """Within each ``cell_px`` grid cell keep samples no deeper than the cell
    minimum plus ``depth_tolerance``."""
    if cell_px < 1:
        raise InputError("cell_px must be >= 1")
    if len(sparse) == 0:
        return sparse
    cells = np.floor((sparse.pixels + 0.5) / cell_px).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    cell_min = np.full(inverse.max() + 1, np.inf)
    np.minimum.at(cell_min, inverse, sparse.depths)
    keep = sparse.depths <= cell_min[inverse] + depth_tolerance
    return sparse.subset(keep)


def densify(sparse: SparseDepthMap, edge_cap: float = 30.0) -> DepthMap:
    """Delaunay-triangulate the samples in image space and interpolate
    depths barycentrically at every pixel center covered by a triangle
    whose longest edge is at most ``edge_cap`` pixels."""
    pts, first = np.unique(sparse.pixels, axis=0, return_index=True)
    depths = sparse.depths[first]
    if pts.shape[0] < 3:
        raise CollinearInput("need at least 3 distinct samples")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise CollinearInput("samples are collinear") from exc
    w, h = sparse.frame
    out = np.full((h, w), np.nan)
    verts = pts[tri.simplices]
    edges = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 1], verts[:, 0] - verts[:, 2]], axis=1)
    longest = np.linalg.norm(edges, axis=2).max(axis=1)
    for t in np.flatnonzero(longest <= edge_cap):
        _rasterize(out, verts[t], depths[tri.simplices[t]])
    return DepthMap(out, np.isfinite(out), None, mode="depth")


def _rasterize(out: np.ndarray, v: np.ndarray, d: np.ndarray) -> None:
    """Barycentric fill of one triangle (pixel centers inside or on an edge)."""
    h, w = out.shape
    x0, y0 = np.floor(v.min(axis=0)).astype(int)
    x1, y1 = np.ceil(v.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    (ax, ay), (bx, by), (cx, cy) = v
    det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    if abs(det) < 1e-12:
        return
    l0 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det
    l1 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det
    l2 = 1.0 - l0 - l1
    tol = -1e-12
    inside = (l0 >= tol) & (l1 >= tol) & (l2 >= tol)
    val = l0 * d[0] + l1 * d[1] + l2 * d[2]
    yy = ys.ravel()[inside]
    xx = xs.ravel()[inside]
    out[yy, xx] = val[inside]


def ground_truth(cloud: PointCloud, cam: CameraPinhole, vis: VisibilityConfig = VisibilityConfig(),
                 cell_px: float = 2.0, depth_tolerance: float = 0.2, edge_cap: float = 30.0) -> DepthMap:
    """Full chain: project, filter hidden points, keep closest, densify."""
    sparse = project_cloud(cloud, cam)
    sparse = visibility_filter(sparse, vis)
    sparse = closest_selection(sparse, cell_px, depth_tolerance)
    return densify(sparse, edge_cap)


# --------------------------------------------------------------------------
# point cloud files


def read_xyz(path) -> PointCloud:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) < 3:
            raise InputError(f"{path}:{lineno}: expected 'x y z'")
        rows.append([float(t) for t in tok[:3]])
    return PointCloud(np.array(rows))


def write_xyz(path, cloud: PointCloud) -> None:
    with atomic_write(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def write_pcl(path, cloud: PointCloud) -> None:
    """Binary cloud: magic ``PCL1``, u64 count, little-endian f64 triples."""
    with atomic_write(path) as fh:
        fh.write(PCL_MAGIC)
        fh.write(struct.pack("<Q", len(cloud)))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())


def read_pcl(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != PCL_MAGIC:
        raise BadMagic(f"{path}: missing PCL1 magic")
    if len(data) < 12:
        raise TruncatedFile(f"{path}: header truncated")
    (n,) = struct.unpack_from("<Q", data, 4)
    if len(data) < 12 + 24 * n:
        raise TruncatedFile(f"{path}: expected {n} points")
    return PointCloud(np.frombuffer(data, dtype="<f8", count=3 * n, offset=12).reshape(n, 3).copy())


def read_cloud(path) -> PointCloud:
    """Read either format, chosen by the file's first bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_pcl(path) if head == PCL_MAGIC else read_xyz(path)
