"""Deterministic synthetic scenes: textured box-city heightfields rendered
from nadir pinhole rigs with exact ground-truth depth and elevation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, RayMissesTerrain
from .features import Image2D
from .geometry import CameraPinhole, pixel_rays
from .io import write_pfm, write_pgm
from .scene import SceneManifest, save_manifest

NADIR = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])

DEFAULT_BH_RATIOS = ((2, 0.06), (3, 0.06), (4, 0.12), (5, 0.13))

# texture coordinates are sheared by elevation so walls get texture too
_SHEAR = (0.6, -0.4)


@dataclass(frozen=True)
class SceneSpec:
    """Scene and rig parameters.

    Attributes:
        extent: side of the square terrain in meters; by default it covers
            the footprints of all views with a margin.
        buildings: number of axis-aligned boxes.
        texture_period: lattice spacing of the coarsest texture octave (m).
        bh_ratios: ``(view_count, baseline / height)`` pairs.
        baseline_axis: ``"x"`` or ``"y"``, direction of the first baselines.
        query_yaw_deg: rotation of query cameras about their optical axis.
        noise_sigma: Gaussian intensity noise added to renders.
    """

    seed: int = 0
    image_size: tuple[int, int] = (256, 256)
    gsd: float = 0.1
    flight_height: float = 100.0
    base_elevation: float = 0.0
    extent: float | None = None
    buildings: int = 6
    building_height: tuple[float, float] = (3.0, 12.0)
    building_size: tuple[float, float] = (3.0, 8.0)
    bump_amplitude: float = 0.4
    texture_octaves: int = 4
    texture_period: float = 1.6
    view_count: int = 3
    bh_ratios: tuple[tuple[int, float], ...] = DEFAULT_BH_RATIOS
    baseline_axis: str = "x"
    query_yaw_deg: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.view_count < 2:
            raise InputError("view_count must be >= 2")
        if self.baseline_axis not in ("x", "y"):
            raise InputError("baseline_axis must be 'x' or 'y'")
        if not self.gsd > 0 or not self.flight_height > 0:
            raise InputError("gsd and flight_height must be positive")
        if any(r <= 0 for _, r in self.bh_ratios):
            raise InputError("B/H ratios must be positive")
        if self.texture_octaves < 1:
            raise InputError("texture needs at least one octave")
        lo, hi = self.building_height
        if self.buildings and not 0 < lo <= hi:
            raise InputError("building heights must be positive and ordered")
        lo_s, hi_s = self.building_size
        if self.buildings and not 0 < lo_s <= hi_s:
            raise InputError("building sizes must be positive and ordered")
        if self.buildings and hi_s > min(self.image_size) * self.gsd:
            raise InputError("buildings do not fit in the image footprint")

    @property
    def focal(self) -> float:
        return self.flight_height / self.gsd

    @property
    def bh_ratio(self) -> float:
        table = dict(self.bh_ratios)
        if self.view_count in table:
            return table[self.view_count]
        return table[max(k for k in table if k <= self.view_count)] if any(
            k <= self.view_count for k in table
        ) else min(table.values())

    @property
    def baseline(self) -> float:
        return self.bh_ratio * self.flight_height


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Uniform [0, 1) value per integer lattice point (splitmix64 mix)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.int64).view(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h += np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x: np.ndarray, y: np.ndarray, spacing: float, salt: int) -> np.ndarray:
    """Quintic-interpolated lattice noise in [0, 1)."""
    gx = x / spacing
    gy = y / spacing
    ix = np.floor(gx)
    iy = np.floor(gy)
    fx = _smooth(gx - ix)
    fy = _smooth(gy - iy)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    v00 = _hash01(ix, iy, salt)
    v10 = _hash01(ix + 1, iy, salt)
    v01 = _hash01(ix, iy + 1, salt)
    v11 = _hash01(ix + 1, iy + 1, salt)
    top = v00 + fx * (v10 - v00)
    bot = v01 + fx * (v11 - v01)
    return top + fy * (bot - top)


@dataclass(eq=False)
class Terrain:
    """Analytic heightfield ``base + bumps + max(box heights)`` with texture."""

    spec: SceneSpec
    extent: float
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    bumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def height(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.full(np.broadcast(x, y).shape, self.spec.base_elevation)
        for amp, kx, ky, phase in self.bumps:
            z = z + amp * np.sin(kx * x + ky * y + phase)
        top = np.zeros_like(z)
        for x0, x1, y0, y1, hgt in self.boxes:
            inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
            top = np.where(inside, np.maximum(top, hgt), top)
        return z + top

    @property
    def z_low(self) -> float:
        return self.spec.base_elevation - float(np.abs(self.bumps[:, 0]).sum())

    @property
    def z_high(self) -> float:
        tallest = float(self.boxes[:, 4].max()) if len(self.boxes) else 0.0
        return self.spec.base_elevation + float(np.abs(self.bumps[:, 0]).sum()) + tallest

    def texture(self, x, y, z) -> np.ndarray:
        """Multi-octave value noise with stretched contrast, in [0, 1]."""
        u = np.asarray(x) + _SHEAR[0] * np.asarray(z)
        v = np.asarray(y) + _SHEAR[1] * np.asarray(z)
        total = np.zeros(np.broadcast(u, v).shape)
        weight = 0.0
        amp = 1.0
        for o in range(self.spec.texture_octaves):
            salt = (self.spec.seed * 1_000_003 + o * 7919 + 17) & 0xFFFFFFFFFFFF
            total += amp * value_noise(u, v, self.spec.texture_period / 2**o, salt)
            weight += amp
            amp *= 0.6
        t = total / weight
        return np.clip(0.5 + 2.2 * (t - 0.5), 0.0, 1.0)

    def inside(self, x, y) -> np.ndarray:
        half = self.extent / 2.0
        return (np.abs(x) <= half) & (np.abs(y) <= half)


def make_rig(spec: SceneSpec) -> list[CameraPinhole]:
    """Reference at the origin and queries at ``+B, -B`` along the baseline
    axis, then ``+B, -B`` across it, at flight height above the base."""
    w, h = spec.image_size
    pp = ((w - 1) / 2.0, (h - 1) / 2.0)
    zc = spec.base_elevation + spec.flight_height
    along = np.array([1.0, 0.0]) if spec.baseline_axis == "x" else np.array([0.0, 1.0])
    across = np.array([along[1], along[0]])
    dirs = [along, -along, across, -across]
    yaw = np.deg2rad(spec.query_yaw_deg)
    rz = np.array([[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
    cams = [CameraPinhole(spec.focal, pp, NADIR, (0.0, 0.0, zc), (w, h), "0")]
    for i in range(1, spec.view_count):
        d = dirs[(i - 1) % 4] * (1 + (i - 1) // 4)
        ctr = (d[0] * spec.baseline, d[1] * spec.baseline, zc)
        cams.append(CameraPinhole(spec.focal, pp, rz @ NADIR, ctr, (w, h), str(i)))
    return cams


def make_terrain(spec: SceneSpec, cameras: list[CameraPinhole] | None = None) -> Terrain:
    rng = np.random.default_rng(spec.seed)
    cameras = cameras or make_rig(spec)
    w, h = spec.image_size
    half_fp = 0.5 * max(w, h) * spec.gsd
    reach = max(float(np.abs(c.center[:2]).max()) for c in cameras)
    extent = spec.extent or 2.0 * (half_fp * 1.3 + reach + 2.0)
    n_bumps = 3
    bumps = np.zeros((n_bumps, 4))
    if spec.bump_amplitude > 0:
        wavelengths = rng.uniform(8.0, 20.0, n_bumps)
        angles = rng.uniform(0, np.pi, n_bumps)
        bumps[:, 0] = spec.bump_amplitude / n_bumps
        bumps[:, 1] = 2 * np.pi / wavelengths * np.cos(angles)
        bumps[:, 2] = 2 * np.pi / wavelengths * np.sin(angles)
        bumps[:, 3] = rng.uniform(0, 2 * np.pi, n_bumps)
    boxes = np.zeros((spec.buildings, 5))
    lo_s, hi_s = spec.building_size
    lo_h, hi_h = spec.building_height
    for b in range(spec.buildings):
        sx, sy = rng.uniform(lo_s, hi_s, 2)
        cx, cy = rng.uniform(-half_fp + sx / 2, half_fp - sx / 2), rng.uniform(-half_fp + sy / 2, half_fp - sy / 2)
        boxes[b] = (cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, rng.uniform(lo_h, hi_h))
    return Terrain(spec, extent, boxes, bumps)


@dataclass(eq=False)
class Render:
    image: np.ndarray
    depth: np.ndarray
    elevation: np.ndarray
    points: np.ndarray


def render(terrain: Terrain, cam: CameraPinhole, noise_sigma: float = 0.0, noise_seed: int = 0) -> Render:
    """Ray-march every pixel ray against the heightfield.

    Rays advance in steps of half a GSD between planes just above and below
    the terrain, and the first crossing is bisected to 1e-4 m.
    """
    w, h = cam.image_size
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    rays = pixel_rays(cam, pix)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    if np.any(rays[:, 2] >= -1e-9):
        raise RayMissesTerrain(f"camera {cam.name}: some rays do not point downward")
    o = cam.center
    top, bottom = terrain.z_high + 1e-3, terrain.z_low - 1e-3
    t_top = (top - o[2]) / rays[:, 2]
    t_bot = (bottom - o[2]) / rays[:, 2]
    step = terrain.spec.gsd / 2.0
    n = pix.shape[0]
    lo = t_top.copy()
    hi = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    t = t_top.copy()
    while active.any():
        t_next = np.minimum(t[active] + step, t_bot[active])
        p = o + t_next[:, None] * rays[active]
        below = p[:, 2] <= terrain.height(p[:, 0], p[:, 1])
        idx = np.flatnonzero(active)
        hit = idx[below]
        hi[hit] = t_next[below]
        miss = idx[~below]
        lo[miss] = t_next[~below]
        t[miss] = t_next[~below]
        active[hit] = False
        stuck = miss[t_next[~below] >= t_bot[miss]]
        if stuck.size:
            raise RayMissesTerrain(f"camera {cam.name}: ray passed below the terrain")
    while True:
        gap = hi - lo
        if gap.max() < 1e-4:
            break
        mid = 0.5 * (lo + hi)
        p = o + mid[:, None] * rays
        below = p[:, 2] <= terrain.height(p[:, 0], p[:, 1])
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    pts = o + hi[:, None] * rays
    if not terrain.inside(pts[:, 0], pts[:, 1]).all():
        raise RayMissesTerrain(f"camera {cam.name}: ray leaves the terrain extent")
    depth = (cam.rotation @ (pts - o).T)[2]
    img = terrain.texture(pts[:, 0], pts[:, 1], pts[:, 2])
    if noise_sigma > 0:
        img = img + np.random.default_rng(noise_seed).normal(0.0, noise_sigma, img.shape)
    img = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0, 0.0, 1.0)
    return Render(img.reshape(h, w), depth.reshape(h, w), pts[:, 2].reshape(h, w), pts.reshape(h, w, 3))


def occluded(terrain: Terrain, points: np.ndarray, center: np.ndarray, step: float | None = None) -> np.ndarray:
    """True where the segment from a surface point towards ``center`` dips
    below the heightfield (the point is hidden from that camera)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    step = step or terrain.spec.gsd / 4.0
    d = np.asarray(center) - pts
    length = np.linalg.norm(d, axis=1)
    d /= length[:, None]
    blocked = np.zeros(pts.shape[0], dtype=bool)
    # only the part of the segment below the tallest roof can be blocked
    t_end = np.minimum(length, (terrain.z_high + 1e-3 - pts[:, 2]) / np.maximum(d[:, 2], 1e-9))
    t = np.full(pts.shape[0], 2.0 * step)
    active = t < t_end
    while active.any():
        idx = np.flatnonzero(active)
        p = pts[idx] + t[idx, None] * d[idx]
        under = p[:, 2] < terrain.height(p[:, 0], p[:, 1]) - 1e-6
        blocked[idx[under]] = True
        t[idx] += step
        active[idx] = ~under & (t[idx] < t_end[idx])
    return blocked


def lidar_cloud(terrain: Terrain, density: float = 4.0, seed: int = 0, walls: bool = True) -> np.ndarray:
    """Points sampled on the surface: roofs and ground at ``density`` points
    per square meter, plus optional points on building walls."""
    rng = np.random.default_rng(seed)
    half = terrain.extent / 2.0
    n = int(density * terrain.extent**2)
    xy = rng.uniform(-half, half, (n, 2))
    pts = [np.column_stack([xy, terrain.height(xy[:, 0], xy[:, 1])])]
    if walls and len(terrain.boxes):
        for x0, x1, y0, y1, _ in terrain.boxes:
            sx, sy = x1 - x0, y1 - y0
            roof = terrain.height(0.5 * (x0 + x1), 0.5 * (y0 + y1))
            m = int(density * 2 * (sx + sy) * max(roof - terrain.z_low, 0.0))
            face = rng.integers(0, 4, m)
            s = rng.uniform(0, 1, m)
            eps = 1e-3
            x = np.select([face == 0, face == 1, face == 2], [x0 + s * sx, x0 + s * sx, x0 - eps], x1 + eps)
            y = np.select([face == 0, face == 1, face == 2], [y0 - eps, y1 + eps, y0 + s * sy], y0 + s * sy)
            foot = terrain.height(x, y)
            pts.append(np.column_stack([x, y, foot + rng.uniform(0, 1, m) * (roof - foot)]))
    return np.concatenate(pts)


@dataclass(eq=False)
class SynthResult:
    manifest: SceneManifest
    terrain: Terrain
    renders: list[Render]


def synthesize(spec: SceneSpec, out_dir=None) -> SynthResult:
    """Render every view of the rig; write files when ``out_dir`` is given."""
    cams = make_rig(spec)
    terrain = make_terrain(spec, cams)
    renders = [render(terrain, c, spec.noise_sigma, spec.seed * 101 + i) for i, c in enumerate(cams)]
    images = [Image2D(r.image, None, spec.gsd) for r in renders]
    margin = 1.0
    manifest = SceneManifest(
        images=images,
        cameras=cams,
        reference=0,
        z_min=float(np.floor(terrain.z_low - margin)),
        z_max=float(np.ceil(terrain.z_high + margin)),
        gsd=spec.gsd,
        image_paths=[f"view{i}.pgm" for i in range(len(cams))],
        gt_depth_paths=[f"gt_depth{i}.pfm" for i in range(len(cams))],
        gt_elevation_paths=[f"gt_elev{i}.pfm" for i in range(len(cams))],
    )
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(renders):
            write_pgm(root / manifest.image_paths[i], r.image)
            write_pfm(root / manifest.gt_depth_paths[i], r.depth)
            write_pfm(root / manifest.gt_elevation_paths[i], r.elevation)
        save_manifest(root / "manifest.txt", manifest)
        manifest.root = root
    return SynthResult(manifest, terrain, renders)
