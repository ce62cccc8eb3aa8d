"""Per-pixel descriptors: radiometric normalization, patch descriptors,
geometry-aware extraction and the FMAP feature-map file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    DimensionOverflow,
    EmptyInput,
    InputError,
    PatchLargerThanImage,
    TruncatedFile,
    ZeroVariance,
)
from .geometry import PlanarTransform, apply_transform, invert
from .io import atomic_write

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_MAX_ELEMENTS = 2**31
_ZERO_NORM = 1e-8


@dataclass(eq=False)
class Image2D:
    """Grayscale image with intensities in [0, 1]."""

    intensities: np.ndarray
    valid_mask: np.ndarray | None = None
    gsd: float | None = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 2:
            raise InputError("Image2D expects a 2-D array")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.intensities.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if not np.all(np.isfinite(self.intensities[self.valid_mask])):
            raise InputError("image intensities must be finite")

    @classmethod
    def from_uint8(cls, raw, gsd=None) -> "Image2D":
        return cls(np.asarray(raw, dtype=np.float64) / 255.0, None, gsd)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass(eq=False)
class FeatureMap:
    """H x W x C descriptors; invalid pixels hold zero vectors."""

    values: np.ndarray
    valid_mask: np.ndarray
    unit_normalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        if vals.ndim != 3 or vals.shape[2] < 1:
            raise InputError("feature values must be H x W x C")
        mask = np.asarray(self.valid_mask, dtype=bool)
        if mask.shape != vals.shape[:2]:
            raise InputError("valid mask shape does not match values")
        if not np.all(np.isfinite(vals[mask])):
            raise InputError("feature values must be finite where valid")
        vals = np.where(mask[:, :, None], vals, 0.0)
        self.values = np.ascontiguousarray(vals)
        self.valid_mask = mask

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True)
class RadiometricStats:
    mean: float
    stddev: float

    def __post_init__(self):
        if not self.stddev > 1e-12:
            raise ZeroVariance(f"standard deviation {self.stddev} too small")


def normalize_radiometry(images: Sequence[Image2D], stats: RadiometricStats | None = None):
    """Standardize [0, 1] intensities with shared mean / standard deviation.

    When ``stats`` is omitted they are computed over the valid pixels of all
    ``images``. Returns ``(normalized_arrays, stats)``.
    """
    images = list(images)
    if not images or not any(im.valid_mask.any() for im in images):
        raise EmptyInput("no valid pixels to normalize")
    if stats is None:
        pool = np.concatenate([im.intensities[im.valid_mask] for im in images])
        mean = float(pool.mean())
        std = float(np.sqrt(np.mean((pool - mean) ** 2)))
        if std <= 1e-12:
            raise ZeroVariance("input images have constant radiometry")
        stats = RadiometricStats(mean, std)
    out = [np.where(im.valid_mask, (im.intensities - stats.mean) / stats.stddev, 0.0) for im in images]
    return out, stats


def renormalize(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale vectors to unit length; zero-length vectors become invalid."""
    norm = np.linalg.norm(values, axis=-1)
    ok = valid & (norm > _ZERO_NORM)
    out = np.zeros_like(values)
    out[ok] = values[ok] / norm[ok][:, None]
    return out, ok


def extract_patch_descriptors(image: Image2D, radius: int = 2) -> FeatureMap:
    """Mean-subtracted, L2-normalized (2r+1)^2 patches around every pixel.

    Cosine similarity of two such descriptors equals the normalized
    cross-correlation of the raw patches. Pixels closer than ``radius`` to the
    border, touching an invalid pixel, or with a constant patch are invalid.
    """
    if radius < 1:
        raise InputError("radius must be >= 1")
    k = 2 * radius + 1
    h, w = image.intensities.shape
    if h < k or w < k:
        raise PatchLargerThanImage(f"{k}x{k} patch does not fit a {w}x{h} image")
    win = sliding_window_view(image.intensities, (k, k)).reshape(h - k + 1, w - k + 1, k * k)
    centered = win - win.mean(axis=-1, keepdims=True)
    vmask = sliding_window_view(image.valid_mask, (k, k)).all(axis=(-1, -2))
    inner, ok = renormalize(centered, vmask)
    values = np.zeros((h, w, k * k))
    valid = np.zeros((h, w), dtype=bool)
    values[radius : h - radius, radius : w - radius] = inner
    valid[radius : h - radius, radius : w - radius] = ok
    return FeatureMap(values, valid, unit_normalized=True)


class PatchExtractor:
    """Built-in extractor: NCC patch descriptors of a fixed radius."""

    def __init__(self, radius: int = 2):
        self.radius = radius

    def __call__(self, image: Image2D) -> FeatureMap:
        return extract_patch_descriptors(image, self.radius)

    def __repr__(self):
        return f"PatchExtractor(radius={self.radius})"


class ExternalExtractor:
    """Feature maps produced elsewhere, read from an FMAP file.

    The stored map must already live in the geometry the image is presented
    in (the aligned geometry when used through ``geometry_aware_features``).
    """

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, image: Image2D) -> FeatureMap:
        fmap = read_feature_map(self.path)
        if fmap.size != image.size:
            raise InputError(f"{self.path}: feature map size {fmap.size} != image size {image.size}")
        return fmap


def warp_feature_map(fmap: FeatureMap, t: PlanarTransform) -> FeatureMap:
    """Resample a feature map through ``t``; unit maps are re-normalized."""
    vals, ok = apply_transform(fmap.values, t, valid=fmap.valid_mask)
    if fmap.unit_normalized:
        vals, ok = renormalize(vals, ok)
    return FeatureMap(vals, ok, fmap.unit_normalized)


def geometry_aware_features(
    image: Image2D,
    transform: PlanarTransform | None = None,
    extractor: Callable[[Image2D], FeatureMap] | None = None,
) -> FeatureMap:
    """Extract features in an aligned geometry and warp them back.

    ``transform`` maps the native image into the aligned geometry; the result
    is ``T^-1[E(T(I))]`` in native geometry. With no transform (or an exact
    identity) this is the bare extractor.
    """
    extractor = extractor or PatchExtractor(2)
    if transform is None or transform.is_identity():
        return extractor(image)
    warped, ok = apply_transform(image.intensities, transform, valid=image.valid_mask)
    aligned = Image2D(warped, ok, image.gsd)
    feats = extractor(aligned)
    back = invert(transform)
    return warp_feature_map(feats, back)


def downsample_image(image: Image2D, factor: int) -> Image2D:
    """Box-average by ``factor`` (a power of two) in 2x2 octaves."""
    vals = image.intensities
    mask = image.valid_mask.astype(np.float64)
    f = int(factor)
    while f > 1:
        h, w = vals.shape
        h2, w2 = h // 2, w // 2
        v = vals[: 2 * h2, : 2 * w2] * mask[: 2 * h2, : 2 * w2]
        m = mask[: 2 * h2, : 2 * w2]
        vs = v.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
        ms = m.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
        full = ms == 4
        vals = np.where(full, vs / 4.0, 0.0)
        mask = full.astype(np.float64)
        f //= 2
    gsd = None if image.gsd is None else image.gsd * factor
    return Image2D(vals, mask > 0, gsd)


def downsample_features(fmap: FeatureMap, factor: int) -> FeatureMap:
    """Box-average a feature map by ``factor``; unit maps are re-normalized."""
    vals = fmap.values
    mask = fmap.valid_mask
    f = int(factor)
    while f > 1:
        h, w, c = vals.shape
        h2, w2 = h // 2, w // 2
        v = vals[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c).mean(axis=(1, 3))
        mask = mask[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).all(axis=(1, 3))
        vals = v
        f //= 2
    if fmap.unit_normalized:
        vals, mask = renormalize(vals, mask)
    return FeatureMap(vals, mask, fmap.unit_normalized)


# --------------------------------------------------------------------------
# FMAP files


def write_feature_map(path, fmap: FeatureMap) -> None:
    """Write ``fmap`` as FMAP: header, f32 values (row-major, channels
    interleaved) and one validity byte per pixel, all little-endian."""
    h, w, c = fmap.values.shape
    if h * w * c > _MAX_ELEMENTS:
        raise DimensionOverflow(f"{h}x{w}x{c} exceeds 2^31 elements")
    flags = 1 if fmap.unit_normalized else 0
    with atomic_write(path) as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<5I", FMAP_VERSION, h, w, c, flags))
        fh.write(np.ascontiguousarray(fmap.values, dtype="<f4").tobytes())
        fh.write(fmap.valid_mask.astype(np.uint8).tobytes())


def read_feature_map(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FMAP_MAGIC:
        raise BadMagic(f"{path}: missing FMAP magic")
    if len(data) < 24:
        raise TruncatedFile(f"{path}: header truncated")
    version, h, w, c, flags = struct.unpack_from("<5I", data, 4)
    if version != FMAP_VERSION:
        raise BadMagic(f"{path}: unsupported FMAP version {version}")
    n = h * w * c
    if n > _MAX_ELEMENTS:
        raise DimensionOverflow(f"{path}: {h}x{w}x{c} exceeds 2^31 elements")
    need = 24 + 4 * n + h * w
    if len(data) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", count=n, offset=24).reshape(h, w, c)
    valid = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=24 + 4 * n).reshape(h, w) != 0
    if not np.all(np.isfinite(vals[valid])):
        raise InputError(f"{path}: non-finite feature values")
    fmap = FeatureMap(vals.astype(np.float64), valid, bool(flags & 1))
    return fmap
