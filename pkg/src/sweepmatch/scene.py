"""Scene manifests: the images, cameras and depth range a matching run needs."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import EmptyScene, FormatError, InputError
from .features import Image2D
from .geometry import CameraPinhole, read_cameras, write_cameras
from .io import read_kv, read_pgm, write_kv


@dataclass(eq=False)
class SceneManifest:
    """Views of one scene; ``cameras[i]`` belongs to ``images[i]``."""

    images: list[Image2D]
    cameras: list[CameraPinhole]
    reference: int
    z_min: float
    z_max: float
    gsd: float | None = None
    mode: str = "elevation"
    image_paths: list[str] = field(default_factory=list)
    gt_depth_paths: list[str] = field(default_factory=list)
    gt_elevation_paths: list[str] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if not self.images:
            raise EmptyScene("scene has no images")
        if len(self.images) != len(self.cameras):
            raise InputError(f"{len(self.images)} images but {len(self.cameras)} cameras")
        if not 0 <= self.reference < len(self.images):
            raise InputError(f"reference id {self.reference} not among {len(self.images)} views")
        if not self.z_min < self.z_max:
            raise InputError(f"z range [{self.z_min}, {self.z_max}] is empty")
        for im, cam in zip(self.images, self.cameras):
            if im.size != cam.image_size:
                raise InputError(f"image size {im.size} != camera size {cam.image_size}")
        if not self.pairs:
            self.pairs = [(self.reference, j) for j in range(len(self.images)) if j != self.reference]

    @property
    def query_ids(self) -> list[int]:
        return [j for j in range(len(self.images)) if j != self.reference]

    def subset(self, view_count: int) -> "SceneManifest":
        """Reference plus the first ``view_count - 1`` queries."""
        if view_count < 2:
            raise InputError("a matching scene needs at least 2 views")
        keep = [self.reference] + self.query_ids[: view_count - 1]
        if len(keep) < view_count:
            raise InputError(f"scene has only {len(self.images)} views, asked for {view_count}")

        def pick(seq):
            return [seq[i] for i in keep] if seq else []

        return replace(
            self,
            images=pick(self.images),
            cameras=pick(self.cameras),
            reference=0,
            image_paths=pick(self.image_paths),
            gt_depth_paths=pick(self.gt_depth_paths),
            gt_elevation_paths=pick(self.gt_elevation_paths),
            pairs=[],
        )


def save_manifest(path, manifest: SceneManifest, cameras_file: str = "cameras.txt") -> None:
    """Write the manifest text (paths relative to its directory) and the camera file."""
    path = Path(path)
    write_cameras(path.parent / cameras_file, manifest.cameras)
    items = {
        "views": len(manifest.images),
        "reference": manifest.reference,
        "z_min": repr(float(manifest.z_min)),
        "z_max": repr(float(manifest.z_max)),
        "mode": manifest.mode,
        "cameras": cameras_file,
        "images": ",".join(manifest.image_paths),
        "pairs": ",".join(f"{a}-{b}" for a, b in manifest.pairs),
    }
    if manifest.gsd is not None:
        items["gsd"] = repr(float(manifest.gsd))
    if manifest.gt_depth_paths:
        items["gt_depth"] = ",".join(manifest.gt_depth_paths)
    if manifest.gt_elevation_paths:
        items["gt_elevation"] = ",".join(manifest.gt_elevation_paths)
    write_kv(path, items)


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    kv = read_kv(path)
    root = path.parent
    try:
        cams = read_cameras(root / kv["cameras"])
        image_paths = _split(kv["images"])
        ref = int(kv["reference"])
        z_min, z_max = float(kv["z_min"]), float(kv["z_max"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    gsd = float(kv["gsd"]) if "gsd" in kv else None
    images = [Image2D.from_uint8(read_pgm(root / p), gsd) for p in image_paths]
    pairs = [tuple(int(v) for v in p.split("-")) for p in _split(kv.get("pairs", ""))]
    return SceneManifest(
        images=images,
        cameras=cams,
        reference=ref,
        z_min=z_min,
        z_max=z_max,
        gsd=gsd,
        mode=kv.get("mode", "elevation"),
        image_paths=image_paths,
        gt_depth_paths=_split(kv.get("gt_depth", "")),
        gt_elevation_paths=_split(kv.get("gt_elevation", "")),
        pairs=pairs,
        root=root,
    )
