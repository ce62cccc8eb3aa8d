"""Command-line interface.

Every subcommand reads an optional ``key = value`` config file, applies flag
overrides, and writes its outputs atomically into ``--out``. Configuration
and input-file problems exit with status 2, pipeline failures with 1; both
print one JSON error line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, SweepMatchError
from .features import PatchExtractor, geometry_aware_features, read_feature_map, write_feature_map
from .fusion import FusionConfig, fuse
from .geometry import backproject_points, elevation_to_depth, epipolar_prior, homography_prior
from .groundtruth import PointCloud, VisibilityConfig, ground_truth, read_cloud, write_xyz
from .io import atomic_write, read_kv, read_pfm, write_kv, write_pfm
from .metrics import evaluate, write_histogram_csv, write_report_csv
from .regularize import DepthMap, MatchOptions, PyramidConfig, SgmConfig, pyramid_match, write_depth_map
from .scene import SceneManifest, load_manifest
from .simlearn import LossConfig, read_mlp, write_mlp
from .synth import SceneSpec, lidar_cloud, synthesize
from .training import epipolar_training_pair, train_on_pairs

log = logging.getLogger("sweepmatch")

DEFAULTS: dict[str, str] = {
    # scene and run
    "manifest": "",
    "views": "",
    "threads": "1",
    "seed": "0",
    # matching
    "prior": "none",
    "rot_align": "0",
    "sim": "cos",
    "weights": "",
    "features": "",
    "levels": "8,4,2,1",
    "feature_switch_level": "4",
    "envelope_steps": "2",
    "step_px": "0.25",
    "fine_step": "",
    "refine_radius": "2",
    "patch_radius": "2",
    "p1": "0.03",
    "p2": "0.3",
    "directions": "8",
    "external_penalty_scale": "0.01",
    # late fusion
    "fusion_method": "median",
    "min_views": "1",
    "agreement_window": "",
    # MLP training
    "margin": "0.3",
    "neg_interval": "1,4",
    "epochs": "120",
    "learning_rate": "0.5",
    "max_pixels": "4000",
    "train_scenes": "2",
    # ground truth
    "cloud": "",
    "view": "0",
    "k": "27",
    "v_th": "0.76",
    "range_epsilon": "1e-6",
    "cell_px": "2",
    "depth_tolerance": "0.2",
    "edge_cap": "30",
    # evaluation
    "depth": "",
    "gt": "",
    "gsd": "",
    "inlier_threshold": "1.5",
    "multipliers": "1,2,3",
    # synthesis
    "image_size": "256,256",
    "synth_gsd": "0.1",
    "flight_height": "100",
    "buildings": "6",
    "view_count": "3",
    "noise_sigma": "0",
    "baseline_axis": "x",
    "texture_octaves": "4",
    "bump_amplitude": "0.4",
    "lidar_density": "0",
}

_FLAG_KEYS = {
    "views": "views",
    "threads": "threads",
    "seed": "seed",
    "prior": "prior",
    "rot_align": "rot_align",
    "sim": "sim",
    "weights": "weights",
    "manifest": "manifest",
}


class ConfigError(InputError):
    """Bad configuration value or missing input file."""

    def __init__(self, message: str, filename=None):
        super().__init__(message)
        self.filename = filename


class RunConfig:
    """Merged defaults, config-file values and flag overrides with typed access."""

    def __init__(self, values: dict[str, str], source: str = "<defaults>"):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {unknown}")
        self.values = {**DEFAULTS, **values}
        self.source = source

    def str(self, key: str) -> str:
        return self.values[key].strip()

    def int(self, key: str) -> int:
        return int(self._parse(key, int))

    def float(self, key: str) -> float:
        return float(self._parse(key, float))

    def optional_float(self, key: str) -> float | None:
        return None if not self.str(key) else self.float(key)

    def ints(self, key: str) -> list[int]:
        return [self._convert(key, v, int) for v in self.str(key).split(",") if v.strip()]

    def floats(self, key: str) -> list[float]:
        return [self._convert(key, v, float) for v in self.str(key).split(",") if v.strip()]

    def _parse(self, key, kind):
        return self._convert(key, self.str(key), kind)

    def _convert(self, key, raw, kind):
        try:
            return kind(raw.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None

    def path(self, key: str, must_exist: bool = True) -> Path:
        raw = self.str(key)
        if not raw:
            raise ConfigError(f"config key {key!r} is required")
        p = Path(raw)
        if must_exist and not p.exists():
            raise ConfigError(f"{key}: file not found: {p}", p)
        return p


def _load_config(args) -> RunConfig:
    values: dict[str, str] = {}
    source = "<flags>"
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}", cfg_path)
        values.update(read_kv(cfg_path))
        source = str(cfg_path)
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    return RunConfig(values, source)


# --------------------------------------------------------------------------
# shared setup


def _scene(cfg: RunConfig) -> SceneManifest:
    scene = load_manifest(cfg.path("manifest"))
    if cfg.str("views"):
        scene = scene.subset(cfg.int("views"))
    return scene


def _match_setup(cfg: RunConfig, scene: SceneManifest):
    prior = {"none": "none", "epip": "epipolar", "hom": "homography"}.get(cfg.str("prior"))
    if prior is None:
        raise ConfigError(f"prior must be none, epip or hom, got {cfg.str('prior')!r}")
    sim = {"cos": "cosine", "mlp": "mlp"}.get(cfg.str("sim"))
    if sim is None:
        raise ConfigError(f"sim must be cos or mlp, got {cfg.str('sim')!r}")
    mlp = None
    if sim == "mlp":
        if not cfg.str("weights"):
            raise ConfigError("mlp similarity requires --weights")
        mlp = read_mlp(cfg.path("weights"))
    external = None
    if cfg.str("features"):
        paths = [Path(p.strip()) for p in cfg.str("features").split(",")]
        for p in paths:
            if not p.exists():
                raise ConfigError(f"features: file not found: {p}", p)
        external = [read_feature_map(p) for p in paths]
        if len(external) != len(scene.images):
            raise ConfigError(f"features: need {len(scene.images)} maps, got {len(external)}")
    pcfg = PyramidConfig(tuple(cfg.ints("levels")), cfg.int("feature_switch_level"), cfg.int("envelope_steps"))
    scfg = SgmConfig(cfg.float("p1"), cfg.float("p2"), cfg.int("directions"))
    opts = MatchOptions(
        similarity=sim,
        mlp=mlp,
        prior=prior,
        rotation_align=cfg.int("rot_align"),
        external_features=external,
        patch_radius=cfg.int("patch_radius"),
        step_px=cfg.float("step_px"),
        fine_step=cfg.optional_float("fine_step"),
        refine_radius=cfg.int("refine_radius"),
        external_penalty_scale=cfg.float("external_penalty_scale"),
        threads=cfg.int("threads"),
    )
    return pcfg, scfg, opts


def _write_outputs(out: Path, name: str, dm: DepthMap, scene: SceneManifest) -> dict:
    """Elevation (or depth) map as produced, plus reference camera depth."""
    cam = scene.cameras[scene.reference]
    if dm.mode == "elevation":
        write_depth_map(out / f"{name}_elevation.pfm", dm, scene.gsd)
        depth = elevation_to_depth(cam, dm.depth, dm.valid)
        ddm = DepthMap(depth, dm.valid & np.isfinite(depth), dm.confidence, mode="depth")
    else:
        ddm = dm
    write_depth_map(out / f"{name}_depth.pfm", ddm, scene.gsd)
    write_pfm(out / f"{name}_confidence.pfm", dm.confidence)
    return {"valid_pixels": int(dm.valid.sum())}


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    w, h = cfg.ints("image_size")
    spec = SceneSpec(
        seed=cfg.int("seed"),
        image_size=(w, h),
        gsd=cfg.float("synth_gsd"),
        flight_height=cfg.float("flight_height"),
        buildings=cfg.int("buildings"),
        view_count=cfg.int("views") if cfg.str("views") else cfg.int("view_count"),
        noise_sigma=cfg.float("noise_sigma"),
        baseline_axis=cfg.str("baseline_axis"),
        texture_octaves=cfg.int("texture_octaves"),
        bump_amplitude=cfg.float("bump_amplitude"),
    )
    res = synthesize(spec, out)
    info = {"views": len(res.manifest.images), "z_min": res.manifest.z_min, "z_max": res.manifest.z_max}
    density = cfg.float("lidar_density")
    if density > 0:
        write_xyz(out / "lidar.xyz", PointCloud(lidar_cloud(res.terrain, density, spec.seed)))
        info["lidar"] = "lidar.xyz"
    return info


def cmd_features(cfg: RunConfig, out: Path) -> dict:
    """Geometry-aware built-in features of every view, in native geometry."""
    scene = _scene(cfg)
    prior = cfg.str("prior")
    rot = cfg.int("rot_align")
    ext = PatchExtractor(cfg.int("patch_radius"))
    ref = scene.reference
    cams = scene.cameras
    zmid = 0.5 * (scene.z_min + scene.z_max)
    written = []
    for i, img in enumerate(scene.images):
        if prior == "none":
            t = None
        elif i == ref:
            q = scene.query_ids[0]
            p = epipolar_prior(cams[ref], cams[q], rot) if prior == "epip" else homography_prior(cams[ref], cams[q], zmid, rot)
            t = p.reference_transform(cams[ref].image_size)
        else:
            p = epipolar_prior(cams[ref], cams[i], rot) if prior == "epip" else homography_prior(cams[ref], cams[i], zmid, rot)
            t = p.query_transform(cams[i].image_size)
        fmap = geometry_aware_features(img, t, ext)
        name = f"view{i}.fmap"
        write_feature_map(out / name, fmap)
        written.append(name)
    return {"features": ",".join(str(out / n) for n in written)}


def cmd_match(cfg: RunConfig, out: Path) -> dict:
    scene = _scene(cfg)
    pcfg, scfg, opts = _match_setup(cfg, scene)
    res = pyramid_match(scene, pcfg, scfg, opts)
    info = _write_outputs(out, "match", res.depth, scene)
    info.update(fine_step=res.fine_step, evaluations=res.evaluations, views=len(scene.images))
    return info


def cmd_mvs(cfg: RunConfig, out: Path) -> dict:
    scene = _scene(cfg)
    pcfg, scfg, opts = _match_setup(cfg, scene)
    maps = []
    step = None
    for j in scene.query_ids:
        pair = SceneManifest(
            [scene.images[scene.reference], scene.images[j]],
            [scene.cameras[scene.reference], scene.cameras[j]],
            0, scene.z_min, scene.z_max, scene.gsd, scene.mode,
        )
        pair_opts = opts
        if opts.external_features is not None:
            pair_opts = replace(opts, external_features=[opts.external_features[scene.reference], opts.external_features[j]])
        res = pyramid_match(pair, pcfg, scfg, pair_opts)
        step = res.fine_step if step is None else min(step, res.fine_step)
        _write_outputs(out, f"pair{j}", res.depth, scene)
        maps.append(res.depth)
    fcfg = FusionConfig(cfg.str("fusion_method"), cfg.int("min_views"), cfg.optional_float("agreement_window"))
    fused = fuse(maps, fcfg, step=step)
    info = _write_outputs(out, "mvs", fused, scene)
    info.update(pairs=len(maps), fine_step=step)
    return info


def cmd_gt(cfg: RunConfig, out: Path) -> dict:
    scene = load_manifest(cfg.path("manifest"))
    cloud = read_cloud(cfg.path("cloud"))
    view = cfg.int("view")
    if not 0 <= view < len(scene.cameras):
        raise ConfigError(f"view {view} not in scene")
    vis = VisibilityConfig(cfg.int("k"), cfg.float("v_th"), cfg.float("range_epsilon"))
    dm = ground_truth(cloud, scene.cameras[view], vis, cfg.float("cell_px"), cfg.float("depth_tolerance"), cfg.float("edge_cap"))
    write_depth_map(out / f"gt_depth{view}.pfm", dm, scene.gsd)
    return {"valid_pixels": int(dm.valid.sum())}


def _read_depth(path: Path) -> DepthMap:
    arr = read_pfm(path).astype(np.float64)
    return DepthMap(arr, np.isfinite(arr))


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    depth = _read_depth(cfg.path("depth"))
    gt = _read_depth(cfg.path("gt"))
    if cfg.str("gsd"):
        gsd = cfg.float("gsd")
    elif cfg.str("manifest"):
        gsd = load_manifest(cfg.path("manifest")).gsd
    else:
        raise ConfigError("eval needs 'gsd' or a manifest providing it")
    if gsd is None:
        raise ConfigError("no GSD available for evaluation")
    rep = evaluate(depth, gt, gsd, cfg.floats("multipliers"), cfg.float("inlier_threshold"))
    write_report_csv(out / "report.csv", rep)
    write_histogram_csv(out / "histogram.csv", rep)
    return {"mu": rep.mu, "completeness": rep.completeness, **{f"d{x:g}": v for x, v in rep.d_at}}


def cmd_mlp_train(cfg: RunConfig, out: Path) -> dict:
    """Train on rendered epipolar pairs of a scene (or fresh synthetic ones)."""
    seed = cfg.int("seed")
    pairs = []
    if cfg.str("manifest"):
        scene = load_manifest(cfg.path("manifest"))
        if not scene.gt_depth_paths:
            raise ConfigError("training needs ground-truth depth maps in the manifest")
        root = scene.root or Path(".")
        depths = [read_pfm(root / p).astype(np.float64) for p in scene.gt_depth_paths]
        ref = scene.reference
        cam = scene.cameras[ref]
        pix = np.stack(np.meshgrid(np.arange(cam.width), np.arange(cam.height)), axis=-1).reshape(-1, 2).astype(float)
        pts, ok = backproject_points(cam, pix, depth=depths[ref].reshape(-1))
        pts[~ok] = np.nan
        pts = pts.reshape(cam.height, cam.width, 3)
        for j in scene.query_ids:
            pairs.append(epipolar_training_pair(scene.images[ref], scene.images[j], cam, scene.cameras[j], pts, depths[j]))
    else:
        for s in range(cfg.int("train_scenes")):
            res = synthesize(SceneSpec(seed=seed * 1000 + 100 + s, view_count=3, noise_sigma=cfg.float("noise_sigma")))
            m = res.manifest
            for j in m.query_ids:
                pairs.append(epipolar_training_pair(m.images[0], m.images[j], m.cameras[0], m.cameras[j], res.renders[0].points, res.renders[j].depth))
    lo, hi = cfg.ints("neg_interval")
    params, trace = train_on_pairs(
        pairs,
        epochs=cfg.int("epochs"),
        learning_rate=cfg.float("learning_rate"),
        loss_cfg=LossConfig(cfg.float("margin"), (lo, hi)),
        seed=seed,
        max_pixels=cfg.int("max_pixels"),
    )
    write_mlp(out / "mlp.mlpw", params)
    with atomic_write(out / "loss.csv", "w") as fh:
        fh.write("epoch,bce\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{float(v)!r}\n")
    return {"weights": str(out / "mlp.mlpw"), "final_loss": trace[-1]}


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "match": cmd_match,
    "mvs": cmd_mvs,
    "gt": cmd_gt,
    "eval": cmd_eval,
    "mlp-train": cmd_mlp_train,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sweepmatch", description="Multi-view plane-sweep dense matching.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--views", type=int)
        p.add_argument("--prior", choices=["epip", "hom"])
        p.add_argument("--rot-align", dest="rot_align", type=int, choices=[0, 1, 2, 3])
        p.add_argument("--sim", choices=["cos", "mlp"])
        p.add_argument("--weights")
        p.add_argument("--seed", type=int)
        p.add_argument("--manifest", help="scene manifest (overrides the config key)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SWEEPMATCH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _fail(status: int, exc: BaseException) -> int:
    payload = {"status": status, "error": type(exc).__name__, "message": str(exc)}
    filename = getattr(exc, "filename", None)
    if filename:
        payload["path"] = str(filename)
    print(json.dumps(payload), file=sys.stderr)
    return status


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (InputError, FormatError, OSError) as exc:
        return _fail(2, exc)
    start = time.perf_counter()
    try:
        info = COMMANDS[args.command](cfg, out)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        return _fail(2, exc)
    except (SweepMatchError, ValueError) as exc:
        return _fail(1, exc)
    info = {"command": args.command, **info}
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    write_kv(out / f"{args.command}.txt", info)
    return 0


if __name__ == "__main__":
    sys.exit(main())
