import csv
import json

import numpy as np
import pytest

from sweepmatch.cli import main
from sweepmatch.io import read_kv, read_pfm


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synth.cfg"
    cfg.write_text("image_size = 128,128\nsynth_gsd = 0.15\nbuildings = 3\nview_count = 3\nlidar_density = 3\n")
    assert main(["synth", "--config", str(cfg), "--out", str(root / "scene"), "--seed", "5"]) == 0
    return root


def report(path):
    return {(r["metric"], r["name"]): float(r["value"]) for r in csv.DictReader(open(path))}


def test_synth_match_eval(scene_dir):
    scene = scene_dir / "scene"
    assert (scene / "lidar.xyz").exists()
    out = scene_dir / "match"
    assert main(["match", "--manifest", str(scene / "manifest.txt"), "--out", str(out)]) == 0
    info = read_kv(out / "match.txt")
    assert info["command"] == "match" and int(info["valid_pixels"]) > 0
    ev = scene_dir / "eval"
    assert main(["eval", "--manifest", str(scene / "manifest.txt"), "--out", str(ev),
                 "--config", str(write_cfg(scene_dir / "eval.cfg",
                                           depth=out / "match_elevation.pfm", gt=scene / "gt_elev0.pfm"))]) == 0
    rep = report(ev / "report.csv")
    assert rep[("completeness", "percent")] > 90
    assert rep[("d_inliers", "3xgsd")] > 80


def write_cfg(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


@pytest.mark.parametrize("views", [2, 3])
def test_view_counts(scene_dir, views):
    out = scene_dir / f"v{views}"
    cfg = write_cfg(scene_dir / f"v{views}.cfg", levels="4,2,1", feature_switch_level=2)
    assert main(["match", "--config", str(cfg), "--manifest", str(scene_dir / "scene/manifest.txt"),
                 "--views", str(views), "--out", str(out)]) == 0
    d = read_pfm(out / "match_elevation.pfm")
    assert d.shape == (128, 128) and np.isfinite(d).mean() > 0.55


def test_rerun_is_bit_identical(scene_dir):
    args = ["match", "--manifest", str(scene_dir / "scene/manifest.txt"), "--prior", "hom", "--rot-align", "1"]
    assert main(args + ["--out", str(scene_dir / "r1")]) == 0
    assert main(args + ["--out", str(scene_dir / "r2"), "--threads", "2"]) == 0
    for name in ("match_elevation.pfm", "match_depth.pfm", "match_confidence.pfm"):
        assert (scene_dir / "r1" / name).read_bytes() == (scene_dir / "r2" / name).read_bytes()


def test_missing_weights_exit_code(scene_dir, capsys):
    code = main(["match", "--manifest", str(scene_dir / "scene/manifest.txt"), "--sim", "mlp",
                 "--weights", "/no/such/file.mlpw", "--out", str(scene_dir / "w")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == 2 and err["path"] == "/no/such/file.mlpw"


def test_unknown_config_key(scene_dir, capsys):
    cfg = write_cfg(scene_dir / "bad.cfg", level="8,4")
    assert main(["match", "--config", str(cfg), "--out", str(scene_dir / "bad")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_bad_value_and_missing_manifest(scene_dir):
    cfg = write_cfg(scene_dir / "val.cfg", p1="cheap")
    assert main(["match", "--config", str(cfg), "--manifest", str(scene_dir / "scene/manifest.txt"),
                 "--out", str(scene_dir / "val")]) == 2
    assert main(["match", "--manifest", str(scene_dir / "none.txt"), "--out", str(scene_dir / "nm")]) == 2


def test_gt_from_lidar(scene_dir):
    out = scene_dir / "gt"
    cfg = write_cfg(scene_dir / "gt.cfg", cloud=scene_dir / "scene/lidar.xyz", range_epsilon=0.5, edge_cap=12)
    assert main(["gt", "--config", str(cfg), "--manifest", str(scene_dir / "scene/manifest.txt"), "--out", str(out)]) == 0
    gt = read_pfm(out / "gt_depth0.pfm")
    ref = read_pfm(scene_dir / "scene/gt_depth0.pfm")
    ok = np.isfinite(gt)
    assert ok.mean() > 0.4
    assert np.median(np.abs(gt[ok] - ref[ok])) < 0.05


def test_train_then_match_with_mlp(scene_dir):
    manifest = str(scene_dir / "scene/manifest.txt")
    cfg = write_cfg(scene_dir / "train.cfg", epochs=3, max_pixels=500)
    assert main(["mlp-train", "--config", str(cfg), "--manifest", manifest, "--out", str(scene_dir / "mlp")]) == 0
    weights = scene_dir / "mlp/mlp.mlpw"
    rows = list(csv.DictReader(open(scene_dir / "mlp/loss.csv")))
    assert len(rows) == 3
    out = scene_dir / "mlp_match"
    cfg = write_cfg(scene_dir / "mm.cfg", levels="4,2,1", feature_switch_level=2)
    assert main(["match", "--config", str(cfg), "--manifest", manifest, "--sim", "mlp",
                 "--weights", str(weights), "--out", str(out)]) == 0
    assert np.isfinite(read_pfm(out / "match_elevation.pfm")).mean() > 0.5


def test_mvs_and_features(scene_dir):
    manifest = str(scene_dir / "scene/manifest.txt")
    cfg = write_cfg(scene_dir / "mvs.cfg", levels="4,2,1", feature_switch_level=2)
    out = scene_dir / "mvs"
    assert main(["mvs", "--config", str(cfg), "--manifest", manifest, "--out", str(out)]) == 0
    for name in ("pair1_elevation.pfm", "pair2_elevation.pfm", "mvs_elevation.pfm"):
        assert (out / name).exists()
    out = scene_dir / "feat"
    assert main(["features", "--manifest", manifest, "--prior", "epip", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.fmap")) == ["view0.fmap", "view1.fmap", "view2.fmap"]
