import numpy as np
import pytest

from sweepmatch.errors import InputError, RayMissesTerrain
from sweepmatch.geometry import CameraPinhole, project_points
from sweepmatch.synth import SceneSpec, lidar_cloud, make_rig, make_terrain, occluded, render, synthesize

SMALL = dict(image_size=(64, 64), gsd=0.2, buildings=3)


@pytest.fixture(scope="module")
def small_scene():
    return synthesize(SceneSpec(seed=7, **SMALL))


def test_deterministic(small_scene):
    again = synthesize(SceneSpec(seed=7, **SMALL))
    for a, b in zip(small_scene.renders, again.renders):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)
    other = synthesize(SceneSpec(seed=8, **SMALL))
    assert not np.array_equal(other.renders[0].image, small_scene.renders[0].image)


def test_images_are_8bit_quantized(small_scene):
    img = small_scene.renders[0].image
    np.testing.assert_allclose(img * 255, np.rint(img * 255), atol=1e-9)
    assert img.std() > 0.1


def test_depth_agrees_with_projection(small_scene):
    cam = small_scene.manifest.cameras[0]
    r = small_scene.renders[0]
    pix, depth = project_points(cam, r.points.reshape(-1, 3))
    ys, xs = np.mgrid[0:64, 0:64]
    np.testing.assert_allclose(pix, np.column_stack([xs.ravel(), ys.ravel()]), atol=1e-6)
    np.testing.assert_allclose(depth, r.depth.ravel(), atol=1e-9)
    np.testing.assert_allclose(r.elevation, r.points[..., 2])


def test_points_lie_on_surface(small_scene):
    t = small_scene.terrain
    p = small_scene.renders[0].points.reshape(-1, 3)
    gap = np.abs(p[:, 2] - t.height(p[:, 0], p[:, 1]))
    # wall hits are the only points off the heightfield value
    assert np.mean(gap < 1e-3) > 0.95


def test_views_agree_where_visible(small_scene):
    m, t = small_scene.manifest, small_scene.terrain
    pts = small_scene.renders[0].points.reshape(-1, 3)
    for j in (1, 2):
        hidden = occluded(t, pts, m.cameras[j].center)
        pix, depth = project_points(m.cameras[j], pts)
        inside = np.all((pix >= 0) & (pix <= 63), axis=1) & ~hidden
        xi, yi = np.rint(pix[inside]).astype(int).T
        seen = small_scene.renders[j].depth[yi, xi]
        # nearest-pixel lookup: compare within a slope-dependent margin
        assert np.median(np.abs(seen - depth[inside])) < 0.05
        assert 0 < hidden.mean() < 0.3


def test_rig_baselines():
    spec = SceneSpec(view_count=4, **SMALL)
    cams = make_rig(spec)
    assert spec.bh_ratio == 0.12
    dist = [np.linalg.norm(c.center - cams[0].center) for c in cams[1:]]
    np.testing.assert_allclose(dist, 12.0)
    y_rig = make_rig(SceneSpec(baseline_axis="y", **SMALL))
    assert y_rig[1].center[0] == 0 and y_rig[1].center[1] > 0


def test_lidar_on_surface():
    spec = SceneSpec(seed=2, **SMALL)
    t = make_terrain(spec)
    pts = lidar_cloud(t, density=2.0, seed=0, walls=False)
    assert len(pts) == int(2.0 * t.extent**2)
    np.testing.assert_array_equal(pts[:, 2], t.height(pts[:, 0], pts[:, 1]))
    with_walls = lidar_cloud(t, density=2.0, seed=0)
    assert len(with_walls) > len(pts)


def test_ray_misses():
    spec = SceneSpec(**SMALL)
    t = make_terrain(spec)
    up = CameraPinhole(320.0, (31.5, 31.5), np.eye(3), (0, 0, 20), (64, 64), "up")
    with pytest.raises(RayMissesTerrain):
        render(t, up)
    tiny = make_terrain(SceneSpec(extent=4.0, **SMALL))
    with pytest.raises(RayMissesTerrain):
        render(tiny, make_rig(spec)[0])


@pytest.mark.parametrize("kw", [
    dict(view_count=1), dict(baseline_axis="z"), dict(gsd=0.0), dict(texture_octaves=0),
    dict(building_height=(5.0, 2.0)), dict(image_size=(20, 20), gsd=0.1),
])
def test_scene_parameters_are_validated(kw):
    with pytest.raises(InputError):
        SceneSpec(**kw)


def test_writes_files(tmp_path):
    res = synthesize(SceneSpec(**SMALL, view_count=2), tmp_path)
    assert (tmp_path / "manifest.txt").exists() and (tmp_path / "view1.pgm").exists()
    assert res.manifest.root == tmp_path


def test_flat_field_and_single_box():
    flat = SceneSpec(buildings=0, bump_amplitude=0.0, **{k: v for k, v in SMALL.items() if k != "buildings"})
    cam = make_rig(flat)[0]
    r = render(make_terrain(flat, [cam]), cam)
    np.testing.assert_allclose(r.depth, 100.0, atol=1e-3)
    t = make_terrain(flat, [cam])
    t.boxes = np.array([[-2.0, 2.0, -2.0, 2.0, 20.0]])
    r = render(t, cam)
    roof = (np.abs(r.points[..., 0]) < 2) & (np.abs(r.points[..., 1]) < 2) & (r.depth < 90)
    assert roof.sum() > 100
    np.testing.assert_allclose(r.depth[roof], 80.0, atol=1e-3)
    np.testing.assert_allclose(r.depth[r.depth > 90], 100.0, atol=1e-3)
