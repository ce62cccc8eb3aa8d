import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepmatch.errors import BadMagic, CollinearInput, NoVisiblePoints, TooFewSamples, TruncatedFile
from scipy.spatial import Delaunay

from sweepmatch.geometry import project, pixel_rays
from sweepmatch.groundtruth import (
    PointCloud,
    SparseDepthMap,
    VisibilityConfig,
    closest_selection,
    densify,
    ground_truth,
    project_cloud,
    read_cloud,
    read_pcl,
    visibility_filter,
    visibility_scores,
    write_pcl,
    write_xyz,
)
from sweepmatch.synth import SceneSpec, lidar_cloud, make_rig, make_terrain, render

from conftest import nadir_camera


def lift(cam, pixels, z):
    """World points at elevation ``z`` seen at ``pixels``."""
    rays = pixel_rays(cam, pixels)
    t = (z - cam.center[2]) / rays[:, 2]
    return cam.center + t[:, None] * rays


def scores_oracle(pixels, depths, k, eps):
    out = []
    for i in range(len(depths)):
        dist = [math.dist(pixels[i], pixels[j]) for j in range(len(depths))]
        nb = sorted(range(len(depths)), key=lambda j: dist[j])[: k + 1]
        lo = min(depths[j] for j in nb)
        hi = max(depths[j] for j in nb)
        out.append(1.0 if hi - lo < eps else math.exp(-(((depths[i] - lo) / (hi - lo)) ** 2)))
    return np.array(out)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 8))
def test_scores_match_loop_oracle(seed, k):
    rng = np.random.default_rng(seed)
    pix = rng.uniform(0, 30, (25, 2))
    depths = rng.uniform(50, 60, 25)
    s = SparseDepthMap(pix, depths, (30, 30))
    np.testing.assert_allclose(visibility_scores(s, k), scores_oracle(pix, depths, k, 1e-6), rtol=1e-12)


def test_score_threshold_boundary():
    # the deepest sample of a two-level neighbourhood scores exp(-1), below 0.76
    pix = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    s = SparseDepthMap(pix, [10.0, 20.0, 10.0, 14.9], (2, 2))
    v = visibility_scores(s, 3)
    assert v[1] == pytest.approx(math.exp(-1.0))
    assert v[3] == pytest.approx(math.exp(-0.49 ** 2))
    assert v[3] >= 0.76 > v[1]
    flat = SparseDepthMap(pix, [5.0, 5.0, 5.0, 5.0 + 1e-8], (2, 2))
    assert np.all(visibility_scores(flat, 3) == 1.0)


def two_plane_cloud(cam):
    """Ground (z=0) and a plate (z=20) sampled at one point per image pixel;
    the plate grid is offset by half a pixel so the two interleave."""
    w, h = cam.image_size
    gy, gx = np.mgrid[0:h, 0:w]
    ground_pix = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
    py, px = np.mgrid[15.5:31, 20.5:41]
    plate_pix = np.column_stack([px.ravel(), py.ravel()])
    ground = lift(cam, ground_pix, 0.0)
    plate = lift(cam, plate_pix, 20.0)
    hidden = (ground_pix[:, 0] > 20.5) & (ground_pix[:, 0] < 40.5) & (ground_pix[:, 1] > 15.5) & (ground_pix[:, 1] < 30.5)
    return ground, plate, hidden


def test_two_plane_occlusion_removal():
    cam = nadir_camera()
    ground, plate, hidden = two_plane_cloud(cam)
    cloud = PointCloud(np.vstack([ground, plate]))
    sparse = project_cloud(cloud, cam)
    assert len(sparse) == len(cloud)
    kept = visibility_filter(sparse)
    kept_keys = {tuple(np.round(p, 6)) for p in kept.pixels}
    ground_pix = np.round(sparse.pixels[: len(ground)], 6)
    plate_pix = np.round(sparse.pixels[len(ground):], 6)
    hidden_kept = sum(tuple(p) in kept_keys for p in ground_pix[hidden])
    plate_kept = sum(tuple(p) in kept_keys for p in plate_pix)
    assert hidden.sum() > 250
    assert hidden_kept == 0
    assert plate_kept / len(plate_pix) >= 0.95
    # far from the plate the ground survives
    far = (ground_pix[:, 0] < 8) | (ground_pix[:, 0] > 55)
    assert all(tuple(p) in kept_keys for p in ground_pix[far])


def test_single_point_and_behind_camera():
    cam = nadir_camera()
    s = project_cloud(PointCloud([[0.0, 0.0, 10.0], [0.0, 0.0, 150.0]]), cam)
    assert len(s) == 1
    np.testing.assert_allclose(s.pixels[0], cam.principal_point)
    assert s.depths[0] == pytest.approx(90.0)


def test_projection_count_matches_point_loop(rng):
    cam = nadir_camera()
    pts = np.c_[rng.uniform(-12, 12, (3000, 2)), rng.uniform(-2, 3, 3000)]
    expected = 0
    for p in pts:
        (u, v), z = project(cam, p)
        expected += z > 0 and -0.5 <= u < 63.5 and -0.5 <= v < 47.5
    assert len(project_cloud(PointCloud(pts), cam)) == expected


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_scores_bounded_and_filter_idempotent(seed):
    rng = np.random.default_rng(seed)
    s = SparseDepthMap(rng.uniform(0, 40, (200, 2)), rng.choice([50.0, 80.0, 100.0], 200) + rng.normal(0, 0.01, 200), (40, 40))
    v = visibility_scores(s, 27)
    assert np.all((v > 0) & (v <= 1))
    kept = visibility_filter(s)
    if len(kept) >= 28:
        assert np.all(visibility_scores(kept, 27) >= 0.76)


def test_closest_selection_keeps_foreground_on_outline(rng):
    # background and foreground samples mixed in cells straddling an outline
    fg = np.c_[rng.uniform(10, 30, 800), rng.uniform(0, 40, 800)]
    bg = np.c_[rng.uniform(0, 40, 1600), rng.uniform(0, 40, 1600)]
    s = SparseDepthMap(np.vstack([fg, bg]), np.r_[np.full(800, 50.0) + rng.normal(0, 0.05, 800),
                                                   np.full(1600, 100.0)], (40, 40))
    out = closest_selection(s, cell_px=2)
    near_edge = (np.abs(out.pixels[:, 0] - 10) < 1.5) | (np.abs(out.pixels[:, 0] - 30) < 1.5)
    cells = np.floor((out.pixels + 0.5) / 2).astype(int)
    fg_cells = {tuple(c) for c in np.floor((fg + 0.5) / 2).astype(int)}
    mixed = np.array([tuple(c) in fg_cells for c in cells]) & near_edge
    assert mixed.sum() > 50
    assert np.mean(out.depths[mixed] < 75) >= 0.99


def in_circumcircle(a, b, c, p):
    m = np.array([[a[0] - p[0], a[1] - p[1], (a[0] - p[0]) ** 2 + (a[1] - p[1]) ** 2],
                  [b[0] - p[0], b[1] - p[1], (b[0] - p[0]) ** 2 + (b[1] - p[1]) ** 2],
                  [c[0] - p[0], c[1] - p[1], (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2]])
    orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return np.linalg.det(m) * np.sign(orient) > 1e-9


def test_densify_matches_point_in_triangle_oracle(rng):
    w, h = 24, 20
    pix = rng.uniform(0, [w - 1, h - 1], (60, 2))
    depths = rng.uniform(40, 60, 60)
    dm = densify(SparseDepthMap(pix, depths, (w, h)), edge_cap=1e9)
    tri = Delaunay(pix)
    # brute-force Delaunay validation: no sample strictly inside a circumcircle
    for t in tri.simplices:
        a, b, c = pix[t]
        assert not any(in_circumcircle(a, b, c, pix[k]) for k in range(60) if k not in t)
    expect = np.full((h, w), np.nan)
    for y in range(h):
        for x in range(w):
            for t in tri.simplices:
                (ax, ay), (bx, by), (cx, cy) = pix[t]
                det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
                l0 = ((by - cy) * (x - cx) + (cx - bx) * (y - cy)) / det
                l1 = ((cy - ay) * (x - cx) + (ax - cx) * (y - cy)) / det
                l2 = 1 - l0 - l1
                if min(l0, l1, l2) >= -1e-12:
                    expect[y, x] = l0 * depths[t[0]] + l1 * depths[t[1]] + l2 * depths[t[2]]
                    break
    np.testing.assert_array_equal(np.isfinite(expect), dm.valid)
    np.testing.assert_allclose(dm.depth[dm.valid], expect[dm.valid], atol=1e-9)


def test_densify_reproduces_vertex_depths(rng):
    pix = np.unique(rng.integers(0, 30, (80, 2)), axis=0).astype(float)
    depths = rng.uniform(10, 20, len(pix))
    dm = densify(SparseDepthMap(pix, depths, (30, 30)), edge_cap=1e9)
    xi, yi = pix.astype(int).T
    np.testing.assert_allclose(dm.depth[yi, xi], depths, atol=1e-9)


def test_filter_needs_enough_samples():
    s = SparseDepthMap(np.zeros((5, 2)) + np.arange(5)[:, None], np.ones(5), (10, 10))
    with pytest.raises(TooFewSamples):
        visibility_filter(s, VisibilityConfig(k=5))


def test_closest_selection_per_cell():
    pix = np.array([[0.0, 0.0], [0.4, 0.2], [1.2, 0.9], [3.0, 3.0]])
    s = SparseDepthMap(pix, [10.0, 10.15, 10.5, 12.0], (4, 4))
    out = closest_selection(s, cell_px=2, depth_tolerance=0.2)
    assert sorted(out.depths.tolist()) == [10.0, 10.15, 12.0]


def test_densify_exact_on_plane(rng):
    w, h = 40, 30
    pix = np.vstack([rng.uniform(0, w - 1, (80, 2)) * [1, (h - 1) / (w - 1)],
                     [[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]]])
    plane = lambda p: 50.0 + 0.3 * p[..., 0] - 0.2 * p[..., 1]
    dm = densify(SparseDepthMap(pix, plane(pix), (w, h)), edge_cap=1e9)
    assert dm.valid.all()
    ys, xs = np.mgrid[0:h, 0:w]
    np.testing.assert_allclose(dm.depth, plane(np.stack([xs, ys], -1).astype(float)), atol=1e-9)


def test_densify_edge_cap_leaves_holes():
    pix = np.array([[0.0, 0.0], [19.0, 0.0], [0.0, 19.0], [19.0, 19.0]])
    dm = densify(SparseDepthMap(pix, np.full(4, 5.0), (20, 20)), edge_cap=10)
    assert not dm.valid.any()


def test_densify_collinear():
    pix = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(CollinearInput):
        densify(SparseDepthMap(pix, np.ones(4), (5, 5)))
    with pytest.raises(CollinearInput):
        densify(SparseDepthMap(pix[:2], np.ones(2), (5, 5)))


def test_project_cloud_nothing_visible():
    cam = nadir_camera()
    with pytest.raises(NoVisiblePoints):
        project_cloud(PointCloud([[0.0, 0.0, 200.0]]), cam)


def test_cloud_file_round_trips(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(17, 3)) * 100)
    write_xyz(tmp_path / "c.xyz", cloud)
    write_pcl(tmp_path / "c.pcl", cloud)
    for name in ("c.xyz", "c.pcl"):
        np.testing.assert_array_equal(read_cloud(tmp_path / name).points, cloud.points)
    (tmp_path / "bad.pcl").write_bytes(b"PCL1" + b"\x05" + b"\x00" * 7)
    with pytest.raises(TruncatedFile):
        read_cloud(tmp_path / "bad.pcl")
    with pytest.raises(BadMagic):
        read_pcl(tmp_path / "c.xyz")


@pytest.mark.slow
def test_ground_truth_matches_rendered_depth():
    spec = SceneSpec(seed=3, image_size=(96, 96), gsd=0.2, buildings=3)
    cam = make_rig(spec)[0]
    terrain = make_terrain(spec, [cam])
    ref = render(terrain, cam)
    cloud = PointCloud(lidar_cloud(terrain, density=6.0, seed=1))
    # a tight edge cap keeps triangles from bridging roofs and ground
    gt = ground_truth(cloud, cam, VisibilityConfig(range_epsilon=0.5), edge_cap=6)
    both = gt.valid
    assert both.mean() > 0.5
    err = np.abs(gt.depth[both] - ref.depth[both])
    assert np.median(err) < 0.05
    assert np.mean(err < 0.5) > 0.98
