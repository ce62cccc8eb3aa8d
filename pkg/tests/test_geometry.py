import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import nadir_camera, random_rotation, tilted_nadir
from sweepmatch.errors import (
    CoincidentCenters,
    DegenerateConfiguration,
    DegenerateProjection,
    InputError,
    InsufficientCorrespondences,
    NoConsensus,
    RayParallelToPlane,
    SingularTransform,
    SizeMismatch,
)
from sweepmatch.geometry import (
    CameraPinhole,
    Correspondence,
    RansacConfig,
    apply_transform,
    backproject,
    backproject_points,
    compose,
    dlt_homography,
    elevation_to_depth,
    epipolar_prior,
    estimate_homography,
    homography_prior,
    homography_transform,
    identity_transform,
    invert,
    look_at_rotation,
    plane_homography,
    project,
    project_points,
    quarter_turn,
    read_cameras,
    rectify_calibrated,
    to_grid,
    write_cameras,
)


def random_homography(rng):
    m = np.eye(3) + rng.normal(0, 0.1, (3, 3))
    m[2, :2] = rng.normal(0, 1e-3, 2)
    return m / m[2, 2]


def apply_h(m, pts):
    hom = np.c_[pts, np.ones(len(pts))] @ m.T
    return hom[:, :2] / hom[:, 2:]


# -- cameras -------------------------------------------------------------------


def test_camera_validation():
    with pytest.raises(InputError):
        nadir_camera(focal=0.0)
    with pytest.raises(InputError):
        CameraPinhole(100, (5, 5), np.diag([1.0, 1.0, -1.0]), (0, 0, 0), (10, 10))
    with pytest.raises(InputError):
        CameraPinhole(100, (5, 5), np.eye(3) * 1.1, (0, 0, 0), (10, 10))
    with pytest.raises(InputError):
        CameraPinhole(100, (10, 5), np.eye(3), (0, 0, 0), (10, 10))


def test_projection_matrix_agrees_with_project(rng):
    cam = CameraPinhole(700.0, (30.2, 20.7), random_rotation(rng), rng.normal(size=3), (64, 48))
    pts = cam.center + rng.normal(size=(20, 3)) + 5 * cam.rotation[2]
    pix, _ = project_points(cam, pts)
    hom = np.c_[pts, np.ones(20)] @ cam.projection_matrix.T
    np.testing.assert_allclose(hom[:, :2] / hom[:, 2:], pix, atol=1e-9)


def test_round_trips_depth_and_elevation(rng):
    for _ in range(20):
        cam = CameraPinhole(rng.uniform(200, 2000), (rng.uniform(0, 63), rng.uniform(0, 47)),
                            tilted_nadir(rng), (rng.normal(), rng.normal(), 100.0), (64, 48))
        pix = rng.uniform(0, 63, (100, 2))
        depth = rng.uniform(50, 150, 100)
        pts = backproject(cam, pix, depth=depth)
        back, z = project(cam, pts)
        np.testing.assert_allclose(back, pix, rtol=0, atol=1e-9)
        np.testing.assert_allclose(z, depth, rtol=1e-12)
        elev = rng.uniform(-5, 30, 100)
        pts = backproject(cam, pix, elevation=elev)
        np.testing.assert_allclose(pts[:, 2], elev, atol=1e-9)
        np.testing.assert_allclose(project(cam, pts)[0], pix, atol=1e-9)


def test_project_behind_camera_raises(stereo_pair):
    ref, _ = stereo_pair
    with pytest.raises(DegenerateProjection):
        project(ref, (0.0, 0.0, 200.0))
    pix, z = project_points(ref, [[0.0, 0.0, 200.0]])
    assert np.isnan(pix).all() and z[0] < 0


def test_backproject_parallel_ray():
    cam = CameraPinhole(100.0, (5, 5), np.eye(3), (0, 0, 0), (11, 11))
    horizon = CameraPinhole(100.0, (5, 5), look_at_rotation((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)), (0, 0, 10), (11, 11))
    with pytest.raises(RayParallelToPlane):
        backproject(horizon, (5.0, 5.0), elevation=0.0)
    pts, ok = backproject_points(horizon, [[5.0, 5.0], [5.0, 9.0]], elevation=0.0)
    assert ok.tolist() == [False, True]
    assert np.isnan(pts[0]).all()
    with pytest.raises(InputError):
        backproject_points(cam, [[0, 0]])


def test_elevation_to_depth_nadir_is_height_difference():
    cam = nadir_camera((1.0, 2.0, 100.0))
    elev = np.full((48, 64), 7.5)
    np.testing.assert_allclose(elevation_to_depth(cam, elev), 92.5, rtol=1e-12)
    valid = np.ones((48, 64), bool)
    valid[3, 4] = False
    assert np.isnan(elevation_to_depth(cam, elev, valid)[3, 4])


def test_scaled_camera_maps_pixel_centers(rng):
    cam = nadir_camera((0.3, -0.2, 80.0), size=(64, 48))
    small = cam.scaled(4)
    assert small.image_size == (16, 12)
    pts = backproject(cam, rng.uniform(0, 47, (10, 2)), depth=80.0)
    big, _ = project(cam, pts)
    sm, _ = project(small, pts)
    np.testing.assert_allclose(sm, (big + 0.5) / 4 - 0.5, atol=1e-9)


def test_camera_file_round_trip(tmp_path, rng):
    cams = [CameraPinhole(812.5, (31.5, 20.25), random_rotation(rng), rng.normal(size=3), (64, 48), f"c{i}") for i in range(3)]
    write_cameras(tmp_path / "cams.txt", cams)
    back = read_cameras(tmp_path / "cams.txt")
    for a, b in zip(cams, back):
        assert a.name == b.name and a.image_size == b.image_size and a.focal == b.focal
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.center, b.center)


# -- planar transforms -----------------------------------------------------------


@pytest.mark.parametrize("turns", [0, 1, 2, 3, 5])
def test_quarter_turn_matches_rot90(turns, rng):
    img = rng.random((5, 7))
    t = quarter_turn((7, 5), turns)
    out, ok = apply_transform(img, t)
    assert ok.all()
    np.testing.assert_array_equal(out, np.rot90(img, -turns))


def test_compose_and_invert(rng):
    a = homography_transform(random_homography(rng), (20, 20))
    b = quarter_turn((20, 20), 1)
    ab = compose(a, b)
    pts = rng.uniform(0, 19, (30, 2))
    np.testing.assert_allclose(ab.map_points(pts), b.map_points(a.map_points(pts)), atol=1e-9)
    np.testing.assert_allclose(invert(ab).map_points(ab.map_points(pts)), pts, atol=1e-9)
    with pytest.raises(SizeMismatch):
        compose(a, quarter_turn((10, 20), 1))


def test_grid_transform_matches_homography(rng):
    t = homography_transform(random_homography(rng), (16, 12))
    g = to_grid(t)
    assert g.kind == "grid"
    img = rng.random((12, 16))
    a, oka = apply_transform(img, t)
    b, okb = apply_transform(img, g)
    both = oka & okb
    assert both.sum() > 50
    np.testing.assert_allclose(a[both], b[both], atol=1e-9)
    inv = invert(g)
    assert inv.source_size == g.target_size


def test_singular_homography_rejected():
    with pytest.raises(SingularTransform):
        homography_transform(np.zeros((3, 3)), (4, 4))


def test_identity_warp_is_exact(rng):
    img = rng.random((6, 9))
    out, ok = apply_transform(img, identity_transform((9, 6)))
    assert ok.all() and np.array_equal(out, img)
    with pytest.raises(SizeMismatch):
        apply_transform(img, identity_transform((6, 9)))


# -- homography estimation -----------------------------------------------------------


def test_dlt_exact_on_minimal_sets(rng):
    for _ in range(100):
        m = random_homography(rng)
        a = rng.uniform(0, 100, (4, 2))
        b = apply_h(m, a)
        fit = estimate_homography((a, b), RansacConfig(threshold=1e-3), (100, 100))
        probe = rng.uniform(0, 100, (20, 2))
        assert np.abs(fit.transform.map_points(probe) - apply_h(m, probe)).max() <= 1e-6


def test_ransac_with_thirty_percent_outliers():
    rng = np.random.default_rng(7)
    good = 0
    for trial in range(100):
        m = random_homography(rng)
        a = rng.uniform(0, 200, (60, 2))
        b = apply_h(m, a) + rng.normal(0, 0.1, (60, 2))
        bad = rng.choice(60, 18, replace=False)
        b[bad] = rng.uniform(0, 200, (18, 2))
        fit = estimate_homography((a, b), RansacConfig(threshold=1.0, seed=trial), (200, 200))
        probe = rng.uniform(0, 200, (50, 2))
        good += np.abs(fit.transform.map_points(probe) - apply_h(m, probe)).max() <= 0.5
    assert good >= 95


def test_estimate_homography_errors(rng):
    pts = rng.uniform(0, 10, (3, 2))
    with pytest.raises(InsufficientCorrespondences):
        estimate_homography((pts, pts))
    line = np.c_[np.arange(6.0), 2 * np.arange(6.0)]
    with pytest.raises(DegenerateConfiguration):
        estimate_homography((line, line), RansacConfig(max_iterations=50))
    a = rng.uniform(0, 10, (8, 2))
    with pytest.raises(NoConsensus):
        estimate_homography((a, rng.uniform(0, 10, (8, 2))), RansacConfig(threshold=1e-6, min_inliers=6, max_iterations=50))


def test_correspondence_objects_and_weights(rng):
    m = random_homography(rng)
    a = rng.uniform(0, 50, (10, 2))
    b = apply_h(m, a)
    corrs = [Correspondence(tuple(p), tuple(q), 2.0) for p, q in zip(a, b)]
    fit = estimate_homography(corrs, source_size=(50, 50))
    assert fit.inlier_count == 10
    with pytest.raises(InputError):
        Correspondence((0, 0), (0, 0), -1.0)
    np.testing.assert_allclose(dlt_homography(a, b, np.ones(10)), m / m[2, 2], atol=1e-8)


def test_plane_homography_equals_project_backproject(rng):
    cam_a = CameraPinhole(600, (32, 24), tilted_nadir(rng), (0, 0, 100), (64, 48))
    cam_b = CameraPinhole(650, (30, 22), tilted_nadir(rng), (5, 1, 98), (64, 48))
    m = plane_homography(cam_a, cam_b, 12.0)
    pix = rng.uniform(0, 63, (40, 2))
    expect, _ = project(cam_b, backproject(cam_a, pix, elevation=12.0))
    np.testing.assert_allclose(apply_h(m, pix), expect, atol=1e-8)


# -- rectification and priors -----------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1, 1), st.floats(-1, 1))
def test_rectification_rows_agree(seed, bx, by):
    rng = np.random.default_rng(seed)
    if abs(bx) + abs(by) < 0.05:
        bx = 0.5
    cam_a = CameraPinhole(500, (32, 24), tilted_nadir(rng), (0, 0, 100), (64, 48))
    cam_b = CameraPinhole(520, (31, 23), tilted_nadir(rng), (8 * bx, 8 * by, 101), (64, 48))
    pair = rectify_calibrated(cam_a, cam_b)
    pts = np.c_[rng.uniform(-20, 20, (100, 2)), rng.uniform(0, 30, 100)]
    pa, _ = project(cam_a, pts)
    pb, _ = project(cam_b, pts)
    ra = pair.transform_a.map_points(pa)
    rb = pair.transform_b.map_points(pb)
    assert np.abs(ra[:, 1] - rb[:, 1]).max() < 0.1
    # rectified cameras reproduce the mapped pixels
    np.testing.assert_allclose(project(pair.camera_a, pts)[0], ra, atol=1e-6)


def test_rectification_of_x_baseline_nadir_pair_is_identity(stereo_pair):
    ref, query = stereo_pair
    pair = rectify_calibrated(ref, query)
    assert pair.transform_a.is_identity() and pair.transform_b.is_identity()


def test_rectification_coincident_centers(stereo_pair):
    ref, _ = stereo_pair
    with pytest.raises(CoincidentCenters):
        rectify_calibrated(ref, ref)


def test_epipolar_prior_with_rotation(stereo_pair):
    ref, query = stereo_pair
    p = epipolar_prior(ref, query, rotation_align=1)
    assert p.reference_transform(ref.image_size).target_size == (48, 64)
    with pytest.raises(InputError):
        epipolar_prior(ref, query, rotation_align=4)


def test_homography_prior_aligns_plane(stereo_pair):
    ref, query = stereo_pair
    prior = homography_prior(ref, query, 5.0)
    t = prior.query_transform(query.image_size)
    pix = np.array([[10.0, 10.0], [40.0, 30.0]])
    qpix, _ = project(query, backproject(ref, pix, elevation=5.0))
    np.testing.assert_allclose(t.map_points(qpix), pix, atol=1e-6)
    assert prior.reference_transform(ref.image_size).is_identity()
