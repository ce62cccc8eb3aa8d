import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepmatch.errors import (
    BadMagic,
    EmptyInput,
    InputError,
    PatchLargerThanImage,
    TruncatedFile,
    ZeroVariance,
)
from sweepmatch.features import (
    ExternalExtractor,
    FeatureMap,
    Image2D,
    PatchExtractor,
    RadiometricStats,
    downsample_features,
    downsample_image,
    extract_patch_descriptors,
    geometry_aware_features,
    normalize_radiometry,
    read_feature_map,
    renormalize,
    warp_feature_map,
    write_feature_map,
)
from sweepmatch.geometry import identity_transform, quarter_turn


def ncc(a, b):
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def test_patch_cosine_equals_ncc(rng):
    a = rng.random((12, 14))
    b = 0.5 * a + 0.3 * rng.random((12, 14)) + 0.1
    fa = extract_patch_descriptors(Image2D(a), 2)
    fb = extract_patch_descriptors(Image2D(b), 2)
    for y, x in [(2, 2), (5, 7), (9, 11)]:
        cos = fa.values[y, x] @ fb.values[y, x]
        assert cos == pytest.approx(ncc(a[y - 2:y + 3, x - 2:x + 3], b[y - 2:y + 3, x - 2:x + 3]), abs=1e-12)


def test_patch_descriptor_validity(rng):
    img = rng.random((10, 10))
    img[0:5, 0:5] = 0.5  # constant patch
    mask = np.ones((10, 10), bool)
    mask[8, 8] = False
    f = extract_patch_descriptors(Image2D(img, mask), 1)
    assert not f.valid_mask[0, :].any() and not f.valid_mask[:, -1].any()
    assert not f.valid_mask[2, 2]  # constant neighbourhood
    assert not f.valid_mask[7, 7]  # touches the invalid pixel
    assert f.unit_normalized
    norms = np.linalg.norm(f.values[f.valid_mask], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    assert np.all(f.values[~f.valid_mask] == 0)
    with pytest.raises(PatchLargerThanImage):
        extract_patch_descriptors(Image2D(np.zeros((3, 3))), 2)
    with pytest.raises(InputError):
        extract_patch_descriptors(Image2D(img), 0)


def test_radiometric_normalization(rng):
    ims = [Image2D(rng.random((5, 5))), Image2D(rng.random((4, 6)))]
    out, stats = normalize_radiometry(ims)
    pool = np.concatenate([o.ravel() for o in out])
    assert pool.mean() == pytest.approx(0, abs=1e-12)
    assert pool.std() == pytest.approx(1, abs=1e-12)
    again, _ = normalize_radiometry(ims, stats)
    np.testing.assert_array_equal(again[0], out[0])
    with pytest.raises(ZeroVariance):
        normalize_radiometry([Image2D(np.full((3, 3), 0.2))])
    with pytest.raises(EmptyInput):
        normalize_radiometry([Image2D(np.ones((2, 2)), np.zeros((2, 2), bool))])
    with pytest.raises(ZeroVariance):
        RadiometricStats(0.0, 0.0)


def test_renormalize_drops_zero_vectors():
    v = np.array([[3.0, 4.0], [0.0, 0.0], [1e-9, 0.0]])
    out, ok = renormalize(v, np.ones(3, bool))
    assert ok.tolist() == [True, False, False]
    np.testing.assert_allclose(out[0], [0.6, 0.8])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.booleans(), st.integers(0, 2**31))
def test_fmap_round_trip(tmp_path_factory, h, w, c, unit, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(h, w, c)).astype(np.float32)
    mask = rng.random((h, w)) > 0.3
    f = FeatureMap(vals, mask, unit)
    path = tmp_path_factory.mktemp("fm") / "f.fmap"
    write_feature_map(path, f)
    g = read_feature_map(path)
    np.testing.assert_array_equal(g.valid_mask, mask)
    np.testing.assert_array_equal(g.values, np.where(mask[:, :, None], vals, 0))
    assert g.unit_normalized == unit


def test_fmap_errors(tmp_path):
    p = tmp_path / "f.fmap"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        read_feature_map(p)
    write_feature_map(p, FeatureMap(np.ones((2, 2, 3)), np.ones((2, 2), bool)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncatedFile):
        read_feature_map(p)


def test_feature_map_validation():
    with pytest.raises(InputError):
        FeatureMap(np.ones((2, 2, 2)), np.ones((3, 2), bool))
    with pytest.raises(InputError):
        FeatureMap(np.full((2, 2, 1), np.nan), np.ones((2, 2), bool))
    f = FeatureMap(np.full((2, 2, 1), np.nan), np.zeros((2, 2), bool))
    assert np.all(f.values == 0)


def test_geometry_aware_identity_is_bare_extractor(rng):
    img = Image2D(rng.random((12, 12)))
    a = geometry_aware_features(img, identity_transform((12, 12)))
    b = PatchExtractor(2)(img)
    np.testing.assert_array_equal(a.values, b.values)


def test_geometry_aware_half_turn_is_exact_for_symmetric_extractor(rng):
    """Warping with a 180 degree turn and back only permutes pixels; an
    extractor that does not depend on orientation gives the same map."""
    img = Image2D(rng.random((9, 11)))

    def local_energy(im):
        v = im.intensities ** 2
        return FeatureMap(v[:, :, None], im.valid_mask)

    out = geometry_aware_features(img, quarter_turn((11, 9), 2), local_energy)
    np.testing.assert_allclose(out.values[:, :, 0], img.intensities ** 2, atol=1e-14)
    assert out.valid_mask.all()


def test_warp_feature_map_keeps_unit_norm(rng):
    f = extract_patch_descriptors(Image2D(rng.random((10, 10))), 1)
    g = warp_feature_map(f, quarter_turn((10, 10), 1))
    np.testing.assert_allclose(np.linalg.norm(g.values[g.valid_mask], axis=1), 1.0, atol=1e-12)


def test_downsampling(rng):
    img = Image2D(rng.random((8, 8)), gsd=0.1)
    small = downsample_image(img, 4)
    assert small.size == (2, 2) and small.gsd == pytest.approx(0.4)
    assert small.intensities[0, 0] == pytest.approx(img.intensities[:4, :4].mean())
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    assert not downsample_image(Image2D(img.intensities, mask), 2).valid_mask[0, 0]
    f = extract_patch_descriptors(img, 1)
    fs = downsample_features(f, 2)
    assert fs.size == (4, 4)
    assert not fs.valid_mask[0, 0]  # contains border pixels
    np.testing.assert_allclose(np.linalg.norm(fs.values[fs.valid_mask], axis=1), 1.0, atol=1e-12)


def test_external_extractor(tmp_path, rng):
    f = FeatureMap(rng.normal(size=(4, 5, 3)), np.ones((4, 5), bool))
    write_feature_map(tmp_path / "x.fmap", f)
    ext = ExternalExtractor(tmp_path / "x.fmap")
    g = ext(Image2D(np.zeros((4, 5))))
    np.testing.assert_allclose(g.values, f.values, atol=1e-6)
    with pytest.raises(InputError):
        ext(Image2D(np.zeros((5, 5))))
