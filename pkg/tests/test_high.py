import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffdetect import high
from ffdetect.high import (RegionPair, depth_coherence, detect_shadows, estimate_light_dir,
                           pair_shadows, pseudo_depth, reflection_symmetry, shadow_consistency)
from ffdetect.tensor import Tensor


def blob_scene(size=48, centre=(30, 20), radius=5):
    img = np.full((size, size, 3), 170, np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    dark = (yy - centre[0]) ** 2 + (xx - centre[1]) ** 2 <= radius ** 2
    img[dark] = 30
    return img, dark


def pair(obj, shadow, sid=1):
    return RegionPair(obj, shadow, sid, sid)


def test_single_dark_blob_is_one_region():
    img, dark = blob_scene()
    shadow_map, regions = detect_shadows(img)
    assert len(regions) == 1
    np.testing.assert_array_equal(shadow_map > 0, dark)
    cx, cy = regions[0].centroid
    assert (cx, cy) == pytest.approx((20.0, 30.0))


def test_inverted_blob_has_no_shadow():
    img, _ = blob_scene()
    assert detect_shadows(255 - img)[1] == []


def test_uniform_image_has_no_shadow():
    assert detect_shadows(np.full((32, 32, 3), 90, np.uint8))[1] == []


def test_small_specks_dropped():
    img = np.full((32, 32, 3), 170, np.uint8)
    img[5:9, 5:9] = 10  # 16 px, below the minimum area
    assert detect_shadows(img)[1] == []


def test_pairing_yields_pair_per_region():
    img, _ = blob_scene()
    shadow_map, regions = detect_shadows(img)
    pairs = pair_shadows(img, shadow_map, regions)
    assert len(pairs) == 1 and pairs[0].shadow_centroid == regions[0].centroid


def test_consistency_aligned_and_opposite():
    light = (0.0, -1.0)  # light above: shadows fall downwards (+y)
    assert shadow_consistency([pair((10, 10), (10, 20))], light) == [pytest.approx(1.0)]
    assert shadow_consistency([pair((10, 10), (10, 0))], light) == [pytest.approx(-1.0)]
    assert shadow_consistency([pair((10, 10), (20, 10))], light) == [pytest.approx(0.0, abs=1e-15)]


def test_consistency_empty_is_neutral():
    assert shadow_consistency([], (1.0, 0.0)) == [1.0]


def test_consistency_coincident_centroids_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        out = shadow_consistency([pair((3, 3), (3, 3)), pair((0, 0), (-5, 0), 2)], (1.0, 0.0))
    assert out == [pytest.approx(1.0)]
    assert "coincide" in caplog.text


def test_consistency_zero_light_rejected():
    with pytest.raises(ValueError):
        shadow_consistency([], (0.0, 0.0))


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_consistency_is_a_cosine(ox, oy, sx, sy):
    out = shadow_consistency([pair((ox, oy), (sx, sy))], (0.6, 0.8))
    assert all(-1.0 <= s <= 1.0 for s in out)


def test_light_direction_points_at_bright_corner():
    img = np.full((32, 32, 3), 50, np.uint8)
    img[:4, -4:] = 255
    v = estimate_light_dir(img)
    assert v[0] > 0 and v[1] < 0
    assert np.hypot(*v) == pytest.approx(1.0)


def test_reflection_mirror_scores_one(rng):
    top = rng.uniform(size=(8, 10))
    plane = np.vstack([top, top[::-1]])
    assert reflection_symmetry(plane) == pytest.approx(1.0)
    assert reflection_symmetry(np.vstack([top, -top[::-1]])) == pytest.approx(-1.0)


def test_reflection_flat_and_bad_axis():
    assert reflection_symmetry(np.full((10, 10), 0.4)) == 0.0
    with pytest.raises(ValueError):
        reflection_symmetry(np.zeros((10, 10)), axis_row=0)
    with pytest.raises(ValueError):
        reflection_symmetry(np.zeros((10, 10)), axis_row=10)


def test_reflection_uses_custom_axis(rng):
    band = rng.uniform(size=(3, 9))
    plane = np.vstack([rng.uniform(size=(4, 9)), band, band[::-1], rng.uniform(size=(2, 9))])
    assert reflection_symmetry(plane[4:], axis_row=3) == pytest.approx(1.0)


def test_pseudo_depth_constant_and_range(rng):
    np.testing.assert_array_equal(pseudo_depth(np.full((16, 16, 3), 77, np.uint8)), 0.5)
    z = pseudo_depth(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    assert z.min() == 0.0 and z.max() == 1.0


def test_external_depth_used_and_checked():
    img = np.zeros((8, 8, 3), np.uint8)
    d = np.linspace(0, 1, 64).reshape(8, 8)
    np.testing.assert_array_equal(pseudo_depth(img, d), d)
    with pytest.raises(ValueError):
        pseudo_depth(img, np.zeros((4, 4)))


def test_depth_coherence_values():
    assert depth_coherence(np.full((6, 6), 0.3)) == 0.0
    ramp = np.tile(np.arange(5) * 0.25, (5, 1))
    assert depth_coherence(ramp) == pytest.approx(-0.25)
    assert depth_coherence(ramp, lam=1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        depth_coherence(ramp, lam=-1)


def test_smooth_depth_scores_above_noisy(rng):
    smooth = np.tile(np.linspace(0, 1, 16), (16, 1))
    noisy = rng.uniform(size=(16, 16))
    assert depth_coherence(smooth) > depth_coherence(noisy)


def test_high_features_and_branch():
    img, _ = blob_scene(48)
    f = high.high_features(img)
    assert f.shape == (48, 48, 4)
    assert np.all(f[..., 0] == f[0, 0, 0])
    branch = high.HighBranch(np.random.default_rng(0))
    assert branch(Tensor(f[None]), 6).shape == (1, 36, 256)
    assert high.high_branch_forward(img, branch, 6).shape == (36, 256)
