import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffdetect import low
from ffdetect import tensor as T
from ffdetect.low import (SRM_BANK, LowBranch, block_dct, block_idct, haar_dwt, haar_idwt,
                          srm_residuals)
from ffdetect.tensor import Tensor


def dct_oracle(block):
    out = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            acc = 0.0
            for x in range(8):
                for y in range(8):
                    acc += (block[x, y] * np.cos(np.pi * u * (2 * x + 1) / 16)
                            * np.cos(np.pi * v * (2 * y + 1) / 16))
            out[u, v] = acc
    return out


def test_dct_matches_double_sum(rng):
    blocks = rng.uniform(0, 1, (4, 8, 8))
    grid = block_dct(blocks.transpose(1, 0, 2).reshape(8, 32))
    for j in range(4):
        assert np.max(np.abs(grid[0, j] - dct_oracle(blocks[j]))) < 1e-10


def test_dct_constant_block():
    d = block_dct(np.ones((8, 8)))[0, 0]
    assert d[0, 0] == pytest.approx(64, abs=1e-12)
    d[0, 0] = 0
    assert np.max(np.abs(d)) < 1e-12


@pytest.mark.parametrize("u0", range(8))
def test_dct_cosine_row(u0):
    x = np.arange(8)
    block = np.repeat(np.cos(np.pi * u0 * (2 * x + 1) / 16)[:, None], 8, axis=1)
    d = block_dct(block)[0, 0]
    energy = (d ** 2).sum(axis=1)
    assert np.argmax(energy) == u0
    assert energy[u0] / energy.sum() > 1 - 1e-12


def test_dct_inverse(rng):
    g = rng.uniform(0, 1, (16, 24))
    assert np.max(np.abs(block_idct(block_dct(g)) - g)) < 1e-9


def test_dct_rejects_ragged():
    with pytest.raises(ValueError, match="multiples of 8"):
        block_dct(np.zeros((12, 16)))


def test_haar_constant_is_zero():
    for band in haar_dwt(np.full((10, 14), 0.37)):
        assert np.all(band == 0)


def test_haar_vertical_stripes():
    a, b = 0.8, 0.3
    g = np.tile([a, b], (6, 4))
    lh, hl, hh = haar_dwt(g)
    np.testing.assert_allclose(lh, a - b, atol=1e-15)
    assert np.max(np.abs(hl)) < 1e-15 and np.max(np.abs(hh)) < 1e-15


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_haar_reconstruction(h, w, seed):
    g = np.random.default_rng(seed).uniform(-1, 1, (2 * h, 2 * w))
    assert np.max(np.abs(haar_idwt(*haar_dwt(g, keep_ll=True)) - g)) < 1e-12


def test_haar_locally_constant_cells():
    g = np.kron(np.random.default_rng(0).uniform(size=(3, 4)), np.ones((2, 2)))
    for band in haar_dwt(g):
        assert np.all(band == 0)


def test_haar_rejects_odd():
    with pytest.raises(ValueError):
        haar_dwt(np.zeros((5, 4)))


def test_srm_bank_contract():
    assert SRM_BANK.shape == (30, 5, 5)
    assert np.all(low.SRM_TAPS.sum(axis=(1, 2)) == 0)
    assert low.srm_digest() == low.SRM_SHA256
    assert len({k.tobytes() for k in SRM_BANK}) == 30


def test_srm_constant_image_is_zero():
    r = srm_residuals(np.full((16, 16, 3), 90, np.uint8))
    assert r.shape == (16, 16, 30)
    assert np.max(np.abs(r)) < 1e-15


def test_srm_first_order_on_ramp():
    # kernel 0 is "right neighbour minus centre": a ramp of slope s gives s
    slope = 0.01
    gray = np.tile(np.arange(16) * slope, (16, 1))
    r = low.srm_features(Tensor(gray[None, :, :, None])).data[0, :, :, 0]
    np.testing.assert_allclose(r[:, :-1], slope, atol=1e-14)


def test_srm_golden():
    img = np.random.default_rng(16).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    r = np.round(srm_residuals(img), 10) + 0.0
    digest = hashlib.sha256(np.ascontiguousarray(r, "<f8").tobytes()).hexdigest()
    assert digest == "411fe9eb3c99d986fd14a2ab0808c2211c5966f37e08d82705a031a8114cb0f7"


def test_differentiable_extractors_match_numpy(rng):
    rgb = rng.uniform(0, 1, (2, 16, 16, 3))
    dct, dwt, _ = low.low_features(Tensor(rgb))
    gray = rgb @ low.LUMA
    ref = block_dct(gray[1])
    np.testing.assert_allclose(dct.data[1].reshape(2, 2, 8, 8), ref, atol=1e-12)
    np.testing.assert_allclose(dwt.data[1], np.stack(haar_dwt(gray[1]), axis=-1), atol=1e-14)


def test_branch_shape_and_zero_image():
    branch = LowBranch(np.random.default_rng(0))
    feats = low.low_features(Tensor(np.zeros((1, 64, 64, 3))))
    out = branch(*feats, 8)
    assert out.shape == (1, 64, 256)
    assert np.all(out.data == 0)
    assert branch.num_parameters() < 200_000


def test_branch_gradient_16px():
    rng = np.random.default_rng(3)
    branch = LowBranch(rng)
    w = Tensor(rng.standard_normal((1, 4, 256)))

    def f(x):
        return T.sum(T.mul(branch(*low.low_features(x), 2), w))

    x = Tensor(rng.uniform(0.2, 0.8, (1, 16, 16, 3)))
    coords = [tuple(c) for c in rng.integers(0, [1, 16, 16, 3], (12, 4))]
    assert T.finite_diff_check(f, x, coords=coords) < 1e-5


def test_fixed_filters_are_not_parameters():
    names = [n for n, _ in LowBranch(np.random.default_rng(0)).named_parameters()]
    assert all(n.startswith(("conv_", "proj")) for n in names)
