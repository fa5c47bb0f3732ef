import math

import numpy as np
import pytest

from ffdetect import model as M
from ffdetect import tensor as T
from ffdetect.model import (Encoder, FeatureBatch, FusionNet, ModelConfig, ModelOutputs,
                            cross_attention, fuse, positional_encoding, total_loss)
from ffdetect.tensor import Graph, ShapeError, Tensor


def random_tokens(rng, n=16, d=256, b=None):
    shape = (n, d) if b is None else (b, n, d)
    return Tensor(rng.standard_normal(shape))


def test_positional_encoding_layout():
    pe = positional_encoding(4, 8)
    assert pe.shape == (16, 8)
    # tokens in the same row share the first half, same column the second
    np.testing.assert_array_equal(pe[1, :4], pe[2, :4])
    np.testing.assert_array_equal(pe[1, 4:], pe[5, 4:])
    assert not np.array_equal(pe[0], pe[1])


def test_encoder_shapes_and_errors(rng):
    enc = Encoder(np.random.default_rng(0), layers=2)
    assert enc(random_tokens(rng, 16)).shape == (16, 256)
    assert enc(random_tokens(rng, 9, b=2)).shape == (2, 9, 256)
    with pytest.raises(ShapeError):
        enc(random_tokens(rng, 16, 128))
    with pytest.raises(ShapeError):
        enc(random_tokens(rng, 10))


def test_encoder_attention_rows_sum_to_one(rng):
    enc = Encoder(np.random.default_rng(1), layers=4)
    enc(random_tokens(rng, 64, b=2))
    maps = enc.attention_maps()
    assert len(maps) == 4
    for a in maps:
        assert a.shape == (2, 8, 64, 64)
        assert np.max(np.abs(a.sum(-1) - 1)) <= 1e-12


def test_encoder_gradient_four_tokens():
    rng = np.random.default_rng(2)
    enc = Encoder(rng, layers=1)
    w = Tensor(rng.standard_normal((4, 256)))
    x = Tensor(rng.standard_normal((4, 256)))
    coords = [tuple(c) for c in rng.integers(0, [4, 256], (10, 2))]
    assert T.finite_diff_check(lambda t: T.sum(T.mul(enc(t), w)), x, coords=coords) < 1e-5


def test_cross_attention_single_key_returns_k(rng):
    q, k = random_tokens(rng, 5), random_tokens(rng, 1)
    out = cross_attention(q, k).data
    assert np.array_equal(out, np.repeat(k.data, 5, axis=0))


def test_cross_attention_convex_hull(rng):
    for _ in range(20):
        n, m = rng.integers(1, 9, 2)
        q = Tensor(rng.standard_normal((n, 16)) * 3)
        k = Tensor(rng.standard_normal((m, 16)) * 3)
        out = cross_attention(q, k).data
        assert np.all(out <= k.data.max(0) + 1e-12) and np.all(out >= k.data.min(0) - 1e-12)


def test_cross_attention_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        cross_attention(random_tokens(rng, 4, 8), random_tokens(rng, 4, 16))


def test_fuse_zero_cross_is_plain_sum(rng):
    a, b, c = (random_tokens(rng, 4, 8) for _ in range(3))
    np.testing.assert_array_equal(fuse(a, b, c, zero_cross=True).data, (a.data + b.data) + c.data)


def test_fuse_six_terms(rng):
    a, b, c = (random_tokens(rng, 4, 8) for _ in range(3))
    ref = a.data + b.data + c.data
    for q, k in ((a, b), (b, c), (a, c)):
        ref = ref + cross_attention(q, k).data
    np.testing.assert_allclose(fuse(a, b, c).data, ref, rtol=0, atol=1e-14)


def test_fuse_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse(random_tokens(rng, 4, 8), random_tokens(rng, 5, 8), random_tokens(rng, 4, 8))


def make_outputs(rng, b=3, hw=(8, 8)):
    return ModelOutputs(Tensor(rng.standard_normal((b, 2))), Tensor(rng.standard_normal((b,) + hw)),
                        Tensor(rng.standard_normal((b, 7))))


def test_total_is_weighted_sum(rng):
    out = make_outputs(rng)
    masks = (rng.uniform(size=(3, 8, 8)) > 0.5).astype(float)
    lb = total_loss(out, [0, 1, 1], masks, [0, 2, 5])
    assert lb.weights == (1.0, 0.5, 0.3)
    assert abs(float(lb.total.data) - (lb.l_cls + 0.5 * lb.l_loc + 0.3 * lb.l_type)) <= 1e-12


def test_cls_loss_at_half_is_ln2():
    out = ModelOutputs(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 8, 8))), Tensor(np.zeros((4, 7))))
    for labels in ([0, 0, 0, 0], [1, 0, 1, 1]):
        assert abs(float(M.cls_loss(out, np.array(labels)).data) - math.log(2)) <= 1e-12


def test_type_loss_uniform_is_log7():
    out = ModelOutputs(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 7))))
    assert float(M.type_loss(out, np.array([3, 6])).data) == pytest.approx(math.log(7), abs=1e-12)


def test_loc_loss_hand_value():
    # sigmoid(0) = 0.5 everywhere; mask covers half of a 2x4 map
    out = ModelOutputs(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 7))))
    m = np.array([[[1, 1, 1, 1], [0, 0, 0, 0]]], dtype=float)
    dice = (2 * 2.0 + 1) / (4.0 + 4.0 + 1)
    expected = math.log(2) + (1 - dice)
    assert float(M.loc_loss(out, m).data) == pytest.approx(expected, abs=1e-12)


def test_total_loss_validates(rng):
    out = make_outputs(rng)
    masks = np.zeros((3, 8, 8))
    with pytest.raises(ValueError):
        total_loss(out, [0, 2, 1], masks, [0, 1, 1])
    with pytest.raises(ValueError):
        total_loss(out, [0, 1, 1], masks, [0, 1, 9])
    with pytest.raises(ShapeError):
        total_loss(out, [0, 1, 1], np.zeros((3, 4, 4)), [0, 1, 1])


def small_batch(rng, size=16, b=2):
    return FeatureBatch(Tensor(rng.uniform(size=(b, size, size, 3))),
                        rng.standard_normal((b, size, size, 5)), rng.uniform(size=(b, size, size, 4)))


@pytest.mark.parametrize("fusion", M.FUSIONS)
def test_fusionnet_output_shapes(rng, fusion):
    net = FusionNet(ModelConfig(image_size=16, fusion=fusion, layers=1), seed=0)
    out = net(small_batch(rng))
    assert out.cls_logits.shape == (2, 2)
    assert out.mask_logits.shape == (2, 16, 16)
    assert out.type_logits.shape == (2, 7)
    np.testing.assert_allclose(out.type_hat.sum(-1), 1.0, atol=1e-12)


def test_same_seed_same_weights():
    a = FusionNet(ModelConfig(image_size=16, layers=1), seed=4).state_dict()
    b = FusionNet(ModelConfig(image_size=16, layers=1), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_disabled_branch_tokens_are_zero(rng):
    net = FusionNet(ModelConfig(image_size=16, branches=("low",), layers=1), seed=0)
    hs = net.encode(small_batch(rng))
    assert not np.any(hs["mid"].data) and not np.any(hs["high"].data)
    assert np.any(hs["low"].data)


def test_zeroed_branch_reduced_sum(rng):
    h_low, h_high = random_tokens(rng, 16, b=2), random_tokens(rng, 16, b=2)
    zero = Tensor(np.zeros((2, 16, 256)))
    got = fuse(h_low, zero, h_high).data
    # CA(q, 0) = 0 and CA(0, K) = token-mean of K
    assert not np.any(cross_attention(h_low, zero).data)
    ref = h_low.data + h_high.data + h_high.data.mean(axis=1, keepdims=True) + cross_attention(h_low, h_high).data
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_cached_low_features_match_recomputed(rng):
    from ffdetect.features import low_arrays
    net = FusionNet(ModelConfig(image_size=16, layers=1), seed=0)
    batch = small_batch(rng)
    cached = FeatureBatch(batch.rgb, batch.mid, batch.high, low_arrays(batch.rgb.data))
    np.testing.assert_allclose(net(batch).cls_logits.data, net(cached).cls_logits.data, atol=1e-12)


def test_pixel_gradient_flows(rng):
    net = FusionNet(ModelConfig(image_size=16, layers=1), seed=0)
    batch = small_batch(rng)
    batch.rgb.requires_grad = True
    with Graph() as g:
        loss = M.cls_loss(net(batch), np.array([1, 0]))
    g.backward(loss)
    assert batch.rgb.grad is not None and np.any(batch.rgb.grad)


def test_bad_config():
    with pytest.raises(ValueError):
        ModelConfig(branches=("low", "sky"))
    with pytest.raises(ValueError):
        ModelConfig(branches=())
    with pytest.raises(ValueError):
        ModelConfig(fusion="max")
