import math

import numpy as np
import pytest

from nalsuper import attention as A
from nalsuper import tensor as T
from nalsuper.errors import DimensionError
from nalsuper.params import named_parameters
from nalsuper.tensor import Tensor


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_channel_attention_matches_numpy():
    rng = np.random.default_rng(0)
    p = A.init_channel_attention(4, 2, rng)
    x = rng.normal(size=(4, 3, 5))
    pooled = x.mean(axis=(1, 2))
    hidden = np.maximum(p.conv1.weight.data[:, :, 0, 0] @ pooled + p.conv1.bias.data, 0)
    gate = _sigmoid(p.conv2.weight.data[:, :, 0, 0] @ hidden + p.conv2.bias.data)
    out = A.channel_attention(Tensor(x), p).data
    np.testing.assert_allclose(out, x * gate[:, None, None], atol=1e-12)


def test_pixel_attention_mask_shape_and_range():
    rng = np.random.default_rng(1)
    p = A.init_pixel_attention(4, 1, rng)
    x = Tensor(rng.normal(size=(4, 3, 5)))
    mask = A.pixel_mask(x, p).data
    assert mask.shape == (1, 3, 5)
    assert ((mask > 0) & (mask < 1)).all()
    np.testing.assert_allclose(A.pixel_attention(x, p).data, mask * x.data)


def test_default_delta():
    assert A.default_delta(4, 8, 8) == pytest.approx(math.sqrt(256))


def test_layer_attention_is_3x3_and_row_stochastic():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 4))
        p = A.init_cafb(c, rng, learnable_delta=bool(seed % 2))
        f_in = Tensor(rng.normal(scale=3.0, size=(3 * c, 4, 5)))
        fused, attn = A.layer_attention(f_in, p)
        assert attn.shape == (3, 3)
        assert fused.shape == f_in.shape
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)


def test_layer_attention_matches_reference():
    rng = np.random.default_rng(7)
    c, h, w = 2, 3, 3
    p = A.init_cafb(c, rng)
    x = rng.normal(size=(3 * c, h, w))
    fused, attn = A.layer_attention(Tensor(x), p)
    q = p.q_depth(p.q_point(Tensor(x))).data.reshape(3, -1)
    k = p.k_depth(p.k_point(Tensor(x))).data.reshape(3, -1)
    v = p.v_depth(p.v_point(Tensor(x))).data.reshape(3, -1)
    logits = q @ k.T / math.sqrt(c * h * w)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    ref = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attn.data, ref, atol=1e-12)
    np.testing.assert_allclose(fused.data, (ref @ v).reshape(x.shape), atol=1e-12)


def test_learnable_delta_starts_equal_to_fixed():
    rng = np.random.default_rng(3)
    fixed = A.init_cafb(2, np.random.default_rng(3))
    learn = A.init_cafb(2, np.random.default_rng(3), learnable_delta=True)
    x = Tensor(rng.normal(size=(6, 4, 4)))
    np.testing.assert_allclose(A.layer_attention(x, learn)[1].data, A.layer_attention(x, fixed)[1].data, atol=1e-15)
    assert learn.log_delta is not None and learn.log_delta.requires_grad


def test_cafb_zero_out_projection_gives_zero():
    rng = np.random.default_rng(4)
    p = A.init_cafb(2, rng)
    xs = [Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
    np.testing.assert_array_equal(A.cafb(*xs, p).data, 0.0)


def test_cafb_rejects_mismatched_inputs():
    p = A.init_cafb(2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        A.cafb(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 4, 3))), p)


def test_ifa_gradients_reach_every_parameter():
    rng = np.random.default_rng(5)
    p = A.init_ifa(2, 1, rng)
    p.cafb.out_proj.weight.data[...] = rng.normal(size=p.cafb.out_proj.weight.shape)
    # keep the tiny relu hidden layers active so every weight sees gradient
    p.ca.conv1.bias.data[...] = 5.0
    p.pa.conv1.bias.data[...] = 5.0
    a = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    T.backward(T.sum_all(T.square(A.ifa_forward(a, b, p))))
    for name, param in named_parameters(p):
        assert param.grad is not None and np.any(param.grad != 0), name
    assert np.any(a.grad != 0) and np.any(b.grad != 0)
