"""Finite-difference verification suites for every differentiable op and the full model."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import attention as A
from . import tensor as T
from .losses import SsimConstants, l1_loss, ssim_loss, total_loss
from .network import ModelConfig, NaLSuperModel, forward, init_model
from .params import named_parameters
from .tensor import Tensor
from .text import DEFAULT_PROMPTS, embed_prompts, init_tcm, tcm_forward

# Step ladders; see finite_diff_check for why a ladder.
OP_STEPS = (1e-4, 1e-3, 1e-5, 1e-2, 1e-6)
MODEL_STEPS = (1e-5, 1e-3, 1e-4, 1e-6)
OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-3


def _leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _unary(op):
    def build(rng):
        x = _leaf(rng, 3, 4, 4, low=-2, high=2)
        r = Tensor(rng.standard_normal((3, 4, 4)))
        return (lambda: T.sum_all(T.mul(op(x), r))), [x]

    return build


def _binary(op, positive_b: bool = False, b_shape=(3, 4, 4)):
    def build(rng):
        a = _leaf(rng, 3, 4, 4)
        b = _leaf(rng, *b_shape, low=0.5 if positive_b else -1, high=2 if positive_b else 1)
        r = Tensor(rng.standard_normal((3, 4, 4)))
        return (lambda: T.sum_all(T.mul(op(a, b), r))), [a, b]

    return build


def _conv(k):
    def build(rng):
        x, w, b = _leaf(rng, 3, 4, 4), _leaf(rng, 2, 3, k, k), _leaf(rng, 2)
        r = Tensor(rng.standard_normal((2, 4, 4)))
        return (lambda: T.sum_all(T.mul(T.conv2d(x, w, b), r))), [x, w, b]

    return build


def _depthwise(rng):
    x, w, b = _leaf(rng, 3, 4, 4), _leaf(rng, 3, 1, 3, 3), _leaf(rng, 3)
    r = Tensor(rng.standard_normal((3, 4, 4)))
    return (lambda: T.sum_all(T.mul(T.depthwise_conv2d(x, w, b), r))), [x, w, b]


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    r = Tensor(rng.standard_normal((3, 2)))
    return (lambda: T.sum_all(T.mul(T.matmul(a, b), r))), [a, b]


def _softmax(rng):
    x = _leaf(rng, 4, 4, low=-3, high=3)
    r = Tensor(rng.standard_normal((4, 4)))
    return (lambda: T.sum_all(T.mul(T.softmax_rows(x), r))), [x]


def _gap(rng):
    x = _leaf(rng, 3, 4, 4)
    r = Tensor(rng.standard_normal((3, 1, 1)))
    return (lambda: T.sum_all(T.mul(T.global_avg_pool(x), r))), [x]


def _concat(rng):
    xs = [_leaf(rng, c, 4, 4) for c in (1, 2, 1)]
    r = Tensor(rng.standard_normal((4, 4, 4)))
    return (lambda: T.sum_all(T.mul(T.concat_channels(xs), r))), xs


def _reshape_permute(rng):
    x = _leaf(rng, 2, 3, 4)
    r = Tensor(rng.standard_normal((8, 3)))
    return (lambda: T.sum_all(T.mul(T.reshape(T.permute(x, (2, 0, 1)), (8, 3)), r))), [x]


def _transpose(rng):
    x = _leaf(rng, 3, 4)
    r = Tensor(rng.standard_normal((4, 3)))
    return (lambda: T.sum_all(T.mul(T.transpose(x), r))), [x]


def _mean(rng):
    x = _leaf(rng, 3, 4, 4)
    return (lambda: T.mul(T.mean_all(T.mul(x, x)), 3.0)), [x]


def _tcm(rng):
    c, h, w, m, d, d_tau = 2, 4, 4, 2, 4, 6
    p = init_tcm(c, d, d_tau, m, rng)
    p.w_out.data[...] = rng.uniform(-1, 1, p.w_out.shape)
    p.bias.data[...] = rng.uniform(-1, 1, p.bias.shape)
    x = _leaf(rng, c, h, w)
    text = Tensor(rng.standard_normal((m, d_tau)))
    r = Tensor(rng.standard_normal((c, h, w)))
    return (lambda: T.sum_all(T.mul(tcm_forward(x, text, p), r))), [x, p.w_q, p.w_k, p.w_v, p.bias, p.w_out]


def _channel_attention(rng):
    p = A.init_channel_attention(2, 1, rng)
    x = _leaf(rng, 2, 4, 4)
    r = Tensor(rng.standard_normal((2, 4, 4)))
    return (lambda: T.sum_all(T.mul(A.channel_attention(x, p), r))), [x, p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias]


def _pixel_attention(rng):
    p = A.init_pixel_attention(2, 1, rng)
    x = _leaf(rng, 2, 4, 4)
    r = Tensor(rng.standard_normal((2, 4, 4)))
    return (lambda: T.sum_all(T.mul(A.pixel_attention(x, p), r))), [x, p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias]


def _cafb(rng):
    p = A.init_cafb(2, rng)
    p.out_proj.weight.data[...] = rng.uniform(-1, 1, p.out_proj.weight.shape)
    xs = [_leaf(rng, 2, 4, 4) for _ in range(3)]
    r = Tensor(rng.standard_normal((2, 4, 4)))
    params = [t for _, t in named_parameters(p)]
    return (lambda: T.sum_all(T.mul(A.cafb(*xs, p), r))), xs + params


def _l1(rng):
    x, y = _leaf(rng, 3, 4, 4), Tensor(rng.uniform(-1, 1, (3, 4, 4)))
    return (lambda: l1_loss(x, y)), [x]


def _ssim(window):
    def build(rng):
        size = 12 if window == "gaussian11" else 4
        x = _leaf(rng, 3, size, size, low=0, high=1)
        y = _leaf(rng, 3, size, size, low=0, high=1)
        return (lambda: ssim_loss(x, y, SsimConstants(window=window))), [x, y]

    return build


def _total(rng):
    x = _leaf(rng, 3, 12, 12, low=0, high=1)
    y = Tensor(rng.uniform(0, 1, (3, 12, 12)))
    return (lambda: total_loss(x, y).total), [x]


OP_CASES: dict[str, Callable] = {
    "add": _binary(T.add),
    "add_channel_broadcast": _binary(T.add, b_shape=(3, 1, 1)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_pixel_broadcast": _binary(T.mul, b_shape=(1, 4, 4)),
    "div": _binary(T.div, positive_b=True),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "exp": _unary(T.exp),
    "abs": _unary(T.absolute),
    "global_avg_pool": _gap,
    "concat_channels": _concat,
    "reshape_permute": _reshape_permute,
    "transpose": _transpose,
    "mean": _mean,
    "matmul": _matmul,
    "softmax_rows": _softmax,
    "conv2d_1x1": _conv(1),
    "conv2d_3x3": _conv(3),
    "depthwise_conv2d": _depthwise,
    "tcm": _tcm,
    "channel_attention": _channel_attention,
    "pixel_attention": _pixel_attention,
    "cafb": _cafb,
    "l1_loss": _l1,
    "ssim_loss_gaussian": _ssim("gaussian11"),
    "ssim_loss_global": _ssim("global"),
    "total_loss": _total,
}


# engine-level ops; the remaining cases are modules and losses composed from them
PRIMITIVE_OPS = tuple(list(OP_CASES)[: list(OP_CASES).index("depthwise_conv2d") + 1])

# windowed SSIM puts Gaussian-tail pixels at gradients near the float64 roundoff floor
TOLERANCES = {"ssim_loss_gaussian": 1e-5, "total_loss": 1e-5}


def op_tolerance(name: str) -> float:
    return TOLERANCES.get(name, OP_TOLERANCE)


def op_gradcheck(name: str, seed: int, h=OP_STEPS) -> float:
    """Max relative gradient error of one op case on a seeded random instance."""
    f, params = OP_CASES[name](np.random.default_rng(seed))
    return T.finite_diff_check(f, params, h=h, tol=1e-8)


def randomize_zero_layers(model: NaLSuperModel, seed: int) -> None:
    """Give the zero-initialised layers fan-in uniform values so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.data.any():
            continue
        fan_in = p.size // p.shape[0] if p.ndim > 1 else p.size
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        p.data[...] = rng.uniform(-bound, bound, size=p.shape)


def tiny_model(channels: int = 4, blocks: int = 2, seed: int = 0, d_tau: int = 32) -> NaLSuperModel:
    cfg = ModelConfig(channels=channels, num_blocks=blocks, d_tau=d_tau, seed=seed, dtype="float64")
    model = init_model(cfg, embed_prompts(DEFAULT_PROMPTS, d_tau, seed))
    randomize_zero_layers(model, seed + 1)
    return model


def model_gradcheck(channels: int = 4, blocks: int = 2, size: int = 8, seed: int = 0,
                    max_coords: int | None = None, tol: float = 1e-4) -> float:
    """Full-network gradient check in float64 on a random ``[3,size,size]`` input."""
    model = tiny_model(channels, blocks, seed)
    rng = np.random.default_rng(seed + 2)
    x = Tensor(rng.uniform(0, 1, (3, size, size)))
    r = Tensor(rng.standard_normal((3, size, size)))

    def f():
        return T.sum_all(T.mul(forward(model, x), r))

    return T.finite_diff_check(f, model.parameters(), h=MODEL_STEPS, max_coords=max_coords,
                               rng=np.random.default_rng(seed + 3), tol=tol)
