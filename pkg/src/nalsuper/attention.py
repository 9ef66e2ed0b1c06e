"""Information fusion attention: channel gate, pixel gate and cross-layer fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .params import Conv, DepthwiseConv, conv, depthwise
from .tensor import Tensor


@dataclass
class ChannelAttentionParams:
    conv1: Conv  # C -> C/r, 1x1
    conv2: Conv  # C/r -> C, 1x1

    @property
    def reduction(self) -> int:
        return self.conv2.out_channels // self.conv1.out_channels


@dataclass
class PixelAttentionParams:
    conv1: Conv  # C -> C/r, 1x1
    conv2: Conv  # C/r -> 1, 1x1


@dataclass
class CafbParams:
    q_point: Conv
    k_point: Conv
    v_point: Conv
    q_depth: DepthwiseConv
    k_depth: DepthwiseConv
    v_depth: DepthwiseConv
    out_proj: Conv  # 3C -> C
    # log-multiplier on the default temperature; None keeps it fixed
    log_delta: Tensor | None = None


@dataclass
class IfaParams:
    ca: ChannelAttentionParams
    pa: PixelAttentionParams
    cafb: CafbParams


def _reduced(channels: int, reduction: int) -> int:
    if reduction < 1 or channels % reduction:
        raise UsageError(f"channels ({channels}) must be divisible by reduction ({reduction})")
    return channels // reduction


def init_channel_attention(channels: int, reduction: int, rng, dtype=np.float64) -> ChannelAttentionParams:
    mid = _reduced(channels, reduction)
    return ChannelAttentionParams(conv(channels, mid, 1, rng, dtype), conv(mid, channels, 1, rng, dtype))


def init_pixel_attention(channels: int, reduction: int, rng, dtype=np.float64) -> PixelAttentionParams:
    mid = _reduced(channels, reduction)
    return PixelAttentionParams(conv(channels, mid, 1, rng, dtype), conv(mid, 1, 1, rng, dtype))


def init_cafb(channels: int, rng, dtype=np.float64, learnable_delta: bool = False) -> CafbParams:
    wide = 3 * channels
    return CafbParams(
        q_point=conv(wide, wide, 1, rng, dtype),
        k_point=conv(wide, wide, 1, rng, dtype),
        v_point=conv(wide, wide, 1, rng, dtype),
        q_depth=depthwise(wide, 3, rng, dtype),
        k_depth=depthwise(wide, 3, rng, dtype),
        v_depth=depthwise(wide, 3, rng, dtype),
        out_proj=conv(wide, channels, 1, None, dtype),
        log_delta=Tensor(np.zeros((), dtype=dtype), requires_grad=True) if learnable_delta else None,
    )


def init_ifa(channels: int, reduction: int, rng, dtype=np.float64, learnable_delta: bool = False) -> IfaParams:
    return IfaParams(
        ca=init_channel_attention(channels, reduction, rng, dtype),
        pa=init_pixel_attention(channels, reduction, rng, dtype),
        cafb=init_cafb(channels, rng, dtype, learnable_delta),
    )


def channel_weights(f_c: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0, 1), shape ``[C,1,1]``."""
    g = T.global_avg_pool(f_c)
    return T.sigmoid(p.conv2(T.relu(p.conv1(g))))


def channel_attention(f_c: Tensor, p: ChannelAttentionParams) -> Tensor:
    return T.mul(channel_weights(f_c, p), f_c)


def pixel_mask(f: Tensor, p: PixelAttentionParams) -> Tensor:
    """Per-pixel gate in (0, 1), shape ``[1,H,W]``."""
    return T.sigmoid(p.conv2(T.relu(p.conv1(f))))


def pixel_attention(f_cout: Tensor, p: PixelAttentionParams) -> Tensor:
    return T.mul(pixel_mask(f_cout, p), f_cout)


def default_delta(channels: int, height: int, width: int) -> float:
    return math.sqrt(channels * height * width)


def layer_attention(f_in: Tensor, p: CafbParams) -> tuple[Tensor, Tensor]:
    """Cross-layer self-attention over the three stacked layers of ``f_in``.

    Returns ``(fused, A)`` where ``A`` is the 3x3 layer-correlation matrix and
    ``fused`` has the shape of ``f_in``.
    """
    wide, h, w = f_in.shape
    if wide % 3:
        raise DimensionError(f"CAFB input must have 3C channels, got {wide}")
    flat = (3, (wide // 3) * h * w)
    q = T.reshape(p.q_depth(p.q_point(f_in)), flat)  # [3, HWC]
    k = T.reshape(p.k_depth(p.k_point(f_in)), flat)
    v = T.reshape(p.v_depth(p.v_point(f_in)), flat)  # rows are the layers of V'^T
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / default_delta(wide // 3, h, w))
    if p.log_delta is not None:
        logits = T.mul(logits, T.exp(T.scale(p.log_delta, -1.0)))
    attn = T.softmax_rows(logits)
    fused = T.reshape(T.matmul(attn, v), (wide, h, w))
    return fused, attn


def cafb(f_i: Tensor, f_hat: Tensor, f_tilde: Tensor, p: CafbParams) -> Tensor:
    if not (f_i.shape == f_hat.shape == f_tilde.shape):
        raise DimensionError(f"CAFB inputs differ in shape: {f_i.shape}, {f_hat.shape}, {f_tilde.shape}")
    f_in = T.concat_channels([f_i, f_hat, f_tilde])
    fused, _ = layer_attention(f_in, p)
    return p.out_proj(T.add(fused, f_in))


def ifa_forward(f_block_in: Tensor, f_post_tcm: Tensor, p: IfaParams) -> Tensor:
    f_gated = pixel_attention(channel_attention(f_post_tcm, p.ca), p.pa)
    return cafb(f_block_in, f_post_tcm, f_gated, p.cafb)
