"""Frozen prompt embeddings and the text-to-image cross-attention (TCM)."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, UsageError
from .tensor import Tensor

NLSE_MAGIC = b"NLSE"
NLSE_VERSION = 1
DEFAULT_PROMPTS = ("normal light image", "low light image")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class TextEmbedding:
    prompt: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector)
        if vec.dtype != np.float32:
            vec = vec.astype(np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise DimensionError(f"embedding for {self.prompt!r} must be a non-empty vector")
        if not np.isfinite(vec).all():
            raise UsageError(f"embedding for {self.prompt!r} is not finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered, immutable set of prompt embeddings sharing one dimension."""

    entries: tuple[TextEmbedding, ...]
    d_tau: int = field(init=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise UsageError("an embedding set needs at least one prompt")
        dims = {e.vector.size for e in entries}
        if len(dims) != 1:
            raise DimensionError(f"embedding dimensions disagree: {sorted(dims)}")
        prompts = [e.prompt for e in entries]
        if len(set(prompts)) != len(prompts):
            raise UsageError("prompts in an embedding set must be unique")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "d_tau", dims.pop())

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def prompts(self) -> list[str]:
        return [e.prompt for e in self.entries]

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """Embeddings stacked as ``[M, d_tau]`` (a fresh copy)."""
        return np.stack([e.vector for e in self.entries]).astype(dtype)


def test_embedder(prompt: str, d_tau: int, seed: int = 0) -> TextEmbedding:
    """Deterministic unit-norm stand-in for a pretrained text encoder."""
    if not prompt:
        raise UsageError("prompt must be non-empty")
    if d_tau < 1:
        raise UsageError(f"d_tau must be >= 1, got {d_tau}")
    rng = np.random.default_rng(fnv1a_64(prompt.encode("utf-8")) ^ (seed & 0xFFFFFFFFFFFFFFFF))
    v = rng.standard_normal(d_tau)
    return TextEmbedding(prompt, v / np.linalg.norm(v))


test_embedder.__test__ = False  # keep pytest from collecting it


def embed_prompts(prompts: Sequence[str], d_tau: int, seed: int = 0) -> EmbeddingSet:
    return EmbeddingSet(tuple(test_embedder(p, d_tau, seed) for p in prompts))


def read_prompts(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    prompts = [ln.strip() for ln in lines if ln.strip()]
    if not prompts:
        raise UsageError(f"no prompts found in {path}")
    return prompts


def write_embeddings(embeddings: EmbeddingSet, path: str | Path) -> None:
    parts = [NLSE_MAGIC, struct.pack("<III", NLSE_VERSION, len(embeddings), embeddings.d_tau)]
    for e in embeddings.entries:
        raw = e.prompt.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(e.vector, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path: str | Path) -> EmbeddingSet:
    """Read an NLSE file; vectors come back as float32, exactly as stored."""
    buf = Path(path).read_bytes()
    reader = _Reader(buf)
    magic = reader.take(4, "magic")
    if magic != NLSE_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {NLSE_MAGIC!r}")
    version, m, d_tau = reader.u32("version"), reader.u32("M"), reader.u32("d_tau")
    if version != NLSE_VERSION:
        raise FormatError(f"unsupported NLSE version {version} at byte offset 4")
    entries = []
    for i in range(m):
        n = reader.u32(f"prompt_len[{i}]")
        prompt = reader.take(n, f"prompt[{i}]").decode("utf-8")
        vec = np.frombuffer(reader.take(4 * d_tau, f"vector[{i}]"), dtype="<f4").astype(np.float32)
        entries.append(TextEmbedding(prompt, vec))
    if reader.pos != len(buf):
        raise FormatError(f"{len(buf) - reader.pos} trailing bytes at byte offset {reader.pos}")
    return EmbeddingSet(tuple(entries))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"truncated {what} at byte offset {self.pos}: expected {n} bytes, "
                f"got {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


# ---------------------------------------------------------------------------
# cross-attention
# ---------------------------------------------------------------------------


@dataclass
class TcmParams:
    w_q: Tensor  # [d, C]
    w_k: Tensor  # [d, d_tau]
    w_v: Tensor  # [d, d_tau]
    bias: Tensor  # [1, M], one learnable offset per key token
    w_out: Tensor  # [C, d]

    @property
    def attention_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def num_keys(self) -> int:
        return self.bias.shape[1]


def init_tcm(channels: int, attention_dim: int, d_tau: int, num_keys: int, rng: np.random.Generator, dtype=np.float64) -> TcmParams:
    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    return TcmParams(
        w_q=uniform((attention_dim, channels), channels),
        w_k=uniform((attention_dim, d_tau), d_tau),
        w_v=uniform((attention_dim, d_tau), d_tau),
        bias=Tensor(np.zeros((1, num_keys), dtype=dtype), requires_grad=True),
        w_out=Tensor(np.zeros((channels, attention_dim), dtype=dtype), requires_grad=True),
    )


def tcm_attention(feature: Tensor, text: Tensor, p: TcmParams) -> tuple[Tensor, Tensor]:
    """Return ``(output, weights)`` where weights is the ``[HW, M]`` attention map."""
    if feature.ndim != 3:
        raise DimensionError(f"TCM expects a [C,H,W] feature, got {feature.shape}")
    c, h, w = feature.shape
    if p.w_q.shape[1] != c:
        raise DimensionError(f"TCM query projection expects {p.w_q.shape[1]} channels, feature has {c}")
    if text.ndim != 2 or text.shape[0] != p.num_keys or text.shape[1] != p.w_k.shape[1]:
        raise DimensionError(
            f"TCM built for {p.num_keys} prompts of width {p.w_k.shape[1]}, got embeddings {text.shape}"
        )
    d = p.attention_dim
    tokens = T.transpose(T.reshape(feature, (c, h * w)))  # [HW, C]
    q = T.matmul(tokens, T.transpose(p.w_q))  # [HW, d]
    k = T.matmul(text, T.transpose(p.w_k))  # [M, d]
    v = T.matmul(text, T.transpose(p.w_v))  # [M, d]
    logits = T.add(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d)), p.bias)
    weights = T.softmax_rows(logits)
    attended = T.matmul(weights, v)  # [HW, d]
    injected = T.matmul(attended, T.transpose(p.w_out))  # [HW, C]
    back = T.reshape(T.transpose(injected), (c, h, w))
    return T.add(feature, back), weights


def tcm_forward(feature: Tensor, embeddings: EmbeddingSet | Tensor, params: TcmParams) -> Tensor:
    text = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings.matrix(feature.dtype))
    return tcm_attention(feature, text, params)[0]
