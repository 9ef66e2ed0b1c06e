"""Model assembly: shallow projection, residual text-guided blocks, reconstruction."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import IfaParams, ifa_forward, init_ifa
from .errors import DimensionError, FormatError, UsageError
from .params import Conv, conv, named_parameters
from .tensor import Tensor
from .text import EmbeddingSet, TcmParams, TextEmbedding, init_tcm, tcm_forward

NLSC_MAGIC = b"NLSC"
NLSC_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    num_blocks: int = 3
    attention_dim: int = 16
    d_tau: int = 32
    reduction: int = 1
    delta_mode: str = "fixed"
    ssim_window: str = "gaussian11"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("channels", "num_blocks", "attention_dim", "d_tau", "reduction"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise UsageError(f"{name} must be a positive integer, got {value!r}")
        if self.channels % self.reduction:
            raise UsageError(f"channels ({self.channels}) must be divisible by reduction ({self.reduction})")
        if self.delta_mode not in ("fixed", "learnable"):
            raise UsageError(f"delta_mode must be 'fixed' or 'learnable', got {self.delta_mode!r}")
        if self.ssim_window not in ("gaussian11", "global"):
            raise UsageError(f"ssim_window must be 'gaussian11' or 'global', got {self.ssim_window!r}")
        if self.dtype not in _DTYPES:
            raise UsageError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_manifest(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_manifest(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in items:
                raise FormatError(f"checkpoint manifest lacks {f.name!r}")
            raw = items[f.name]
            kwargs[f.name] = int(raw) if f.type in ("int", int) else raw
        return cls(**kwargs)


@dataclass
class RtfbParams:
    pre_conv: Conv
    tcm: TcmParams
    ifa: IfaParams


@dataclass
class NaLSuperModel:
    config: ModelConfig
    shallow_conv: Conv
    blocks: list[RtfbParams]
    recon_conv1: Conv
    recon_conv2: Conv
    embeddings: EmbeddingSet = field(metadata={"frozen": True})

    def __post_init__(self):
        if len(self.blocks) != self.config.num_blocks:
            raise DimensionError(f"model has {len(self.blocks)} blocks, config says {self.config.num_blocks}")
        self._text: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def text(self) -> Tensor:
        """Frozen ``[M, d_tau]`` embedding matrix in the model dtype."""
        if self._text is None:
            self._text = Tensor(self.embeddings.matrix(self.config.np_dtype))
        return self._text


def parameter_count(channels: int, num_blocks: int, attention_dim: int, d_tau: int, num_prompts: int,
                    reduction: int = 1, learnable_delta: bool = False) -> int:
    c, d, mid = channels, attention_dim, channels // reduction
    tcm = d * c + 2 * d * d_tau + num_prompts + c * d
    ca = (c * mid + mid) + (mid * c + c)
    pa = (c * mid + mid) + (mid + 1)
    wide = 3 * c
    cafb = 3 * (wide * wide + wide) + 3 * (9 * wide + wide) + (wide * c + c) + int(learnable_delta)
    block = (9 * c * c + c) + tcm + ca + pa + cafb
    return (27 * c + c) + num_blocks * block + (num_blocks * c * c + c) + (9 * c * 3 + 3)


def init_model(config: ModelConfig, embeddings: EmbeddingSet) -> NaLSuperModel:
    """Seeded fan-in init; the last layer of every residual branch starts at zero."""
    if embeddings.d_tau != config.d_tau:
        raise UsageError(f"embeddings have d_tau={embeddings.d_tau}, config expects {config.d_tau}")
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    c = config.channels
    shallow = conv(3, c, 3, rng, dt)
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(
            RtfbParams(
                pre_conv=conv(c, c, 3, rng, dt),
                tcm=init_tcm(c, config.attention_dim, config.d_tau, len(embeddings), rng, dt),
                ifa=init_ifa(c, config.reduction, rng, dt, learnable_delta=config.delta_mode == "learnable"),
            )
        )
    recon1 = conv(config.num_blocks * c, c, 1, rng, dt)
    recon2 = conv(c, 3, 3, None, dt)
    return NaLSuperModel(config, shallow, blocks, recon1, recon2, embeddings)


def rtfb_forward(f_prev: Tensor, block: RtfbParams, text: Tensor | EmbeddingSet) -> Tensor:
    f_a = T.relu(block.pre_conv(f_prev))
    f_b = tcm_forward(f_a, text, block.tcm)
    f_c = ifa_forward(f_prev, f_b, block.ifa)
    return T.add(f_prev, f_c)


def forward_features(model: NaLSuperModel, image) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the network and also return ``F_0``, the block outputs and ``F_con``."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.config.np_dtype))
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a [3,H,W] image, got {x.shape}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise DimensionError(f"image must be at least 3x3, got {x.shape[1]}x{x.shape[2]}")
    text = model.text()
    f = model.shallow_conv(x)
    feats = {"F_0": f}
    outs = []
    for i, block in enumerate(model.blocks):
        f = rtfb_forward(f, block, text)
        feats[f"F_{i + 1}"] = f
        outs.append(f)
    f_con = T.concat_channels(outs)
    feats["F_con"] = f_con
    residual = model.recon_conv2(T.relu(model.recon_conv1(f_con)))
    return T.add(x, residual), feats


def forward(model: NaLSuperModel, image) -> Tensor:
    """Enhance one ``[3,H,W]`` image. The result is not clamped."""
    return forward_features(model, image)[0]


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_EMBEDDING_KEY = "text.embeddings"


def checkpoint_bytes(model: NaLSuperModel) -> bytes:
    manifest = dict(model.config.to_manifest())
    manifest["prompts"] = json.dumps(model.embeddings.prompts, ensure_ascii=False)
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    entries = model.named_parameters() + [(_EMBEDDING_KEY, Tensor(model.embeddings.matrix(np.float32)))]
    parts = [NLSC_MAGIC, struct.pack("<II", NLSC_VERSION, len(text)), text, struct.pack("<I", len(entries))]
    for name, t in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: NaLSuperModel, path: str | Path) -> None:
    """Write an NLSC file. Values are stored as float32."""
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> NaLSuperModel:
    """Rebuild a model from an NLSC file.

    When ``config`` is given the stored tensors must fit a model built from it
    (apart from the seed, which only affects init); otherwise the embedded
    manifest is used.
    """
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what} at byte offset {pos}: expected {n} bytes, got {len(buf) - pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return struct.unpack("<I", take(4, what))[0]

    magic = take(4, "magic")
    if magic != NLSC_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {NLSC_MAGIC!r}")
    version = u32("version")
    if version != NLSC_VERSION:
        raise FormatError(f"unsupported NLSC version {version} at byte offset 4")
    manifest_text = take(u32("manifest length"), "manifest").decode("utf-8")
    manifest = dict(line.split("=", 1) for line in manifest_text.splitlines() if line)
    stored = {}
    for _ in range(u32("parameter count")):
        name = take(u32("name length"), "name").decode("utf-8")
        rank = u32(f"{name} rank")
        shape = tuple(u32(f"{name} dim") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        stored[name] = np.frombuffer(take(4 * n, f"{name} payload"), dtype="<f4").reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at byte offset {pos}")

    saved_config = ModelConfig.from_manifest(manifest)
    cfg = config or saved_config
    if _EMBEDDING_KEY not in stored or "prompts" not in manifest:
        raise FormatError("checkpoint carries no text embeddings")
    prompts = json.loads(manifest["prompts"])
    vectors = stored.pop(_EMBEDDING_KEY)
    if vectors.shape != (len(prompts), saved_config.d_tau):
        raise FormatError(f"embedding block has shape {vectors.shape}, manifest implies ({len(prompts)}, {saved_config.d_tau})")
    embeddings = EmbeddingSet(tuple(TextEmbedding(p, v.astype(np.float32)) for p, v in zip(prompts, vectors)))
    model = init_model(cfg, embeddings)
    load_state(model, stored)
    return model


def load_state(model: NaLSuperModel, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise DimensionError(
            f"checkpoint does not fit this model: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
        )
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise DimensionError(f"shape mismatch for {name}: checkpoint {state[name].shape}, model {p.shape}")
    for name, p in params.items():
        p.data[...] = state[name]
