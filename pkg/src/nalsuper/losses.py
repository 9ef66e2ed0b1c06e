"""Reconstruction losses and image-quality metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor

DYNAMIC_RANGE = 1.0
C1 = (0.01 * DYNAMIC_RANGE) ** 2
C2 = (0.03 * DYNAMIC_RANGE) ** 2
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
LOSS_CONFIGS = ("l1", "ssim", "l1+ssim")


@dataclass(frozen=True)
class SsimConstants:
    c1: float = C1
    c2: float = C2
    window: str = "gaussian11"

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise UsageError("SSIM constants must be positive")
        if self.window not in ("gaussian11", "global"):
            raise UsageError(f"unknown SSIM window {self.window!r}")


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")


def _batch(pred, gt) -> list[tuple[Tensor, Tensor]]:
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(gt) or not pred:
            raise DimensionError(f"batch sizes differ or are empty: {len(pred)} vs {len(gt)}")
        pairs = [(_as_tensor(p), _as_tensor(g, _as_tensor(p).dtype)) for p, g in zip(pred, gt)]
    else:
        p = _as_tensor(pred)
        pairs = [(p, _as_tensor(gt, p.dtype))]
    for p, g in pairs:
        _check_pair(p, g)
    return pairs


def _batch_mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total


def l1_loss(pred, gt) -> Tensor:
    """Mean absolute error, averaged over pixels, channels and batch."""
    return _batch_mean([T.mean_all(T.absolute(T.sub(p, g))) for p, g in _batch(pred, gt)])


def ssim_index(x, y, k: SsimConstants = SsimConstants()) -> Tensor:
    """Differentiable SSIM of two ``[C,H,W]`` images as a scalar tensor."""
    x = _as_tensor(x)
    y = _as_tensor(y, x.dtype)
    _check_pair(x, y)
    if k.window == "global":
        return _ssim_global(x, y, k)
    if x.ndim != 3:
        raise DimensionError(f"gaussian SSIM expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < WINDOW_SIZE or w < WINDOW_SIZE:
        raise UsageError(f"gaussian SSIM needs images of at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {h}x{w}")
    win = np.broadcast_to(gaussian_window().astype(x.dtype), (c, 1, WINDOW_SIZE, WINDOW_SIZE)).copy()
    win = Tensor(win)

    def blur(t):
        return T.depthwise_conv2d(t, win, padding=0)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = T.mul(mu_x, mu_x), T.mul(mu_y, mu_y), T.mul(mu_x, mu_y)
    var_x = T.sub(blur(T.mul(x, x)), mu_xx)
    var_y = T.sub(blur(T.mul(y, y)), mu_yy)
    cov = T.sub(blur(T.mul(x, y)), mu_xy)
    return T.mean_all(_ssim_formula(mu_xy, mu_xx, mu_yy, cov, var_x, var_y, k))


def _ssim_global(x: Tensor, y: Tensor, k: SsimConstants) -> Tensor:
    mu_x, mu_y = T.mean_all(x), T.mean_all(y)
    dx, dy = T.sub(x, mu_x), T.sub(y, mu_y)
    var_x = T.mean_all(T.mul(dx, dx))
    var_y = T.mean_all(T.mul(dy, dy))
    cov = T.mean_all(T.mul(dx, dy))
    return _ssim_formula(T.mul(mu_x, mu_y), T.mul(mu_x, mu_x), T.mul(mu_y, mu_y), cov, var_x, var_y, k)


def _ssim_formula(mu_xy, mu_xx, mu_yy, cov, var_x, var_y, k):
    num = T.mul(T.add(T.scale(mu_xy, 2.0), k.c1), T.add(T.scale(cov, 2.0), k.c2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), k.c1), T.add(T.add(var_x, var_y), k.c2))
    return T.div(num, den)


def ssim(x, y, k: SsimConstants = SsimConstants()) -> float:
    xa = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ya = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return float(ssim_index(Tensor(xa), Tensor(ya), k).data)


def ssim_loss(pred, gt, k: SsimConstants = SsimConstants()) -> Tensor:
    """``1 - SSIM(pred, gt)``, averaged over the batch."""
    terms = [T.sub(1.0, ssim_index(p, g, k)) for p, g in _batch(pred, gt)]
    return _batch_mean(terms)


@dataclass
class LossTerms:
    total: Tensor
    l1: Tensor | None = None
    ssim: Tensor | None = None

    def values(self) -> tuple[float, float, float]:
        nan = float("nan")
        return (
            float(self.total.data),
            float(self.l1.data) if self.l1 is not None else nan,
            float(self.ssim.data) if self.ssim is not None else nan,
        )


def total_loss(pred, gt, k: SsimConstants = SsimConstants(), config: str = "l1+ssim") -> LossTerms:
    """L1 + SSIM loss; ``config`` drops either term for ablations."""
    if config not in LOSS_CONFIGS:
        raise UsageError(f"loss config must be one of {LOSS_CONFIGS}, got {config!r}")
    l1 = l1_loss(pred, gt) if "l1" in config else None
    s = ssim_loss(pred, gt, k) if "ssim" in config else None
    if l1 is not None and s is not None:
        return LossTerms(T.add(l1, s), l1, s)
    return LossTerms(l1 if l1 is not None else s, l1, s)


# ---------------------------------------------------------------------------
# metrics (numpy, clamped to [0,1])
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def _clamped(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.clip(np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64), 0.0, 1.0)
    g = np.clip(np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64), 0.0, 1.0)
    if p.shape != g.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def psnr(pred, gt) -> float:
    p, g = _clamped(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def mae(pred, gt) -> float:
    p, g = _clamped(pred, gt)
    return float(np.mean(np.abs(p - g)))


def image_ssim(pred, gt, k: SsimConstants = SsimConstants()) -> float:
    p, g = _clamped(pred, gt)
    return ssim(p, g, k)


@dataclass
class EvalRow:
    image: str
    psnr_db: float
    ssim: float
    mae: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr_db")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    @property
    def mean_mae(self) -> float:
        return self._mean("mae")

    def to_table(self) -> str:
        width = max([len("image"), len("mean")] + [len(r.image) for r in self.rows])
        lines = [f"{'image':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>7}  {'MAE':>7}"]
        for r in self.rows:
            lines.append(f"{r.image:<{width}}  {r.psnr_db:9.3f}  {r.ssim:7.4f}  {r.mae:7.4f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:9.3f}  {self.mean_ssim:7.4f}  {self.mean_mae:7.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr_db", "ssim", "mae"])
        for r in self.rows:
            w.writerow([r.image, repr(r.psnr_db), repr(r.ssim), repr(r.mae)])
        w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim), repr(self.mean_mae)])
        return buf.getvalue()


def metrics_report(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]], k: SsimConstants = SsimConstants()) -> EvalReport:
    """Build a report from ``(name, prediction, ground_truth)`` triples."""
    return EvalReport([EvalRow(name, psnr(p, g), image_ssim(p, g, k), mae(p, g)) for name, p, g in pairs])
