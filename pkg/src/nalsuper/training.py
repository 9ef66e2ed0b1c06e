"""Paired data, synthetic darkening, Adam and the training/evaluation loops."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError, UsageError
from .imageio import IMAGE_SUFFIXES, read_image
from .losses import LOSS_CONFIGS, EvalReport, EvalRow, SsimConstants, image_ssim, mae, psnr, total_loss
from .network import NaLSuperModel, forward, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ImagePair:
    low: np.ndarray  # [3,H,W] in [0,1]
    gt: np.ndarray
    id: str

    def __post_init__(self):
        if self.low.shape != self.gt.shape:
            raise UsageError(f"pair {self.id}: low {self.low.shape} and gt {self.gt.shape} differ in size")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _image_files(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_paired_dataset(low_dir: str | Path, gt_dir: str | Path) -> list[ImagePair]:
    """Pair same-named images from two directories, sorted by filename."""
    low_dir, gt_dir = Path(low_dir), Path(gt_dir)
    for d in (low_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    low, gt = _image_files(low_dir), _image_files(gt_dir)
    for name in sorted(set(low) ^ set(gt)):
        where = low_dir if name in low else gt_dir
        raise UsageError(f"{name} in {where} has no counterpart")
    pairs = [ImagePair(read_image(low[n]), read_image(gt[n]), n) for n in sorted(low)]
    if not pairs:
        raise UsageError(f"no images found in {low_dir}")
    return pairs


def _smooth_field(rng: np.random.Generator, h: int, w: int, terms: int = 3) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((h, w))
    for _ in range(terms):
        fx, fy = rng.uniform(0.3, 2.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        out += rng.uniform(0.5, 1.0) * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
    return out


def make_synthetic(count: int, height: int, width: int | None = None, seed: int = 0) -> list[ImagePair]:
    """Smooth random scenes and gamma-darkened, noisy low-light versions."""
    width = height if width is None else width
    if height < 16 or width < 16:
        raise UsageError(f"synthetic images must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        gt = np.stack([_smooth_field(rng, height, width) for _ in range(3)])
        lo, hi = gt.min(axis=(1, 2), keepdims=True), gt.max(axis=(1, 2), keepdims=True)
        gt = 0.2 + 0.7 * (gt - lo) / np.maximum(hi - lo, 1e-12)
        gamma = rng.uniform(2.0, 3.0)
        gain = rng.uniform(0.2, 0.5)
        low = np.clip(gt**gamma * gain + rng.normal(0.0, 0.01, size=gt.shape), 0.0, 1.0)
        pairs.append(ImagePair(low, gt, f"synthetic_{i:04d}"))
    return pairs


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            raise UsageError(f"parameter {i} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        p.data -= dt(state.lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(state.eps))


class NumericAbort(NumericError):
    def __init__(self, step: int, total: float, l1: float, ssim: float):
        super().__init__(f"non-finite loss at step {step}: total={total}, l1={l1}, ssim={ssim}")
        self.step = step
        self.components = {"total": total, "l1": l1, "ssim": ssim}


@dataclass
class TrainRun:
    loss_config: str
    steps: int
    seed: int
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    checkpoint_path: str | None = None

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "l1", "ssim"])
            for row in self.trace:
                w.writerow([row[0], *(repr(v) for v in row[1:])])


def _as_model_input(image: np.ndarray, model: NaLSuperModel) -> Tensor:
    return Tensor(np.asarray(image, dtype=model.config.np_dtype))


def dataset_loss(model: NaLSuperModel, pairs: Sequence[ImagePair], loss_config: str = "l1+ssim") -> float:
    """Mean total loss over ``pairs`` without recording a graph."""
    k = SsimConstants(window=model.config.ssim_window)
    with T.no_grad():
        vals = [
            float(total_loss(forward(model, _as_model_input(p.low, model)), _as_model_input(p.gt, model), k, loss_config).total.data)
            for p in pairs
        ]
    return float(np.mean(vals))


def _checked_dataset_loss(model, pairs, loss_config: str, step: int) -> float:
    try:
        value = dataset_loss(model, pairs, loss_config)
    except NumericError as exc:
        raise NumericAbort(step, math.nan, math.nan, math.nan) from exc
    if not math.isfinite(value):
        raise NumericAbort(step, value, math.nan, math.nan)
    return value


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train(
    model: NaLSuperModel,
    pairs: Sequence[ImagePair],
    loss_config: str = "l1+ssim",
    steps: int = 1000,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 1,
    checkpoint_path: str | Path | None = None,
    log_every: int = 0,
) -> TrainRun:
    """Fit ``model`` to ``pairs`` with Adam; text embeddings are never touched."""
    if not pairs:
        raise UsageError("training needs at least one image pair")
    if loss_config not in LOSS_CONFIGS:
        raise UsageError(f"loss config must be one of {LOSS_CONFIGS}, got {loss_config!r}")
    if steps < 0 or batch_size < 1:
        raise UsageError("steps must be >= 0 and batch_size >= 1")
    run = TrainRun(loss_config, steps, seed)
    run.initial_loss = _checked_dataset_loss(model, pairs, loss_config, 0)
    k = SsimConstants(window=model.config.ssim_window)
    params = model.parameters()
    adam = AdamState(lr=lr)
    batches = _batches(len(pairs), min(batch_size, len(pairs)), np.random.default_rng(seed))
    inputs = [(_as_model_input(p.low, model), _as_model_input(p.gt, model)) for p in pairs]
    for step in range(1, steps + 1):
        idx = next(batches)
        try:
            preds = [forward(model, inputs[i][0]) for i in idx]
            terms = total_loss(preds, [inputs[i][1] for i in idx], k, loss_config)
        except NumericError as exc:
            raise NumericAbort(step, math.nan, math.nan, math.nan) from exc
        total, l1, s = terms.values()
        if not math.isfinite(total):
            raise NumericAbort(step, total, l1, s)
        model.zero_grad()
        T.backward(terms.total)
        adam_step(params, [p.grad for p in params], adam)
        run.trace.append((step, total, l1, s))
        if log_every and step % log_every == 0:
            logger.info("step %d total=%.6f l1=%.6f ssim=%.6f", step, total, l1, s)
    model.zero_grad()
    run.final_loss = _checked_dataset_loss(model, pairs, loss_config, steps)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        run.checkpoint_path = str(checkpoint_path)
    return run


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def enhance(model: NaLSuperModel, image: np.ndarray) -> np.ndarray:
    """Forward one ``[3,H,W]`` image and clamp the result to [0,1]."""
    with T.no_grad():
        out = forward(model, _as_model_input(image, model)).data
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def metric_window(shape: tuple[int, ...]) -> SsimConstants:
    return SsimConstants(window="gaussian11" if min(shape[1:]) >= 11 else "global")


def evaluate(model: NaLSuperModel, pairs: Sequence[ImagePair], threads: int | None = None) -> EvalReport:
    """PSNR / SSIM / MAE of enhanced images against ground truth."""
    if threads is None:
        threads = int(os.environ.get("NALSUPER_THREADS", "1") or 1)

    def row(p: ImagePair) -> EvalRow:
        out = enhance(model, p.low)
        return EvalRow(p.id, psnr(out, p.gt), image_ssim(out, p.gt, metric_window(out.shape)), mae(out, p.gt))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, pairs))
    else:
        rows = [row(p) for p in pairs]
    return EvalReport(rows)
