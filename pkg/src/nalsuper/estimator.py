"""scikit-learn style wrapper so the enhancer composes with pipelines and grid search."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import psnr
from .network import ModelConfig, init_model
from .text import DEFAULT_PROMPTS, EmbeddingSet, embed_prompts, load_embeddings
from .training import ImagePair, enhance, train


def check_images(X, name: str = "X") -> list[np.ndarray]:
    """Validate RGB images and return them as float64 ``[3,H,W]`` arrays in [0,1].

    Accepts a single ``(H,W,3)`` image, a ``(n,H,W,3)`` stack or a sequence of
    ``(H,W,3)`` arrays of differing sizes. ``uint8`` input is scaled by 1/255.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    if isinstance(X, np.ndarray) and X.ndim != 4:
        raise ValueError(f"{name} must be (H,W,3), (n,H,W,3) or a list of images; got shape {X.shape}")
    images = []
    for i, img in enumerate(X):
        arr = np.asarray(img)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError(f"{name}[{i}] must have shape (H,W,3), got {arr.shape}")
        if arr.shape[0] < 3 or arr.shape[1] < 3:
            raise ValueError(f"{name}[{i}] must be at least 3x3, got {arr.shape[:2]}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        else:
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(f"{name}[{i}] contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name}[{i}] values must lie in [0, 1]")
        images.append(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    if not images:
        raise ValueError(f"{name} contains no images")
    return images


def check_image_pairs(X, y) -> list[ImagePair]:
    low, gt = check_images(X, "X"), check_images(y, "y")
    if len(low) != len(gt):
        raise ValueError(f"X has {len(low)} images but y has {len(gt)}")
    return [ImagePair(lo, g, f"{i:04d}") for i, (lo, g) in enumerate(zip(low, gt))]


def _to_output(images: list[np.ndarray]):
    out = [img.transpose(1, 2, 0) for img in images]
    if len({o.shape for o in out}) == 1:
        return np.stack(out)
    return out


class NaLSuperEnhancer(TransformerMixin, BaseEstimator):
    """Low-light enhancer: ``fit(low, normal)`` then ``transform(low)``.

    Images are channels-last RGB in [0, 1]. ``embeddings`` may be an
    :class:`EmbeddingSet`, a path to an NLSE file, or ``None`` to derive
    deterministic embeddings for ``prompts``.
    """

    def __init__(self, channels=8, num_blocks=3, attention_dim=16, d_tau=32, reduction=1,
                 delta_mode="fixed", ssim_window="gaussian11", loss="l1+ssim", steps=1500,
                 lr=1e-4, batch_size=1, prompts=DEFAULT_PROMPTS, embeddings=None,
                 dtype="float32", random_state=0):
        self.channels = channels
        self.num_blocks = num_blocks
        self.attention_dim = attention_dim
        self.d_tau = d_tau
        self.reduction = reduction
        self.delta_mode = delta_mode
        self.ssim_window = ssim_window
        self.loss = loss
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.prompts = prompts
        self.embeddings = embeddings
        self.dtype = dtype
        self.random_state = random_state

    def _embedding_set(self) -> EmbeddingSet:
        if isinstance(self.embeddings, EmbeddingSet):
            return self.embeddings
        if isinstance(self.embeddings, (str, Path)):
            return load_embeddings(self.embeddings)
        return embed_prompts(list(self.prompts), self.d_tau, self.random_state)

    def fit(self, X, y):
        pairs = check_image_pairs(X, y)
        embeddings = self._embedding_set()
        config = ModelConfig(
            channels=self.channels, num_blocks=self.num_blocks, attention_dim=self.attention_dim,
            d_tau=embeddings.d_tau, reduction=self.reduction, delta_mode=self.delta_mode,
            ssim_window=self.ssim_window, seed=self.random_state, dtype=self.dtype,
        )
        self.model_ = init_model(config, embeddings)
        self.run_ = train(self.model_, pairs, self.loss, steps=self.steps, seed=self.random_state,
                          lr=self.lr, batch_size=self.batch_size)
        self.loss_trace_ = np.array([row[1] for row in self.run_.trace])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _to_output([enhance(self.model_, img) for img in check_images(X)])

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of the enhanced images against ``y``."""
        check_is_fitted(self, "model_")
        low, gt = check_images(X, "X"), check_images(y, "y")
        return float(np.mean([psnr(enhance(self.model_, lo), g) for lo, g in zip(low, gt)]))
