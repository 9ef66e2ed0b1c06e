"""Text-conditioned low-light image enhancement on a small numpy autodiff engine."""
from .errors import DimensionError, FormatError, NumericError, UsageError
from .estimator import NaLSuperEnhancer, check_image_pairs, check_images
from .imageio import read_image, write_image
from .losses import image_ssim, l1_loss, mae, psnr, ssim, ssim_loss, total_loss
from .network import (
    ModelConfig,
    NaLSuperModel,
    checkpoint_bytes,
    forward,
    forward_features,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .tensor import Tensor, backward, no_grad
from .text import DEFAULT_PROMPTS, EmbeddingSet, embed_prompts, load_embeddings, write_embeddings
from .training import ImagePair, evaluate, enhance, load_paired_dataset, make_synthetic, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PROMPTS", "DimensionError", "EmbeddingSet", "FormatError", "ImagePair", "ModelConfig",
    "NaLSuperEnhancer", "NaLSuperModel", "NumericError", "Tensor", "UsageError", "backward",
    "check_image_pairs", "check_images", "checkpoint_bytes", "embed_prompts", "enhance", "evaluate",
    "forward", "forward_features", "image_ssim", "init_model", "l1_loss", "load_checkpoint",
    "load_embeddings", "load_paired_dataset", "mae", "make_synthetic", "no_grad", "parameter_count",
    "psnr", "read_image", "save_checkpoint", "ssim", "ssim_loss", "total_loss", "train",
    "write_embeddings", "write_image",
]
