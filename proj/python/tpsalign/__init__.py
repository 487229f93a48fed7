"""Cross-view alignment toolkit.

Spline-based feature warping, masked prototype alignment and retrieval
metrics, backed by the C++ core. Import this package with the build's
``python/`` directory on ``PYTHONPATH``.
"""

from ._core import (
    ConfigError,
    IoError,
    NumericError,
    align_loss,
    average_precision,
    deformation_loss,
    entropy_loss,
    evaluate,
    evaluate_embeddings,
    generate_dataset,
    gradcheck,
    inverse_negative_penalty,
    render_sample,
    rotation_warp_grid,
    train,
)

__all__ = [
    "ConfigError",
    "IoError",
    "NumericError",
    "align_loss",
    "average_precision",
    "deformation_loss",
    "entropy_loss",
    "evaluate",
    "evaluate_embeddings",
    "generate_dataset",
    "gradcheck",
    "inverse_negative_penalty",
    "render_sample",
    "rotation_warp_grid",
    "train",
]
