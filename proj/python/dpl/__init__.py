"""Cross-quality deepfake detection with dual-branch progressive learning."""

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    ConfigError,
    Error,
    InsufficientDataError,
    Quantizer,
    SingleClassError,
    auc,
    clipped_surrogate,
    evaluate,
    export_embeddings,
    fit_indicators,
    fit_quantizer,
    jpeg_roundtrip,
    load_config,
    make_synthetic_dataset,
    perturb,
    rewards,
    score_from_similarities,
    sha256,
    stub_indicator,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_") and name != "torch"]
