"""Full-spectrum OOD detection on precomputed vision-language embeddings."""

from ._oodscope import (
    FormatError,
    IoError,
    ValidationError,
    auroc,
    calibrate_threshold,
    decide,
    evaluate,
    fpr_at_tpr,
    generate_benchmark,
    l2_normalize,
    load_embeddings,
    predict_argmax,
    save_embeddings,
    score_energy,
    score_gl_mcm,
    score_hier_mcm,
    score_max_logit,
    score_mcm,
    score_msp,
    shots_sweep,
    tune,
)

__all__ = [
    "FormatError",
    "IoError",
    "ValidationError",
    "auroc",
    "calibrate_threshold",
    "decide",
    "evaluate",
    "fpr_at_tpr",
    "generate_benchmark",
    "l2_normalize",
    "load_embeddings",
    "predict_argmax",
    "save_embeddings",
    "score_energy",
    "score_gl_mcm",
    "score_hier_mcm",
    "score_max_logit",
    "score_mcm",
    "score_msp",
    "shots_sweep",
    "tune",
]

__version__ = "0.1.0"
