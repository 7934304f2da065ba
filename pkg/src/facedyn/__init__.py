"""3D facial dynamics: morphable-model fitting, sparse texture priors, LSTM sequence prediction."""

from facedyn.mmodel import (
    N_EXPR,
    N_LANDMARKS,
    N_PARAMS,
    N_POSE,
    N_SHAPE,
    CoeffVector,
    FitResult,
    MorphableModel,
    ProjectedVerts,
    Shape3D,
    evaluate_shape,
    fit_landmarks,
    landmarks_from_coeffs,
    load_model,
    project,
    recombine,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "N_EXPR",
    "N_LANDMARKS",
    "N_PARAMS",
    "N_POSE",
    "N_SHAPE",
    "CoeffVector",
    "FitResult",
    "MorphableModel",
    "ProjectedVerts",
    "Shape3D",
    "evaluate_shape",
    "fit_landmarks",
    "landmarks_from_coeffs",
    "load_model",
    "project",
    "recombine",
    "save_model",
]
