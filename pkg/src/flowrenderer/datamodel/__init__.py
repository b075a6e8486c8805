from .compositing import BLANK_EPS, composite_foreground, luminance, separate_foreground
from .dataset import Sequence, load_dataset, load_sequence, save_sequence
from .params import (
    N_ALPHA,
    N_BETA,
    N_PARAMS,
    MotionParams,
    flatten_params,
    make_window,
    unflatten_params,
    window_from_matrix,
)
from .synthetic import (
    ShapeBasis,
    add_param_noise,
    landmarks_pixels,
    make_synthetic_dataset,
    make_synthetic_sequence,
    reconstruct_shape,
    synthetic_basis,
)

SequenceDataset = Sequence

__all__ = [
    "BLANK_EPS",
    "MotionParams",
    "N_ALPHA",
    "N_BETA",
    "N_PARAMS",
    "Sequence",
    "SequenceDataset",
    "ShapeBasis",
    "add_param_noise",
    "composite_foreground",
    "flatten_params",
    "landmarks_pixels",
    "load_dataset",
    "load_sequence",
    "luminance",
    "make_synthetic_dataset",
    "make_synthetic_sequence",
    "make_window",
    "reconstruct_shape",
    "save_sequence",
    "separate_foreground",
    "synthetic_basis",
    "unflatten_params",
    "window_from_matrix",
]
