"""Motion parameters and temporal windowing."""

from dataclasses import dataclass

import numpy as np

from ..exceptions import ValidationError

N_BETA = 64
N_ROT = 3
N_TRANS = 3
N_CROP = 3
N_PARAMS = N_BETA + N_ROT + N_TRANS + N_CROP
N_ALPHA = 80

# flattened layout: [beta | rot | trans | crop]
_SLICES = {
    "beta": slice(0, N_BETA),
    "rot": slice(N_BETA, N_BETA + N_ROT),
    "trans": slice(N_BETA + N_ROT, N_BETA + N_ROT + N_TRANS),
    "crop": slice(N_BETA + N_ROT + N_TRANS, N_PARAMS),
}


@dataclass(frozen=True, eq=False)
class MotionParams:
    """Per-frame motion description: expression, head rotation, translation and crop.

    ``rot`` holds yaw/pitch/roll in radians; ``trans`` and ``crop`` are in
    normalized image units where the image spans [-1, 1] on both axes.
    ``crop`` is ``(scale, center_x, center_y)``.
    """

    beta: np.ndarray
    rot: np.ndarray
    trans: np.ndarray
    crop: np.ndarray

    def __post_init__(self):
        for name, n in (("beta", N_BETA), ("rot", N_ROT), ("trans", N_TRANS), ("crop", N_CROP)):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (n,):
                raise ValidationError(f"{name} must have {n} entries, got {value.size}")
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"{name} contains non-finite values")
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(N_BETA), np.zeros(N_ROT), np.zeros(N_TRANS), np.zeros(N_CROP))

    def to_dict(self):
        return {name: [float(v) for v in getattr(self, name)] for name in _SLICES}

    @classmethod
    def from_dict(cls, d):
        missing = set(_SLICES) - set(d)
        if missing:
            raise ValidationError(f"params record missing keys: {sorted(missing)}")
        return cls(d["beta"], d["rot"], d["trans"], d["crop"])

    def __eq__(self, other):
        if not isinstance(other, MotionParams):
            return NotImplemented
        return bool(np.array_equal(flatten_params(self), flatten_params(other)))

    __hash__ = None


def flatten_params(p):
    """Concatenate ``p`` into a length-73 vector in ``[beta | rot | trans | crop]`` order."""
    return np.concatenate([p.beta, p.rot, p.trans, p.crop])


def unflatten_params(vec):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (N_PARAMS,):
        raise ValidationError(f"expected a vector of {N_PARAMS} params, got shape {vec.shape}")
    return MotionParams(**{name: vec[s] for name, s in _SLICES.items()})


def param_slice(name):
    return _SLICES[name]


def window_from_matrix(params, i, k):
    """Window of radius ``k`` around row ``i`` of an (N, 73) parameter matrix.

    Out-of-range frame indices are clamped to the sequence ends, so the
    result always has ``2k + 1`` columns.
    """
    params = np.asarray(params)
    n = len(params)
    if n == 0:
        raise ValidationError("cannot build a window from an empty sequence")
    if not 0 <= i < n:
        raise ValidationError(f"frame index {i} out of range for sequence of length {n}")
    if k < 0:
        raise ValidationError(f"window radius must be >= 0, got {k}")
    idx = np.clip(np.arange(i - k, i + k + 1), 0, n - 1)
    return params[idx].T.copy()


def make_window(seq, i, k):
    """73 x (2k+1) window of flattened params centred on frame ``i`` of ``seq``."""
    if hasattr(seq, "params"):
        return window_from_matrix(seq.params, i, k)
    return window_from_matrix(np.stack([flatten_params(p) for p in seq]) if len(seq) else np.zeros((0, N_PARAMS)), i, k)
