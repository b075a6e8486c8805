"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

All checks accept numpy arrays or torch tensors and return a float32 torch
tensor with an explicit batch axis, which is what the networks consume.
"""

import numpy as np
import torch

from .exceptions import ValidationError


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _batched(x, ndim, name):
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), True
    if x.ndim != ndim:
        raise ValidationError(f"{name} must have {ndim - 1} or {ndim} dims, got shape {tuple(x.shape)}")
    return x, False


def check_frame(frame, resolution=None, name="frame"):
    """Validate an RGB frame batch (N,3,H,W) or single frame (3,H,W) in [0,1].

    Returns ``(tensor, was_unbatched)``.
    """
    x, squeezed = _batched(as_tensor(frame), 4, name)
    if x.shape[1] != 3:
        raise ValidationError(f"{name} must have 3 channels, got {x.shape[1]}")
    H, W = x.shape[-2:]
    if H != W:
        raise ValidationError(f"{name} must be square, got {H}x{W}")
    if resolution is not None and H != resolution:
        raise ValidationError(f"{name} resolution {H} does not match configured {resolution}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return x, squeezed


def check_mask(mask, like=None, name="mask"):
    x, squeezed = _batched(as_tensor(mask), 4, name)
    if x.shape[1] != 1:
        raise ValidationError(f"{name} must have a single channel, got {x.shape[1]}")
    if like is not None and tuple(x.shape[-2:]) != tuple(like.shape[-2:]):
        raise ValidationError(
            f"{name} size {tuple(x.shape[-2:])} does not match frame size {tuple(like.shape[-2:])}"
        )
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return x, squeezed


def check_window(window, n_params=73, name="window"):
    x, squeezed = _batched(as_tensor(window), 3, name)
    if x.shape[1] != n_params:
        raise ValidationError(f"{name} must have {n_params} rows, got {x.shape[1]}")
    if x.shape[2] < 1:
        raise ValidationError(f"{name} has no columns")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    return x, squeezed


def check_resolution(resolution, multiple):
    if resolution <= 0 or resolution % multiple:
        raise ValidationError(f"resolution {resolution} must be a positive multiple of {multiple}")
    if resolution & (resolution - 1):
        raise ValidationError(f"resolution {resolution} must be a power of two")
    return resolution


def check_same_shape(a, b, what="inputs"):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
