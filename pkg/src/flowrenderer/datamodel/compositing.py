"""Foreground/background separation and re-compositing.

Functions work on torch tensors with or without a leading batch axis and
keep autograd intact through the frame inputs; the masks derived from
thresholds are treated as constants.
"""

import torch

from ..exceptions import ValidationError
from ..validation import as_tensor

BLANK_EPS = 1e-3
_LUMA = (0.299, 0.587, 0.114)


def luminance(frame):
    frame = as_tensor(frame) if not isinstance(frame, torch.Tensor) else frame
    w = frame.new_tensor(_LUMA).view(3, 1, 1)
    return (frame * w).sum(dim=-3, keepdim=True)


def _check_sizes(frame, mask):
    if frame.shape[-3] != 3 or mask.shape[-3] != 1:
        raise ValidationError(
            f"expected (...,3,H,W) frame and (...,1,H,W) mask, got {tuple(frame.shape)} and {tuple(mask.shape)}"
        )
    if frame.shape[-2:] != mask.shape[-2:]:
        raise ValidationError(f"frame size {tuple(frame.shape[-2:])} != mask size {tuple(mask.shape[-2:])}")


def separate_foreground(frame, mask):
    """Split ``frame`` into ``(frame * mask, frame * (1 - mask))``."""
    frame = frame if isinstance(frame, torch.Tensor) else as_tensor(frame)
    mask = mask if isinstance(mask, torch.Tensor) else as_tensor(mask)
    _check_sizes(frame, mask)
    return frame * mask, frame * (1 - mask)


def composite_foreground(refined_fg, src_bg, src_mask, eps=BLANK_EPS):
    """Project a rendered foreground onto the source background.

    The foreground extent is taken to be every pixel whose luminance exceeds
    ``eps``. Source-face pixels the new foreground does not cover are blank:
    they are zeroed in the composite and returned as a binary mask.
    """
    refined_fg = refined_fg if isinstance(refined_fg, torch.Tensor) else as_tensor(refined_fg)
    src_bg = src_bg if isinstance(src_bg, torch.Tensor) else as_tensor(src_bg)
    src_mask = src_mask if isinstance(src_mask, torch.Tensor) else as_tensor(src_mask)
    _check_sizes(refined_fg, src_mask)
    _check_sizes(src_bg, src_mask)
    with torch.no_grad():
        new_mask = (luminance(refined_fg) > eps).to(refined_fg.dtype)
        blank = ((src_mask * (1 - new_mask)) > 0.5).to(refined_fg.dtype)
    composited = refined_fg * new_mask + src_bg * (1 - src_mask) * (1 - new_mask)
    return composited * (1 - blank), blank
