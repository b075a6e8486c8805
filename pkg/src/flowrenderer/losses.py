"""Training objectives.

All reductions are per-element means so loss magnitudes do not depend on
resolution. Perceptual-style losses sum their per-stage means over the
stages of a :class:`PerceptualFeatureExtractor`.
"""

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel.compositing import composite_foreground
from .exceptions import NumericalError, ValidationError
from .transunet import inpaint
from .warp3d import LEAK, warp_forward

TERMS = (
    "perceptual_warp",
    "cyclic_warp",
    "warp3d_feature",
    "roundtrip_feature",
    "inpainting",
    "refiner_perceptual",
    "refiner_style",
)
PHASE1_TERMS = TERMS[:5]


@dataclass
class LossWeights:
    perceptual_warp: float = 2.5
    cyclic_warp: float = 2.5
    warp3d_feature: float = 100.0
    roundtrip_feature: float = 100.0
    inpainting: float = 2.5
    refiner_perceptual: float = 4.0
    refiner_style: float = 1000.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {f.name} must be finite and non-negative, got {v}")
            setattr(self, f.name, v)

    def as_dict(self):
        return asdict(self)


class PerceptualFeatureExtractor(nn.Module):
    """Frozen, seeded random convnet standing in for a pretrained backbone.

    Any module returning a list of activation maps can be used instead.
    """

    def __init__(self, widths=(8, 16, 32), strides=(1, 2, 2), seed=0):
        super().__init__()
        if len(widths) != len(strides) or not widths:
            raise ValidationError("widths and strides must be non-empty and of equal length")
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        cin = 3
        for w, s in zip(widths, strides):
            conv = nn.Conv2d(cin, w, 3, stride=s, padding=1)
            bound = 1.0 / math.sqrt(cin * 9)
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen) * math.sqrt(3))
                conv.bias.copy_(torch.empty_like(conv.bias).uniform_(-bound, bound, generator=gen))
            self.stages.append(conv)
            cin = w
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), LEAK)
            feats.append(x)
        return feats


class IdentityExtractor(nn.Module):
    """Single stage returning its input; turns perceptual losses into plain L1."""

    def forward(self, x):
        return [x]


def _paired(a, b, phi):
    if a.shape != b.shape:
        raise ValidationError(f"size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    n = a.shape[0] if a.ndim == 4 else None
    if n is None:
        a, b, n = a.unsqueeze(0), b.unsqueeze(0), 1
    feats = phi(torch.cat([a, b], dim=0))
    return [(f[:n], f[n:]) for f in feats]


def perceptual_loss(a, b, phi):
    return sum((fa - fb).abs().mean() for fa, fb in _paired(a, b, phi))


def l1_image(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def gram_matrix(act):
    """A A^T / (C H W) for activations (C,H,W) or a batch (N,C,H,W)."""
    squeeze = act.ndim == 3
    if squeeze:
        act = act.unsqueeze(0)
    N, C, H, W = act.shape
    A = act.reshape(N, C, H * W)
    G = A @ A.transpose(1, 2) / (C * H * W)
    return G[0] if squeeze else G


def style_loss(a, b, phi):
    return sum((gram_matrix(fa) - gram_matrix(fb)).abs().mean() for fa, fb in _paired(a, b, phi))


def warp3d_feature_loss(f_w, t_if):
    if f_w.shape != t_if.shape:
        raise ValidationError(f"volume shape mismatch: {tuple(f_w.shape)} vs {tuple(t_if.shape)}")
    return ((f_w - t_if) ** 2).mean()


def cyclic_warp_loss(I, window_target, window_source, mapping, encoder, flow_net, decoder):
    """Warp ``I`` towards the target motion, then warp the result back towards
    the source's own motion with the same weights; L1 to the original."""
    T = mapping(window_target)
    I_w = warp_forward(I, T, encoder, flow_net, decoder)[0]
    return cyclic_from_warped(I, I_w, mapping(window_source), encoder, flow_net, decoder)


def cyclic_from_warped(I, I_w, T_s, encoder, flow_net, decoder):
    """Backward half of the cycle: ``I_w`` becomes the source, ``I``'s own motion the target."""
    I_bw = warp_forward(I_w, T_s, encoder, flow_net, decoder)[0]
    return l1_image(I_bw, I)


def roundtrip_feature_loss(I, encoder, decoder, phi):
    return perceptual_loss(decoder(encoder(I)), I, phi)


def inpainting_loss(fg, src_bg, src_mask, target, T, inpainter, phi):
    """Project ``fg`` onto the source background, inpaint, compare to the full target.

    ``fg`` is the target foreground in the first training phase and the
    refiner output in the second.
    """
    composited, _ = composite_foreground(fg, src_bg, src_mask)
    return perceptual_loss(inpaint(composited, T, inpainter), target, phi)


def check_finite(components):
    for name, value in components.items():
        v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise NumericalError(f"loss term {name} is not finite ({float(v)})", term=name)


def total_loss(components, weights=None):
    """Weighted sum of the named loss terms present in ``components``."""
    weights = weights or LossWeights()
    unknown = set(components) - set(TERMS)
    if unknown:
        raise ValidationError(f"unknown loss terms: {sorted(unknown)}")
    check_finite(components)
    return sum(getattr(weights, name) * components[name] for name in TERMS if name in components)
