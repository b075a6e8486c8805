"""TransUNet: a motion-conditioned UNet used twice, as refiner and as inpainter."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ValidationError
from .warp3d import LEAK, AdaIN


class _EncoderLevel(nn.Module):
    def __init__(self, cin, cout, motion_dim, use_adain):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = AdaIN(cout, motion_dim) if use_adain else None
        self.norm2 = AdaIN(cout, motion_dim) if use_adain else None

    def forward(self, x, T):
        x = self.conv1(x)
        x = F.leaky_relu(self.norm1(x, T) if self.norm1 is not None else x, LEAK)
        x = self.conv2(x)
        return F.leaky_relu(self.norm2(x, T) if self.norm2 is not None else x, LEAK)


class _DecoderLevel(nn.Module):
    def __init__(self, cin, cout, motion_dim, use_adain):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = AdaIN(cout, motion_dim) if use_adain else None
        self.norm2 = AdaIN(cout, motion_dim) if use_adain else None

    def forward(self, x, skip, T):
        x = torch.cat([F.interpolate(x, scale_factor=2, mode="nearest"), skip], dim=1)
        x = self.conv1(x)
        x = F.leaky_relu(self.norm1(x, T) if self.norm1 is not None else x, LEAK)
        x = self.conv2(x)
        return F.leaky_relu(self.norm2(x, T) if self.norm2 is not None else x, LEAK)


class TransUNet(nn.Module):
    """UNet with max-pool encoder levels and nearest-upsample decoder levels.

    Decoder convs are each followed by an AdaIN site fed with the motion
    vector, giving ``2 * depth`` sites. ``adain_in_encoder`` adds sites to
    the encoder convs as well; ``use_adain=False`` removes all of them.
    """

    def __init__(self, in_channels=6, motion_dim=256, depth=4, base_width=32, use_adain=True, adain_in_encoder=False):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        widths = [base_width * 2**i for i in range(depth)]
        self.encoder = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.encoder.append(_EncoderLevel(cin, w, motion_dim, use_adain and adain_in_encoder))
            cin = w
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.decoder.append(_DecoderLevel(cin + w, w, motion_dim, use_adain))
            cin = w
        self.out = nn.Conv2d(cin, 3, 1)

    def n_adain_sites(self, part=None):
        mods = self if part is None else getattr(self, part)
        return sum(1 for m in mods.modules() if isinstance(m, AdaIN))

    def forward(self, x, T):
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"TransUNet expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise ValidationError(f"input size {tuple(x.shape[-2:])} not divisible by 2**{self.depth}")
        skips = []
        for level in self.encoder:
            x = level(x, T)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        for level, skip in zip(self.decoder, reversed(skips)):
            x = level(x, skip, T)
        return torch.sigmoid(self.out(x))


def transunet_forward(inputs, T, net):
    return net(inputs, T)


def refine(src_fg, warped, T, refiner):
    """Refine a warped foreground given the source foreground."""
    if src_fg.shape != warped.shape:
        raise ValidationError(f"source {tuple(src_fg.shape)} and warped {tuple(warped.shape)} differ in shape")
    return refiner(torch.cat([src_fg, warped], dim=1), T)


def inpaint(composited, T, inpainter):
    """Fill the blank region of a composited frame."""
    return inpainter(composited, T)
