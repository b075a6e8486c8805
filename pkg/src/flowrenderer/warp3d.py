"""3D warping stage: feature encoder, dense flow predictor, trilinear warp, decoder.

Volumes are (N, C, D, H, W). Flow fields are (N, 3, D, H, W) displacements
in normalized coordinates, channel order (depth, height, width); every
axis spans [-1, 1] across the volume with the end voxels at -1 and 1.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ValidationError

LEAK = 0.2
IN_EPS = 1e-5


def adaptive_instance_norm(x, scale, bias, eps=IN_EPS):
    """Per-sample, per-channel normalization over all spatial axes, then ``scale * x_hat + bias``.

    ``scale`` and ``bias`` are (N, C).
    """
    dims = tuple(range(2, x.ndim))
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    x_hat = (x - mean) / torch.sqrt(var + eps)
    shape = scale.shape + (1,) * (x.ndim - 2)
    return scale.reshape(shape) * x_hat + bias.reshape(shape)


class AdaIN(nn.Module):
    """Instance normalization modulated by a motion vector through a learned affine map.

    Initialized so that scale == 1 and bias == 0 for every motion vector.
    """

    def __init__(self, num_channels, motion_dim):
        super().__init__()
        self.num_channels = num_channels
        self.affine = nn.Linear(motion_dim, 2 * num_channels)
        nn.init.zeros_(self.affine.weight)
        with torch.no_grad():
            self.affine.bias.zero_()
            self.affine.bias[:num_channels] = 1.0

    def forward(self, x, T):
        if x.shape[1] != self.num_channels:
            raise ValidationError(f"AdaIN expects {self.num_channels} channels, got {x.shape[1]}")
        scale, bias = self.affine(T).chunk(2, dim=-1)
        return adaptive_instance_norm(x, scale, bias)


def adain3d(x, T, adain):
    """Apply an :class:`AdaIN` site to a (C,D,H,W) or (N,C,D,H,W) volume."""
    squeeze = x.ndim == 4
    if squeeze:
        x, T = x.unsqueeze(0), T.unsqueeze(0)
    if x.ndim != 5:
        raise ValidationError(f"adain3d expects a 4D or 5D volume, got shape {tuple(x.shape)}")
    out = adain(x, T)
    return out[0] if squeeze else out


def _axis_weights(pos, n):
    """Lower lattice index and fractional offset along one axis (pos in index units)."""
    if n == 1:
        zero = torch.zeros_like(pos)
        return zero.long(), zero
    i0 = pos.detach().floor().clamp(0, n - 2)
    return i0.long(), pos - i0


def warp_volume(vol, flow):
    """Trilinear resampling of ``vol`` at ``identity_grid + flow`` with border clamping.

    Differentiable with respect to both arguments. Accepts unbatched
    (C,D,H,W)/(3,D,H,W) inputs as well.
    """
    squeeze = vol.ndim == 4
    if squeeze:
        vol, flow = vol.unsqueeze(0), flow.unsqueeze(0)
    if vol.ndim != 5 or flow.ndim != 5 or flow.shape[1] != 3:
        raise ValidationError(f"bad shapes for warp_volume: vol {tuple(vol.shape)}, flow {tuple(flow.shape)}")
    if vol.shape[0] != flow.shape[0] or vol.shape[2:] != flow.shape[2:]:
        raise ValidationError(f"flow {tuple(flow.shape)} does not match volume {tuple(vol.shape)}")
    N, C, D, H, W = vol.shape
    sizes = (D, H, W)

    # Work in index space so that zero flow lands exactly on lattice points.
    lattice = torch.meshgrid(
        *(torch.arange(n, dtype=flow.dtype, device=flow.device) for n in sizes), indexing="ij"
    )
    idx, frac = [], []
    for axis, n in enumerate(sizes):
        pos = (lattice[axis] + flow[:, axis] * (n - 1) / 2).clamp(0, n - 1)
        i0, t = _axis_weights(pos, n)
        idx.append((i0, (i0 + 1).clamp(max=n - 1)))
        frac.append(t)

    flat = vol.reshape(N, C, D * H * W)
    out = 0
    for cd in (0, 1):
        wd = frac[0] if cd else 1 - frac[0]
        for ch in (0, 1):
            wh = frac[1] if ch else 1 - frac[1]
            for cw in (0, 1):
                ww = frac[2] if cw else 1 - frac[2]
                lin = (idx[0][cd] * H + idx[1][ch]) * W + idx[2][cw]
                gathered = torch.gather(flat, 2, lin.reshape(N, 1, -1).expand(N, C, -1))
                out = out + gathered.reshape(N, C, D, H, W) * (wd * wh * ww).unsqueeze(1)
    return out[0] if squeeze else out


class ConvDown3D(nn.Module):
    """Two 3D convs with an additive (strided 1x1x1) skip; halves H and W, keeps depth."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1, stride=(1, 2, 2))

    def forward(self, x):
        y = self.conv2(F.leaky_relu(self.conv1(x), LEAK))
        return F.leaky_relu(y + self.skip(x), LEAK)


class _Stem2D(nn.Module):
    """Two stride-2 convs, then fold channels into (channels, depth)."""

    def __init__(self, widths, depth):
        super().__init__()
        c1, c2 = widths
        if c2 % depth:
            raise ValidationError(f"stem width {c2} not divisible by depth {depth}")
        self.depth = depth
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)

    @property
    def out_channels(self):
        return self.conv2.out_channels // self.depth

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), LEAK)
        x = F.leaky_relu(self.conv2(x), LEAK)
        N, C, H, W = x.shape
        return x.reshape(N, C // self.depth, self.depth, H, W)


def downsample_factor(n_blocks):
    return 4 * 2**n_blocks


class FeatureEncoder3D(nn.Module):
    """Source foreground (N,3,H,W) -> appearance volume (N, C, D, H/f, W/f), f = 4 * 2**len(channels)."""

    def __init__(self, stem=(64, 128), depth=8, channels=(32, 64, 64)):
        super().__init__()
        self.stem = _Stem2D(stem, depth)
        blocks, cin = [], self.stem.out_channels
        for cout in channels:
            blocks.append(ConvDown3D(cin, cout))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.factor = downsample_factor(len(channels))
        self.out_channels = cin
        self.depth = depth

    def forward(self, x):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValidationError(f"input size {tuple(x.shape[-2:])} not divisible by {self.factor}")
        return self.blocks(self.stem(x))


class _ConvAdaIN3D(nn.Module):
    def __init__(self, cin, cout, motion_dim, stride=1):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.norm = AdaIN(cout, motion_dim)

    def forward(self, x, T):
        return F.leaky_relu(self.norm(self.conv(x), T), LEAK)


class FlowPredictor(nn.Module):
    """Motion-conditioned 3D auto-encoder predicting a tanh-bounded flow field.

    The lifting path mirrors :class:`FeatureEncoder3D` (one spatial halving
    per entry of ``lift_channels``) so the flow lands on the appearance
    volume's lattice. The auto-encoder then halves depth and space
    ``levels`` times and transposed-convolves back, concatenating the
    matching encoder features. Every conv is followed by AdaIN.
    """

    def __init__(self, motion_dim=256, stem=(32, 64), depth=8, lift_channels=(16, 32, 32), levels=1):
        super().__init__()
        self.stem = _Stem2D(stem, depth)
        self.lift = nn.ModuleList()
        cin = self.stem.out_channels
        for cout in lift_channels:
            self.lift.append(_ConvAdaIN3D(cin, cout, motion_dim, stride=(1, 2, 2)))
            cin = cout
        self.down = nn.ModuleList()
        skips = []
        for _ in range(levels):
            skips.append(cin)
            self.down.append(_ConvAdaIN3D(cin, 2 * cin, motion_dim, stride=2))
            cin = 2 * cin
        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        self.merge = nn.ModuleList()
        for skip in reversed(skips):
            self.up.append(nn.ConvTranspose3d(cin, skip, 2, stride=2))
            self.up_norm.append(AdaIN(skip, motion_dim))
            self.merge.append(_ConvAdaIN3D(2 * skip, skip, motion_dim))
            cin = skip
        self.head = nn.Conv3d(cin, 3, 3, padding=1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()
        self.factor = downsample_factor(len(lift_channels))
        self.levels = levels
        self.depth = depth

    def n_adain_sites(self):
        return sum(1 for m in self.modules() if isinstance(m, AdaIN))

    def forward(self, x, T):
        if x.shape[-1] % self.factor:
            raise ValidationError(f"input size {tuple(x.shape[-2:])} not divisible by {self.factor}")
        h = self.stem(x)
        for block in self.lift:
            h = block(h, T)
        if any(s % 2**self.levels for s in h.shape[2:]):
            raise ValidationError(f"flow lattice {tuple(h.shape[2:])} cannot be halved {self.levels} times")
        skips = []
        for block in self.down:
            skips.append(h)
            h = block(h, T)
        for up, norm, merge, skip in zip(self.up, self.up_norm, self.merge, reversed(skips)):
            h = F.leaky_relu(norm(up(h), T), LEAK)
            h = merge(torch.cat([h, skip], dim=1), T)
        return torch.tanh(self.head(h))


class ZeroFlowPredictor(nn.Module):
    """Stand-in predictor emitting zero flow on the encoder's lattice (identity warp)."""

    def __init__(self, depth=8, factor=32):
        super().__init__()
        self.depth = depth
        self.factor = factor

    def forward(self, x, T):
        N, _, H, W = x.shape
        return x.new_zeros(N, 3, self.depth, H // self.factor, W // self.factor)


class _ResBlock2D(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(width, affine=True)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(width, affine=True)

    def forward(self, x):
        y = self.norm2(self.conv2(F.leaky_relu(self.norm1(self.conv1(x)), LEAK)))
        return F.leaky_relu(x + y, LEAK)


class FeatureDecoder3D(nn.Module):
    """Volume (N,C,D,h,w) -> RGB (N,3,h*2**n_up, w*2**n_up) in [0,1].

    Depth is folded back into channels, projected to ``width`` by a 1x1
    conv, refined by constant-width residual blocks and upsampled with
    nearest-neighbour + conv stages.
    """

    def __init__(self, in_channels=64, depth=8, width=128, n_res=3, n_up=5, min_width=16):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        self.proj = nn.Conv2d(in_channels * depth, width, 1)
        self.res = nn.Sequential(*(_ResBlock2D(width) for _ in range(n_res)))
        ups, norms, cin = [], [], width
        for i in range(n_up):
            cout = max(width >> (i + 1), min_width)
            ups.append(nn.Conv2d(cin, cout, 3, padding=1))
            norms.append(nn.InstanceNorm2d(cout, affine=True))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.up_norms = nn.ModuleList(norms)
        self.out = nn.Conv2d(cin, 3, 3, padding=1)

    def forward(self, vol):
        N, C, D, h, w = vol.shape
        if C != self.in_channels or D != self.depth:
            raise ValidationError(
                f"decoder expects (C={self.in_channels}, D={self.depth}) volumes, got (C={C}, D={D})"
            )
        x = F.leaky_relu(self.proj(vol.reshape(N, C * D, h, w)), LEAK)
        x = self.res(x)
        for conv, norm in zip(self.ups, self.up_norms):
            x = F.leaky_relu(norm(conv(F.interpolate(x, scale_factor=2, mode="nearest"))), LEAK)
        return torch.sigmoid(self.out(x))


def encode3d(src_fg, encoder):
    return encoder(src_fg)


def predict_flow(src_fg, T, flow_net, volume_shape=None):
    flow = flow_net(src_fg, T)
    if volume_shape is not None and tuple(flow.shape[2:]) != tuple(volume_shape[-3:]):
        raise ValidationError(f"flow lattice {tuple(flow.shape[2:])} != volume lattice {tuple(volume_shape[-3:])}")
    return flow


def decode3d(vol, decoder):
    return decoder(vol)


def warp_forward(src_fg, T, encoder, flow_net, decoder):
    """Encode, predict flow, warp and decode. Returns ``(warped, warped_volume, flow)``."""
    vol = encoder(src_fg)
    flow = predict_flow(src_fg, T, flow_net, vol.shape)
    f_w = warp_volume(vol, flow)
    return decoder(f_w), f_w, flow
