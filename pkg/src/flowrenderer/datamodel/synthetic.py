"""Deterministic synthetic talking-head data.

Faces are a 32-landmark linear morphable model (mean shape plus identity
and expression bases), posed by the per-frame rotation/translation/crop
and rasterized as a filled head outline with eye and mouth ellipses over
a textured background. A fixed subset of expression coefficients drives
visible features, so generated frames carry exact ground truth for every
parameter that matters to the image:

    beta[0]  left-eye openness      beta[2]  mouth openness
    beta[1]  right-eye openness     beta[3]  mouth width

The remaining expression coefficients only nudge landmarks by a few
thousandths of the image size.
"""

from dataclasses import dataclass

import numpy as np

from ..exceptions import ValidationError
from .params import N_ALPHA, N_BETA, N_PARAMS, param_slice, unflatten_params

N_VERTICES = 32
CONTOUR = slice(0, 20)
L_EYE_UP, L_EYE_LO, R_EYE_UP, R_EYE_LO = 20, 21, 22, 23
L_EYE_OUT, L_EYE_IN, R_EYE_IN, R_EYE_OUT = 24, 25, 26, 27
MOUTH_L, MOUTH_R, LIP_UP, LIP_LO = 28, 29, 30, 31

EXPRESSION_COMPONENTS = {"left_eye": 0, "right_eye": 1, "mouth_open": 2, "mouth_width": 3}

BASIS_SEED = 20240917
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeBasis:
    mean_shape: np.ndarray  # (V, 3)
    id_basis: np.ndarray  # (V, 3, 80)
    exp_basis: np.ndarray  # (V, 3, 64)

    def __post_init__(self):
        V = self.mean_shape.shape[0]
        if self.mean_shape.shape != (V, 3):
            raise ValidationError(f"mean_shape must be (V, 3), got {self.mean_shape.shape}")
        if self.id_basis.shape != (V, 3, N_ALPHA):
            raise ValidationError(f"id_basis must be ({V}, 3, {N_ALPHA}), got {self.id_basis.shape}")
        if self.exp_basis.shape != (V, 3, N_BETA):
            raise ValidationError(f"exp_basis must be ({V}, 3, {N_BETA}), got {self.exp_basis.shape}")

    @property
    def n_vertices(self):
        return self.mean_shape.shape[0]


def reconstruct_shape(basis, alpha, beta):
    """Vertices of the linear face model: mean + id_basis @ alpha + exp_basis @ beta."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (basis.id_basis.shape[2],):
        raise ValidationError(f"alpha must have {basis.id_basis.shape[2]} entries, got shape {alpha.shape}")
    if beta.shape != (basis.exp_basis.shape[2],):
        raise ValidationError(f"beta must have {basis.exp_basis.shape[2]} entries, got shape {beta.shape}")
    return basis.mean_shape + basis.id_basis @ alpha + basis.exp_basis @ beta


def synthetic_basis(seed=BASIS_SEED):
    """The fixed face basis used by the synthetic generator."""
    rng = np.random.default_rng(seed)
    mean = np.zeros((N_VERTICES, 3))
    theta = np.linspace(0.0, 2 * np.pi, 20, endpoint=False)
    mean[CONTOUR] = np.stack([0.55 * np.cos(theta), 0.7 * np.sin(theta), np.full(20, -0.1)], axis=1)
    mean[L_EYE_OUT] = (-0.34, -0.12, 0.25)
    mean[L_EYE_IN] = (-0.10, -0.12, 0.25)
    mean[R_EYE_IN] = (0.10, -0.12, 0.25)
    mean[R_EYE_OUT] = (0.34, -0.12, 0.25)
    mean[L_EYE_UP] = (-0.22, -0.15, 0.26)
    mean[L_EYE_LO] = (-0.22, -0.09, 0.26)
    mean[R_EYE_UP] = (0.22, -0.15, 0.26)
    mean[R_EYE_LO] = (0.22, -0.09, 0.26)
    mean[MOUTH_L] = (-0.18, 0.32, 0.2)
    mean[MOUTH_R] = (0.18, 0.32, 0.2)
    mean[LIP_UP] = (0.0, 0.29, 0.22)
    mean[LIP_LO] = (0.0, 0.35, 0.22)

    exp = rng.normal(0.0, 0.004, size=(N_VERTICES, 3, N_BETA))
    exp[:, :, :4] = 0.0
    exp[L_EYE_UP, 1, 0], exp[L_EYE_LO, 1, 0] = -0.03, 0.03
    exp[R_EYE_UP, 1, 1], exp[R_EYE_LO, 1, 1] = -0.03, 0.03
    exp[LIP_UP, 1, 2], exp[LIP_LO, 1, 2] = -0.04, 0.04
    exp[MOUTH_L, 0, 3], exp[MOUTH_R, 0, 3] = -0.05, 0.05

    ident = rng.normal(0.0, 0.003, size=(N_VERTICES, 3, N_ALPHA))
    ident[:, :, :2] = 0.0
    ident[:, 0, 0] = 0.1 * mean[:, 0]
    ident[:, 1, 1] = 0.1 * mean[:, 1]
    return ShapeBasis(mean, ident, exp)


def rotation_matrix(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def project_vertices(vertices, p):
    """Pose and orthographically project (V, 3) vertices to normalized image coords (V, 2)."""
    posed = vertices @ rotation_matrix(*p.rot).T
    scale = p.crop[0] * (1.0 + 0.25 * p.trans[2])
    center = np.array([p.crop[1] + p.trans[0], p.crop[2] + p.trans[1]])
    return scale * posed[:, :2] + center


def landmarks_pixels(basis, alpha, p, resolution):
    """Projected landmark positions in pixel units (x, y), pixel centres at integers."""
    uv = project_vertices(reconstruct_shape(basis, alpha, p.beta), p)
    return (uv + 1.0) * 0.5 * resolution - 0.5


def _inside_polygon(px, py, poly):
    inside = np.zeros(px.shape, dtype=bool)
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for a, b, c, d in zip(x1, y1, x2, y2):
        crosses = (b > py) != (d > py)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < xint)
    return inside


def _inside_ellipse(px, py, p_a, p_b, p_up, p_lo, min_half_height):
    center = 0.5 * (p_a + p_b)
    axis = p_b - p_a
    half_w = 0.5 * np.hypot(*axis)
    half_h = max(0.5 * np.hypot(*(p_lo - p_up)), min_half_height)
    ang = np.arctan2(axis[1], axis[0])
    dx, dy = px - center[0], py - center[1]
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    return (u / half_w) ** 2 + (v / half_h) ** 2 <= 1.0, center, min(half_w, half_h)


def background_texture(rng, resolution):
    ss = resolution * _SUPERSAMPLE
    c = -1.0 + (2 * np.arange(ss) + 1) / ss
    X, Y = np.meshgrid(c, c)
    freqs = rng.uniform(1.0, 4.0, size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 3))
    base = rng.uniform(0.35, 0.65, size=3)
    out = np.empty((3, ss, ss))
    for ch in range(3):
        f, ph = freqs[ch], phases[ch]
        out[ch] = (
            base[ch]
            + 0.18 * np.sin(np.pi * f[0] * X + ph[0])
            + 0.12 * np.cos(np.pi * f[1] * Y + ph[1])
            + 0.08 * np.sin(np.pi * f[2] * (X + Y) + ph[2])
        )
    return np.clip(out, 0.02, 0.98)


def render_frame(basis, alpha, p, background, skin):
    """Rasterize one frame. Returns ``(frame (3,H,W), mask (1,H,W))`` as float64 in [0,1]."""
    ss = background.shape[-1]
    c = -1.0 + (2 * np.arange(ss) + 1) / ss
    px, py = np.meshgrid(c, c)
    uv = project_vertices(reconstruct_shape(basis, alpha, p.beta), p)

    head = _inside_polygon(px, py, uv[CONTOUR])
    head_center = uv[CONTOUR].mean(axis=0)
    scale = p.crop[0] * (1.0 + 0.25 * p.trans[2])
    rho2 = ((px - head_center[0]) ** 2 + (py - head_center[1]) ** 2) / (0.6 * scale) ** 2
    shade = np.clip(1.0 - 0.25 * rho2, 0.6, 1.0)
    face = np.asarray(skin).reshape(3, 1, 1) * shade

    for out_i, in_i, up_i, lo_i in ((L_EYE_OUT, L_EYE_IN, L_EYE_UP, L_EYE_LO), (R_EYE_IN, R_EYE_OUT, R_EYE_UP, R_EYE_LO)):
        eye, center, radius = _inside_ellipse(px, py, uv[out_i], uv[in_i], uv[up_i], uv[lo_i], 0.004)
        face = np.where(eye, np.array([0.95, 0.95, 0.93]).reshape(3, 1, 1), face)
        pupil = eye & ((px - center[0]) ** 2 + (py - center[1]) ** 2 <= (0.8 * radius) ** 2)
        face = np.where(pupil, np.array([0.08, 0.06, 0.05]).reshape(3, 1, 1), face)
    mouth, _, _ = _inside_ellipse(px, py, uv[MOUTH_L], uv[MOUTH_R], uv[LIP_UP], uv[LIP_LO], 0.008)
    face = np.where(mouth, np.array([0.55, 0.10, 0.12]).reshape(3, 1, 1), face)

    img = np.where(head, face, background)
    n = ss // _SUPERSAMPLE
    frame = img.reshape(3, n, _SUPERSAMPLE, n, _SUPERSAMPLE).mean(axis=(2, 4))
    mask = head.reshape(1, n, _SUPERSAMPLE, n, _SUPERSAMPLE).mean(axis=(2, 4))
    return frame, mask


def _smooth_track(rng, n, amplitude):
    t = np.arange(n)
    f = rng.uniform(0.02, 0.08, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    return amplitude * (np.sin(2 * np.pi * f[0] * t + ph[0]) + 0.5 * np.sin(2 * np.pi * f[1] * t + ph[1])) / 1.5


def synthetic_params(rng, n_frames):
    """(n_frames, 73) smoothly varying parameter matrix."""
    P = np.zeros((n_frames, N_PARAMS))
    beta = param_slice("beta").start
    for j in range(N_BETA):
        P[:, beta + j] = _smooth_track(rng, n_frames, 1.0 if j < 4 else 0.3)
    rot = param_slice("rot").start
    for j, amp in enumerate((0.25, 0.15, 0.15)):
        P[:, rot + j] = _smooth_track(rng, n_frames, amp)
    trans = param_slice("trans").start
    for j, amp in enumerate((0.12, 0.12, 0.1)):
        P[:, trans + j] = _smooth_track(rng, n_frames, amp)
    crop = param_slice("crop")
    P[:, crop] = np.array([rng.uniform(0.9, 1.1), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)])
    return P


def _quantize(x):
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_synthetic_sequence(seed, n_frames, resolution=64, seq_id=None, basis=None):
    """Render a seeded sequence. Pixel values are quantized to 8 bits so the
    in-memory sequence equals its PNG round trip."""
    from .dataset import Sequence

    if n_frames < 2:
        raise ValidationError(f"n_frames must be >= 2, got {n_frames}")
    if resolution < 8:
        raise ValidationError(f"resolution must be >= 8, got {resolution}")
    basis = basis or synthetic_basis()
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0.0, 1.0, size=N_ALPHA) * np.r_[0.8, 0.8, np.full(N_ALPHA - 2, 0.5)]
    skin = rng.uniform([0.65, 0.45, 0.35], [0.95, 0.75, 0.6])
    background = background_texture(rng, resolution)
    params = synthetic_params(rng, n_frames)

    frames = np.empty((n_frames, 3, resolution, resolution), dtype=np.float32)
    masks = np.empty((n_frames, 1, resolution, resolution), dtype=np.float32)
    for i in range(n_frames):
        f, m = render_frame(basis, alpha, unflatten_params(params[i]), background, skin)
        frames[i], masks[i] = _quantize(f), _quantize(m)
    return Sequence(
        seq_id=seq_id if seq_id is not None else f"seq{seed:06d}",
        frames=frames,
        masks=masks,
        params=params,
        alpha=alpha,
    )


def make_synthetic_dataset(seed, n_sequences, n_frames, resolution=64):
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    basis = synthetic_basis()
    return [
        make_synthetic_sequence(
            int(child.generate_state(1)[0]), n_frames, resolution, seq_id=f"seq{i:04d}", basis=basis
        )
        for i, child in enumerate(children)
    ]


def add_param_noise(params, std, seed):
    """Per-frame i.i.d. Gaussian noise on every coefficient, emulating estimation jitter."""
    rng = np.random.default_rng(seed)
    return params + rng.normal(0.0, std, size=params.shape)
