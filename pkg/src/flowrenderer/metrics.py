"""Evaluation metrics for generated frames.

Frames are (3,H,W) arrays in [0,1]. The Fréchet distance and identity
cosine similarity use a pluggable embedder; the default is a pooled
readout of the seeded perceptual network, so absolute values are only
comparable between runs that share it.
"""

import logging
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .datamodel.dataset import load_frame_png
from .datamodel.params import N_PARAMS, param_slice
from .exceptions import ValidationError
from .losses import PerceptualFeatureExtractor

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_LUMA = np.array([0.299, 0.587, 0.114])


def _np(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, cap=PSNR_CAP):
    """PSNR in dB for unit dynamic range. Identical inputs give ``cap`` (``inf`` if ``cap`` is None)."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    value = np.inf if mse == 0 else 10.0 * np.log10(1.0 / mse)
    return value if cap is None else min(value, cap)


def to_gray(frame):
    frame = _np(frame)
    if frame.ndim == 3 and frame.shape[0] == 3:
        return np.tensordot(_LUMA, frame, axes=1)
    if frame.ndim == 2:
        return frame
    raise ValidationError(f"expected (3,H,W) or (H,W) image, got {frame.shape}")


def ssim(a, b):
    """Gaussian-window SSIM (11x11, sigma 1.5) on luminance, averaged over windows."""
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ValidationError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ValidationError(f"image {ga.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(
        structural_similarity(
            ga,
            gb,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def _sqrtm_psd(M, what):
    w, V = np.linalg.eigh((M + M.T) / 2)
    if w.min() < -1e-8:
        log.warning("%s has negative eigenvalue %.3g; clipping to zero", what, w.min())
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T, w


def frechet_distance(set_a, set_b):
    """Fréchet distance between Gaussian fits of two (n, d) embedding sets."""
    A, B = _np(set_a), _np(set_b)
    if A.ndim != 2 or B.ndim != 2:
        raise ValidationError("embedding sets must be 2-D (n, d)")
    if A.shape[1] != B.shape[1]:
        raise ValidationError(f"embedding dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if len(A) < 2 or len(B) < 2:
        raise ValidationError("each embedding set needs at least two samples")
    mu_a, mu_b = A.mean(0), B.mean(0)
    cov_a = np.atleast_2d(np.cov(A, rowvar=False))
    cov_b = np.atleast_2d(np.cov(B, rowvar=False))
    root_a, _ = _sqrtm_psd(cov_a, "covariance")
    _, w = _sqrtm_psd(root_a @ cov_b @ root_a, "covariance product")
    tr_covmean = np.sqrt(w).sum()
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean)


class PooledFeatureEmbedder:
    """Global-average-pooled activations of every perceptual stage, concatenated."""

    def __init__(self, extractor=None):
        self.extractor = extractor if extractor is not None else PerceptualFeatureExtractor()

    @torch.no_grad()
    def __call__(self, frames):
        x = torch.as_tensor(_np(frames), dtype=torch.float32)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        feats = self.extractor(x)
        return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double().numpy()


def cosine_similarity(u, v):
    u, v = _np(u).ravel(), _np(v).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine similarity undefined for a zero-norm embedding")
    return float(np.dot(u, v) / (nu * nv))


def csim(a, b, embedder):
    ea, eb = embedder(np.stack([_np(a), _np(b)]))
    return cosine_similarity(ea, eb)


def _param_matrix(params):
    if len(params) and hasattr(params[0], "beta"):
        from .datamodel.params import flatten_params

        return np.stack([flatten_params(p) for p in params])
    M = _np(params)
    if M.ndim != 2 or M.shape[1] != N_PARAMS:
        raise ValidationError(f"expected (n, {N_PARAMS}) params, got {M.shape}")
    return M


def aed_apd(params_out, params_ref):
    """Mean absolute expression distance and mean absolute pose (rotation + translation) distance."""
    if len(params_out) != len(params_ref):
        raise ValidationError(f"length mismatch: {len(params_out)} vs {len(params_ref)}")
    if len(params_out) == 0:
        raise ValidationError("no frames to compare")
    P, Q = _param_matrix(params_out), _param_matrix(params_ref)
    beta = param_slice("beta")
    pose = np.r_[param_slice("rot"), param_slice("trans")]
    aed = np.mean(np.abs(P[:, beta] - Q[:, beta]).mean(axis=1))
    apd = np.mean(np.abs(P[:, pose] - Q[:, pose]).mean(axis=1))
    return float(aed), float(apd)


def akd(kp_out, kp_ref):
    """Mean Euclidean distance between corresponding keypoints, (n, K, 2) each."""
    P, Q = _np(kp_out), _np(kp_ref)
    if P.ndim == 2:
        P, Q = P[None], Q[None]
    if P.shape != Q.shape or P.shape[-1] != 2:
        raise ValidationError(f"keypoint shape mismatch: {P.shape} vs {Q.shape}")
    return float(np.linalg.norm(P - Q, axis=-1).mean())


def image_scores(outputs, targets, embedder):
    """FID, mean PSNR/SSIM and mean CSIM between paired output and target frames."""
    outputs, targets = _np(outputs), _np(targets)
    if outputs.shape != targets.shape:
        raise ValidationError(f"output/target shape mismatch: {outputs.shape} vs {targets.shape}")
    eo, et = embedder(outputs), embedder(targets)
    return {
        "fid": frechet_distance(eo, et) if len(outputs) >= 2 else float("nan"),
        "psnr": float(np.mean([psnr(o, t) for o, t in zip(outputs, targets)])),
        "ssim": float(np.mean([ssim(o, t) for o, t in zip(outputs, targets)])),
        "csim": float(np.mean([cosine_similarity(a, b) for a, b in zip(eo, et)])),
    }


def score_frame_dirs(generated_dir, target_dir, embedder=None):
    """Image metrics over two directories of equally named PNG frames."""
    gen = sorted(Path(generated_dir).glob("*.png"))
    tgt = sorted(Path(target_dir).glob("*.png"))
    if [p.name for p in gen] != [p.name for p in tgt]:
        raise ValidationError(f"{generated_dir} and {target_dir} do not hold the same frame names")
    if not gen:
        raise ValidationError(f"no frames in {generated_dir}")
    embedder = embedder or PooledFeatureEmbedder()
    return image_scores(np.stack([load_frame_png(p) for p in gen]), np.stack([load_frame_png(p) for p in tgt]), embedder)
