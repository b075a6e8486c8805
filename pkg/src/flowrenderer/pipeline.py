"""Model bundle, checkpoint container and the four-stage inference path.

Checkpoint layout (a ``torch.save`` archive holding one flat dict)::

    "format"          "flowrenderer-checkpoint/1"
    "config"          ModelConfig as a plain dict
    "mapping/<name>"  mapping network tensors
    "flow/<name>"     flow predictor tensors
    "enc3d/<name>"    3D feature encoder tensors
    "dec3d/<name>"    3D feature decoder tensors
    "refiner/<name>"  refiner TransUNet tensors
    "inpainter/<name>" inpainter TransUNet tensors
    "trainer"         optional resume state (optimizer, RNG, counters)

Writes go to a temporary file that is renamed into place.
"""

import contextlib
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .datamodel.compositing import BLANK_EPS, composite_foreground, separate_foreground
from .datamodel.params import N_PARAMS, window_from_matrix
from .exceptions import PipelineStageError, ValidationError
from .losses import PerceptualFeatureExtractor
from .mapping import MappingNetwork
from .transunet import TransUNet, inpaint, refine
from .validation import check_frame, check_mask, check_resolution, check_window
from .warp3d import FeatureDecoder3D, FeatureEncoder3D, FlowPredictor, downsample_factor, warp_forward

CHECKPOINT_FORMAT = "flowrenderer-checkpoint/1"
GROUPS = ("mapping", "flow", "enc3d", "dec3d", "refiner", "inpainter")


@dataclass
class ModelConfig:
    resolution: int = 64
    motion_dim: int = 256
    mapping_layers: int = 3
    window_radius: int = 13
    depth: int = 8
    enc_stem: tuple = (64, 128)
    enc_channels: tuple = (32, 64, 64)
    flow_stem: tuple = (32, 64)
    flow_channels: tuple = (16, 32, 32)
    flow_levels: int = 1
    dec_width: int = 128
    dec_res_blocks: int = 3
    unet_depth: int = 4
    unet_width: int = 32
    inpainter_adain: bool = True
    adain_in_encoder: bool = False
    perceptual_widths: tuple = (8, 16, 32)
    perceptual_strides: tuple = (1, 2, 2)
    perceptual_seed: int = 0
    blank_eps: float = BLANK_EPS

    def __post_init__(self):
        for name in ("enc_stem", "enc_channels", "flow_stem", "flow_channels", "perceptual_widths", "perceptual_strides"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def downsample(self):
        return downsample_factor(len(self.enc_channels))

    @property
    def window_size(self):
        return 2 * self.window_radius + 1

    def validate(self):
        check_resolution(self.resolution, self.downsample)
        if len(self.flow_channels) != len(self.enc_channels):
            raise ValidationError("flow_channels and enc_channels need the same number of stages")
        if self.window_radius < 0:
            raise ValidationError(f"window_radius must be >= 0, got {self.window_radius}")
        if self.window_size < 4 * self.mapping_layers + 1:
            raise ValidationError(
                f"window of {self.window_size} frames is too short for {self.mapping_layers} mapping layers"
            )
        if self.resolution % 2**self.unet_depth:
            raise ValidationError(f"resolution {self.resolution} not divisible by 2**unet_depth")
        lattice = self.resolution // self.downsample
        if self.depth % 2**self.flow_levels or lattice % 2**self.flow_levels:
            raise ValidationError(
                f"flow lattice ({self.depth}, {lattice}, {lattice}) cannot be halved {self.flow_levels} times"
            )
        if self.enc_stem[1] % self.depth or self.flow_stem[1] % self.depth:
            raise ValidationError("stem widths must be divisible by depth")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FlowRendererModel(nn.Module):
    """All trainable weight groups plus the frozen perceptual extractor."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        n_blocks = len(config.enc_channels)
        self.mapping = MappingNetwork(N_PARAMS, config.motion_dim, config.mapping_layers)
        self.enc3d = FeatureEncoder3D(config.enc_stem, config.depth, config.enc_channels)
        self.flow = FlowPredictor(
            config.motion_dim, config.flow_stem, config.depth, config.flow_channels, config.flow_levels
        )
        self.dec3d = FeatureDecoder3D(
            config.enc_channels[-1], config.depth, config.dec_width, config.dec_res_blocks, n_up=2 + n_blocks
        )
        self.refiner = TransUNet(
            6, config.motion_dim, config.unet_depth, config.unet_width, adain_in_encoder=config.adain_in_encoder
        )
        self.inpainter = TransUNet(
            3,
            config.motion_dim,
            config.unet_depth,
            config.unet_width,
            use_adain=config.inpainter_adain,
            adain_in_encoder=config.adain_in_encoder,
        )
        self.perceptual = PerceptualFeatureExtractor(
            config.perceptual_widths, config.perceptual_strides, config.perceptual_seed
        )

    def warp(self, src_fg, T):
        return warp_forward(src_fg, T, self.enc3d, self.flow, self.dec3d)

    def group(self, name):
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def weight_tensors(self):
        """Flat ``{"<group>/<param>": tensor}`` dict over every trainable group."""
        out = {}
        for g in GROUPS:
            for k, v in self.group(g).state_dict().items():
                out[f"{g}/{k}"] = v.detach().clone()
        return out

    def load_weight_tensors(self, tensors):
        for g in GROUPS:
            prefix = f"{g}/"
            sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            try:
                self.group(g).load_state_dict(sd, strict=True)
            except RuntimeError as exc:
                raise ValidationError(f"checkpoint weights for {g} do not match the config: {exc}") from exc


def _atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_checkpoint(path, model, trainer_state=None):
    payload = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict()}
    payload.update(model.weight_tensors())
    if trainer_state is not None:
        payload["trainer"] = trainer_state
    _atomic_torch_save(payload, path)
    return Path(path)


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError:
        raise
    except Exception as exc:
        raise ValidationError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return payload


def load_checkpoint(path):
    """Returns ``(model, payload)``; the model is in eval mode."""
    payload = read_checkpoint(path)
    model = FlowRendererModel(ModelConfig.from_dict(payload["config"]))
    model.load_weight_tensors({k: v for k, v in payload.items() if "/" in k})
    model.eval()
    return model, payload


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def _reenact_batch(src, src_mask, windows, model):
    with _stage("preprocess"):
        fg, bg = separate_foreground(src, src_mask)
        T = model.mapping(windows)
    with _stage("warp"):
        warped = model.warp(fg, T)[0]
    with _stage("refine"):
        refined = refine(fg, warped, T, model.refiner)
    with _stage("composite"):
        composited, _ = composite_foreground(refined, bg, src_mask, eps=model.config.blank_eps)
    with _stage("inpaint"):
        return inpaint(composited, T, model.inpainter)


@torch.no_grad()
def reenact_frame(src, src_mask, target_window, model):
    """Render the source identity under the motion described by ``target_window`` (73 x (2k+1))."""
    cfg = model.config
    with _stage("validate"):
        x, _ = check_frame(src, cfg.resolution, "source")
        m, _ = check_mask(src_mask, like=x, name="source mask")
        w, _ = check_window(target_window)
        if w.shape[-1] != cfg.window_size:
            raise ValidationError(f"window has {w.shape[-1]} columns, model expects {cfg.window_size}")
    return _reenact_batch(x, m, w, model)[0]


def reenact_sequence(src, src_mask, driving, k, model):
    """One output frame per driving frame; ``driving`` is a Sequence or an (N, 73) param matrix."""
    params = driving.params if hasattr(driving, "params") else np.asarray(driving)
    if len(params) < 1:
        raise ValidationError("driving sequence is empty")
    return [reenact_frame(src, src_mask, window_from_matrix(params, i, k), model) for i in range(len(params))]


def self_reenactment(seq, k, model):
    """Source = first frame, targets = remaining frames. Returns (outputs, target indices)."""
    targets = list(range(1, len(seq)))
    outs = [reenact_frame(seq.frames[0], seq.masks[0], seq.window(i, k), model) for i in targets]
    return outs, targets
