"""Two-phase training: warp stage + inpainter first, then everything end to end."""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datamodel.compositing import separate_foreground
from .datamodel.dataset import load_dataset
from .datamodel.synthetic import add_param_noise
from .exceptions import ValidationError
from .losses import (
    PHASE1_TERMS,
    TERMS,
    LossWeights,
    check_finite,
    cyclic_from_warped,
    inpainting_loss,
    perceptual_loss,
    style_loss,
    total_loss,
    warp3d_feature_loss,
)
from .pipeline import GROUPS, FlowRendererModel, ModelConfig, read_checkpoint, save_checkpoint
from .transunet import refine
from .warp3d import warp_volume

log = logging.getLogger(__name__)

PHASE_GROUPS = {
    1: ("mapping", "flow", "enc3d", "dec3d", "inpainter"),
    2: GROUPS,
}
CSV_COLUMNS = ("step", "epoch", "phase") + TERMS + ("total", "lr")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs_per_phase: int = 100
    steps_per_epoch: int = None  # default: one pass over all frames
    base_lr: float = 1e-4
    decay_factor: float = 5.0
    decay_epoch: int = 50
    decay_per_phase: bool = True
    batch_size: int = 4
    seed: int = 0
    dataset_root: str = None
    output_dir: str = "runs/default"
    checkpoint_every: int = 0  # steps; 0 keeps only phase-end checkpoints
    stop_grad_target_features: bool = False
    param_noise_std: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    @property
    def window_radius(self):
        return self.model.window_radius

    def validate(self):
        if self.epochs_per_phase < 1:
            raise ValidationError(f"epochs_per_phase must be positive, got {self.epochs_per_phase}")
        if not self.base_lr > 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if not self.decay_factor > 0:
            raise ValidationError(f"decay_factor must be positive, got {self.decay_factor}")
        if not 0 <= self.decay_epoch < self.epochs_per_phase:
            raise ValidationError(
                f"decay_epoch {self.decay_epoch} must lie in [0, epochs_per_phase={self.epochs_per_phase})"
            )
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValidationError(f"steps_per_epoch must be positive, got {self.steps_per_epoch}")
        if self.param_noise_std < 0:
            raise ValidationError("param_noise_std must be non-negative")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["weights"] = self.weights.as_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch, cfg, phase=1):
    """Step schedule: ``base_lr`` before ``decay_epoch``, ``base_lr / decay_factor`` after.

    With ``decay_per_phase`` the epoch counter restarts in every phase;
    otherwise phase 2 continues the count of phase 1.
    """
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    e = epoch if cfg.decay_per_phase else epoch + (phase - 1) * cfg.epochs_per_phase
    return cfg.base_lr if e < cfg.decay_epoch else cfg.base_lr / cfg.decay_factor


@dataclass
class PairSample:
    seq_id: str
    src_index: int
    tgt_index: int
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    tgt_window: np.ndarray
    src_window: np.ndarray


def sample_pair(sequences, rng, k):
    """Draw a (source, target) pair of distinct frames from one sequence.

    Sequences with fewer than two frames are skipped.
    """
    eligible = [s for s in sequences if len(s) >= 2]
    if not eligible:
        raise ValidationError("no sequence with at least two frames to sample from")
    seq = eligible[int(rng.integers(len(eligible)))]
    i, j = (int(v) for v in rng.choice(len(seq), size=2, replace=False))
    return PairSample(
        seq.seq_id, i, j, seq.frames[i], seq.masks[i], seq.frames[j], seq.masks[j], seq.window(j, k), seq.window(i, k)
    )


@dataclass
class PairBatch:
    src: torch.Tensor
    src_mask: torch.Tensor
    tgt: torch.Tensor
    tgt_mask: torch.Tensor
    tgt_window: torch.Tensor
    src_window: torch.Tensor

    @classmethod
    def from_samples(cls, samples, dtype=torch.float32):
        def stack(name):
            return torch.as_tensor(np.stack([getattr(s, name) for s in samples]), dtype=dtype)

        return cls(*(stack(n) for n in ("src", "src_mask", "tgt", "tgt_mask", "tgt_window", "src_window")))


def sample_batch(sequences, rng, k, batch_size):
    return PairBatch.from_samples([sample_pair(sequences, rng, k) for _ in range(batch_size)])


def compute_losses(batch, model, phase, stop_grad_target_features=False):
    """All loss terms active in ``phase`` as a dict of scalar tensors.

    Target-compared terms use the target foreground, except the inpainting
    term whose ground truth is the full target frame.
    """
    phi = model.perceptual
    src_fg, src_bg = separate_foreground(batch.src, batch.src_mask)
    tgt_fg, _ = separate_foreground(batch.tgt, batch.tgt_mask)
    T = model.mapping(batch.tgt_window)
    T_s = model.mapping(batch.src_window)

    vol = model.enc3d(src_fg)
    f_w = warp_volume(vol, model.flow(src_fg, T))
    warped = model.dec3d(f_w)
    t_if = model.enc3d(tgt_fg)
    if stop_grad_target_features:
        t_if = t_if.detach()

    comps = {
        "perceptual_warp": perceptual_loss(warped, tgt_fg, phi),
        "cyclic_warp": cyclic_from_warped(src_fg, warped, T_s, model.enc3d, model.flow, model.dec3d),
        "warp3d_feature": warp3d_feature_loss(f_w, t_if),
        "roundtrip_feature": perceptual_loss(model.dec3d(vol), src_fg, phi),
    }
    if phase == 1:
        inpaint_fg = tgt_fg
    else:
        refined = refine(src_fg, warped, T, model.refiner)
        comps["refiner_perceptual"] = perceptual_loss(refined, tgt_fg, phi)
        comps["refiner_style"] = style_loss(refined, tgt_fg, phi)
        inpaint_fg = refined
    comps["inpainting"] = inpainting_loss(inpaint_fg, src_bg, batch.src_mask, batch.tgt, T, model.inpainter, phi)
    return {name: comps[name] for name in TERMS if name in comps}


def _train_step(batch, model, optimizer, cfg, phase):
    model.train()
    optimizer.zero_grad(set_to_none=True)
    comps = compute_losses(batch, model, phase, cfg.stop_grad_target_features)
    total = total_loss(comps, cfg.weights)
    check_finite({"total": total})
    total.backward()
    optimizer.step()
    report = {k: float(v.detach()) for k, v in comps.items()}
    report["total"] = float(total.detach())
    return report


def phase1_step(batch, model, optimizer, cfg):
    """One optimization step of the warp stage and inpainter (refiner untouched)."""
    return _train_step(batch, model, optimizer, cfg, 1)


def phase2_step(batch, model, optimizer, cfg):
    """One end-to-end optimization step on the full weighted objective."""
    return _train_step(batch, model, optimizer, cfg, 2)


def weights_digest(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def prepare_sequences(sequences, cfg):
    if cfg.param_noise_std > 0:
        return [s.with_params(add_param_noise(s.params, cfg.param_noise_std, cfg.seed + i)) for i, s in enumerate(sequences)]
    return list(sequences)


class Trainer:
    """Stateful training loop; everything needed to resume lives in :meth:`state_dict`."""

    def __init__(self, cfg, sequences, model=None):
        self.cfg = cfg
        self.sequences = prepare_sequences(sequences, cfg)
        if not any(len(s) >= 2 for s in self.sequences):
            raise ValidationError("training needs at least one sequence with two or more frames")
        torch.manual_seed(cfg.seed)
        self.model = model if model is not None else FlowRendererModel(cfg.model)
        self.rng = np.random.default_rng(cfg.seed)
        self.phase = None
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0
        self.epochs_executed = 0
        self.completed_phases = []
        self.optimizer = None

    @property
    def steps_per_epoch(self):
        if self.cfg.steps_per_epoch is not None:
            return self.cfg.steps_per_epoch
        n_frames = sum(len(s) for s in self.sequences)
        return max(1, math.ceil(n_frames / self.cfg.batch_size))

    def begin_phase(self, phase):
        trainable = PHASE_GROUPS[phase]
        for g in GROUPS:
            self.model.group(g).requires_grad_(g in trainable)
        params = [p for g in trainable for p in self.model.group(g).parameters()]
        self.optimizer = torch.optim.Adam(
            params, lr=lr_schedule(0, self.cfg, phase), betas=self.cfg.adam_betas, eps=self.cfg.adam_eps
        )
        self.phase = phase
        self.epoch = 0
        self.step_in_epoch = 0

    def next_batch(self):
        return sample_batch(self.sequences, self.rng, self.cfg.window_radius, self.cfg.batch_size)

    def step(self):
        lr = lr_schedule(self.epoch, self.cfg, self.phase)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = self.next_batch()
        step_fn = phase1_step if self.phase == 1 else phase2_step
        report = step_fn(batch, self.model, self.optimizer, self.cfg)
        report.update(step=self.global_step, epoch=self.epoch, phase=self.phase, lr=lr)
        self.global_step += 1
        self.step_in_epoch += 1
        if self.step_in_epoch >= self.steps_per_epoch:
            self.step_in_epoch = 0
            self.epoch += 1
            self.epochs_executed += 1
        return report

    def phase_finished(self):
        return self.epoch >= self.cfg.epochs_per_phase

    def end_phase(self):
        self.completed_phases.append(self.phase)
        self.phase = None
        self.optimizer = None

    def state_dict(self):
        return {
            "phase": self.phase,
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "epochs_executed": self.epochs_executed,
            "completed_phases": list(self.completed_phases),
            "optimizer": self.optimizer.state_dict() if self.optimizer is not None else None,
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg.to_dict(),
        }

    def load_state_dict(self, state):
        self.completed_phases = list(state["completed_phases"])
        self.global_step = state["global_step"]
        self.epochs_executed = state["epochs_executed"]
        self.rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        if state["phase"] is not None:
            self.begin_phase(state["phase"])
            self.optimizer.load_state_dict(state["optimizer"])
            self.epoch = state["epoch"]
            self.step_in_epoch = state["step_in_epoch"]

    def save(self, path):
        return save_checkpoint(path, self.model, self.state_dict())

    def restore(self, path):
        payload = read_checkpoint(path)
        if ModelConfig.from_dict(payload["config"]) != self.cfg.model:
            raise ValidationError(f"checkpoint {path} was trained with a different model config")
        self.model.load_weight_tensors({k: v for k, v in payload.items() if "/" in k})
        if "trainer" in payload:
            self.load_state_dict(payload["trainer"])

    def run(self, phases=(1, 2), log_path=None, checkpoint_dir=None, on_step=None):
        """Train the requested phases, resuming mid-phase if state was restored.

        ``on_step`` is called with every step's loss report.
        """
        writer = None
        fh = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            new = not log_path.exists() or self.global_step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, restval="")
            if new:
                writer.writeheader()
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        try:
            for phase in phases:
                if phase in self.completed_phases:
                    continue
                if self.phase != phase:
                    self.begin_phase(phase)
                log.info("phase %d: %d epochs x %d steps", phase, self.cfg.epochs_per_phase, self.steps_per_epoch)
                while not self.phase_finished():
                    report = self.step()
                    if on_step is not None:
                        on_step(report)
                    if writer is not None:
                        writer.writerow({k: report[k] for k in CSV_COLUMNS if k in report})
                        fh.flush()
                    every = self.cfg.checkpoint_every
                    if ckpt_dir is not None and every and self.global_step % every == 0:
                        self.save(ckpt_dir / f"step{self.global_step:07d}.pt")
                self.end_phase()
                if ckpt_dir is not None:
                    self.save(ckpt_dir / f"phase{phase}.pt")
        finally:
            if fh is not None:
                fh.close()
        return self


def run_training(cfg, sequences=None, phases=(1, 2), resume=None):
    """Train per ``cfg`` and return the path of the final checkpoint.

    Writes ``losses.csv`` and checkpoints under ``cfg.output_dir``.
    """
    if sequences is None:
        if cfg.dataset_root is None:
            raise ValidationError("no sequences given and dataset_root is unset")
        sequences = load_dataset(cfg.dataset_root)
    out = Path(cfg.output_dir)
    trainer = Trainer(cfg, sequences)
    if resume is not None:
        trainer.restore(resume)
    trainer.run(phases, log_path=out / "losses.csv", checkpoint_dir=out)
    return trainer.save(out / "final.pt")


def evaluation_losses(batch, model, cfg, phase=2):
    """Loss terms and weighted total on a fixed batch, without updating anything."""
    model.eval()
    with torch.no_grad():
        comps = compute_losses(batch, model, phase)
        total = total_loss(comps, cfg.weights)
    report = {k: float(v) for k, v in comps.items()}
    report["total"] = float(total)
    return report


__all__ = [
    "PHASE1_TERMS",
    "CSV_COLUMNS",
    "PairBatch",
    "PairSample",
    "TrainConfig",
    "Trainer",
    "compute_losses",
    "evaluation_losses",
    "lr_schedule",
    "phase1_step",
    "phase2_step",
    "run_training",
    "sample_batch",
    "sample_pair",
    "weights_digest",
]
