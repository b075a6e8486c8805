"""scikit-learn style front end.

``FlowRenderer.fit`` runs the two-phase training on a list of sequences
(or a dataset directory); ``predict`` re-enacts a source frame under a
driving parameter stream. ``ParamWindower`` is the stateless transformer
that turns an (N, 73) parameter stream into per-frame windows.
"""

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datamodel.dataset import Sequence, load_dataset
from .datamodel.params import N_PARAMS, window_from_matrix
from .evaluation import evaluate
from .exceptions import ValidationError
from .losses import LossWeights
from .pipeline import ModelConfig, load_checkpoint, reenact_sequence, save_checkpoint
from .training import TrainConfig, Trainer

_PHASES = {"1": (1,), "2": (2,), "both": (1, 2)}


def check_param_stream(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_PARAMS:
        raise ValidationError(f"expected an (n, {N_PARAMS}) parameter stream, got shape {X.shape}")
    if len(X) == 0:
        raise ValidationError("parameter stream is empty")
    if not np.all(np.isfinite(X)):
        raise ValidationError("parameter stream contains non-finite values")
    return X


def check_sequences(X):
    """Accept a dataset directory, a single Sequence, or an iterable of them."""
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    if isinstance(X, Sequence):
        return [X]
    seqs = list(X)
    if not seqs or not all(isinstance(s, Sequence) for s in seqs):
        raise ValidationError("expected a non-empty list of Sequence objects or a dataset directory")
    return seqs


def parse_phases(phases):
    if isinstance(phases, str):
        if phases not in _PHASES:
            raise ValidationError(f"phase must be one of {sorted(_PHASES)}, got {phases!r}")
        return _PHASES[phases]
    phases = tuple(int(p) for p in phases)
    if not phases or any(p not in (1, 2) for p in phases):
        raise ValidationError(f"phases must be drawn from (1, 2), got {phases}")
    return phases


class ParamWindower(TransformerMixin, BaseEstimator):
    """(n, 73) parameter stream -> (n, 73, 2k+1) windows, clamped at the ends."""

    def __init__(self, window_radius=13):
        self.window_radius = window_radius

    def fit(self, X, y=None):
        X = check_param_stream(X)
        if int(self.window_radius) < 0:
            raise ValidationError(f"window_radius must be >= 0, got {self.window_radius}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_param_stream(X)
        return np.stack([window_from_matrix(X, i, int(self.window_radius)) for i in range(len(X))])


class FlowRenderer(BaseEstimator):
    """One-shot re-enactment model with the two-phase training loop behind ``fit``.

    Hyperparameters not exposed here can be passed through ``model_params``
    (a dict of :class:`ModelConfig` fields) and ``loss_weights``.
    """

    def __init__(
        self,
        resolution=64,
        window_radius=13,
        motion_dim=256,
        mapping_layers=3,
        epochs_per_phase=100,
        steps_per_epoch=None,
        batch_size=4,
        base_lr=1e-4,
        decay_epoch=50,
        decay_factor=5.0,
        phases="both",
        loss_weights=None,
        param_noise_std=0.0,
        model_params=None,
        seed=0,
    ):
        self.resolution = resolution
        self.window_radius = window_radius
        self.motion_dim = motion_dim
        self.mapping_layers = mapping_layers
        self.epochs_per_phase = epochs_per_phase
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.decay_epoch = decay_epoch
        self.decay_factor = decay_factor
        self.phases = phases
        self.loss_weights = loss_weights
        self.param_noise_std = param_noise_std
        self.model_params = model_params
        self.seed = seed

    def _model_config(self):
        d = dict(self.model_params or {})
        d.update(
            resolution=self.resolution,
            window_radius=self.window_radius,
            motion_dim=self.motion_dim,
            mapping_layers=self.mapping_layers,
        )
        return ModelConfig.from_dict(d)

    def train_config(self):
        return TrainConfig(
            model=self._model_config(),
            weights=LossWeights(**(self.loss_weights or {})),
            epochs_per_phase=self.epochs_per_phase,
            steps_per_epoch=self.steps_per_epoch,
            base_lr=self.base_lr,
            decay_epoch=self.decay_epoch,
            decay_factor=self.decay_factor,
            batch_size=self.batch_size,
            seed=self.seed,
            param_noise_std=self.param_noise_std,
        )

    def fit(self, X, y=None):
        """Train on sequences ``X``; ``y`` is ignored (targets come from the sequences)."""
        seqs = check_sequences(X)
        cfg = self.train_config()
        for s in seqs:
            if s.resolution != cfg.model.resolution:
                raise ValidationError(f"sequence {s.seq_id} has resolution {s.resolution}, expected {cfg.model.resolution}")
        trainer = Trainer(cfg, seqs)
        self.history_ = []
        trainer.run(parse_phases(self.phases), on_step=self.history_.append)
        self.model_ = trainer.model.eval()
        self.trainer_ = trainer
        self.n_epochs_ = trainer.epochs_executed
        return self

    def predict(self, source, source_mask, driving):
        """Re-enacted frames, (n, 3, H, W), one per row of the driving stream.

        ``driving`` is a Sequence or an (n, 73) parameter matrix.
        """
        check_is_fitted(self, "model_")
        params = driving.params if isinstance(driving, Sequence) else check_param_stream(driving)
        outs = reenact_sequence(source, source_mask, params, self.model_.config.window_radius, self.model_)
        return np.stack([o.numpy() for o in outs])

    def evaluate(self, X, mode="self", seed=None):
        check_is_fitted(self, "model_")
        rows, _ = evaluate(self.model_, check_sequences(X), mode=mode, seed=self.seed if seed is None else seed)
        return rows

    def score(self, X, y=None):
        """Mean self-reenactment PSNR (dB) over the sequences in ``X``."""
        return float(self.evaluate(X, "self")[-1]["psnr"])

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_)

    @classmethod
    def load(cls, path):
        """Estimator wrapping a checkpoint; ``fit`` would retrain from scratch."""
        model, _ = load_checkpoint(path)
        c = model.config
        known = {"resolution", "window_radius", "motion_dim", "mapping_layers"}
        est = cls(
            resolution=c.resolution,
            window_radius=c.window_radius,
            motion_dim=c.motion_dim,
            mapping_layers=c.mapping_layers,
            model_params={k: v for k, v in c.to_dict().items() if k not in known},
        )
        est.model_ = model
        return est
