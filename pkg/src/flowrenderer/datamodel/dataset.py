"""Sequence container and on-disk dataset layout.

Layout per sequence::

    <root>/<seq_id>/frames/000000.png   8-bit RGB
    <root>/<seq_id>/masks/000000.png    8-bit gray
    <root>/<seq_id>/params.jsonl        {"beta": [64], "rot": [3], "trans": [3], "crop": [3]} per line
    <root>/<seq_id>/identity.json       {"alpha": [80]}
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..exceptions import ValidationError
from .params import N_ALPHA, N_PARAMS, MotionParams, flatten_params, unflatten_params, window_from_matrix


@dataclass(eq=False)
class Sequence:
    seq_id: str
    frames: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    masks: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    params: np.ndarray  # (N, 73) flattened MotionParams
    alpha: np.ndarray  # (80,) identity coefficients

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.float32)
        self.params = np.asarray(self.params, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        n = len(self.frames)
        if not (len(self.masks) == len(self.params) == n):
            raise ValidationError(
                f"sequence {self.seq_id}: {n} frames, {len(self.masks)} masks, {len(self.params)} params"
            )
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValidationError(f"frames must be (N, 3, H, W), got {self.frames.shape}")
        if self.masks.shape != (n, 1) + self.frames.shape[2:]:
            raise ValidationError(f"masks must be (N, 1, H, W) matching frames, got {self.masks.shape}")
        if self.params.shape != (n, N_PARAMS):
            raise ValidationError(f"params must be (N, {N_PARAMS}), got {self.params.shape}")
        if self.alpha.shape != (N_ALPHA,):
            raise ValidationError(f"alpha must have {N_ALPHA} entries, got {self.alpha.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValidationError(f"sequence {self.seq_id}: non-finite params")

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self):
        return self.frames.shape[-1]

    def motion_params(self, i):
        return unflatten_params(self.params[i])

    def window(self, i, k):
        return window_from_matrix(self.params, i, k)

    def with_params(self, params):
        """Copy sharing pixels but carrying a different parameter stream."""
        return Sequence(self.seq_id, self.frames, self.masks, params, self.alpha)

    def subset(self, indices, seq_id=None):
        idx = np.asarray(indices)
        return Sequence(seq_id or self.seq_id, self.frames[idx], self.masks[idx], self.params[idx], self.alpha)


def _to_u8(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame_png(frame, path):
    Image.fromarray(_to_u8(np.transpose(np.asarray(frame), (1, 2, 0))), mode="RGB").save(path)


def save_mask_png(mask, path):
    Image.fromarray(_to_u8(np.asarray(mask)[0]), mode="L").save(path)


def load_frame_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def load_mask_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr[None]


def save_sequence(seq, root):
    d = Path(root) / seq.seq_id
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        save_frame_png(seq.frames[i], d / "frames" / f"{i:06d}.png")
        save_mask_png(seq.masks[i], d / "masks" / f"{i:06d}.png")
    with open(d / "params.jsonl", "w") as fh:
        for i in range(len(seq)):
            fh.write(json.dumps(seq.motion_params(i).to_dict()) + "\n")
    with open(d / "identity.json", "w") as fh:
        json.dump({"alpha": [float(a) for a in seq.alpha]}, fh)
    return d


def load_params_jsonl(path):
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(flatten_params(MotionParams.from_dict(json.loads(line))))
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{line_no}: {exc}") from exc
    return np.stack(rows) if rows else np.zeros((0, N_PARAMS))


def load_sequence(path):
    d = Path(path)
    if not (d / "params.jsonl").is_file():
        raise FileNotFoundError(f"{d} has no params.jsonl")
    params = load_params_jsonl(d / "params.jsonl")
    frame_files = sorted((d / "frames").glob("*.png"))
    mask_files = sorted((d / "masks").glob("*.png"))
    frames = np.stack([load_frame_png(f) for f in frame_files]) if frame_files else np.zeros((0, 3, 1, 1))
    masks = np.stack([load_mask_png(f) for f in mask_files]) if mask_files else np.zeros((0, 1, 1, 1))
    identity = d / "identity.json"
    alpha = json.loads(identity.read_text())["alpha"] if identity.is_file() else np.zeros(N_ALPHA)
    return Sequence(d.name, frames, masks, params, alpha)


def load_dataset(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    seqs = [load_sequence(d) for d in sorted(root.iterdir()) if (d / "params.jsonl").is_file()]
    if not seqs:
        raise ValidationError(f"no sequences found under {root}")
    return seqs
