"""Self- and cross-identity evaluation protocols producing the metric report."""

import csv
import io
import math

import numpy as np

from .datamodel.synthetic import landmarks_pixels, synthetic_basis
from .exceptions import ValidationError
from .metrics import PooledFeatureEmbedder, aed_apd, akd, frechet_distance, image_scores
from .pipeline import reenact_sequence, self_reenactment

REPORT_COLUMNS = ("sequence", "fid", "psnr", "ssim", "csim", "aed", "apd", "akd", "mode")


class GroundTruthLandmarks:
    """Keypoints from the synthetic face model. Outputs have no detector, so they
    are scored with the landmarks their conditioning implies."""

    def __init__(self, basis=None):
        self.basis = basis or synthetic_basis()

    def __call__(self, params, alpha, resolution):
        from .datamodel.params import unflatten_params

        return np.stack([landmarks_pixels(self.basis, alpha, unflatten_params(p), resolution) for p in params])


def cross_pairs(sequences, seed):
    """For each driving sequence, a seeded (source sequence, source frame) choice from another sequence."""
    if len(sequences) < 2:
        raise ValidationError("cross-identity evaluation needs at least two sequences")
    rng = np.random.default_rng(seed)
    pairs = []
    for b, drv in enumerate(sequences):
        others = [a for a in range(len(sequences)) if a != b]
        a = others[int(rng.integers(len(others)))]
        pairs.append((a, int(rng.integers(len(sequences[a]))), b))
    return pairs


def evaluate(model, sequences, mode="self", seed=0, embedder=None, keypoints=None):
    """Run a protocol and return ``(rows, pairs)``; the last row is the summary.

    ``pairs`` lists (source_sequence, source_frame, driving_sequence) ids.
    """
    if mode not in ("self", "cross"):
        raise ValidationError(f"mode must be 'self' or 'cross', got {mode!r}")
    embedder = embedder or PooledFeatureEmbedder(model.perceptual)
    keypoints = keypoints or GroundTruthLandmarks()
    k = model.config.window_radius
    res = model.config.resolution
    rows, pairs = [], []
    all_out, all_tgt = [], []

    if mode == "self":
        jobs = []
        for seq in sequences:
            if len(seq) < 2:
                raise ValidationError(f"sequence {seq.seq_id} needs at least two frames for self-ID evaluation")
            jobs.append((seq, 0, seq))
    else:
        jobs = [(sequences[a], f, sequences[b]) for a, f, b in cross_pairs(sequences, seed)]

    for src_seq, src_idx, drv in jobs:
        pairs.append((src_seq.seq_id, src_idx, drv.seq_id))
        if mode == "self":
            outs, idx = self_reenactment(drv, k, model)
        else:
            outs = reenact_sequence(src_seq.frames[src_idx], src_seq.masks[src_idx], drv, k, model)
            idx = list(range(len(drv)))
        outs = np.stack([o.numpy() for o in outs]).astype(np.float64)
        tgts = drv.frames[idx].astype(np.float64)
        all_out.append(outs)
        all_tgt.append(tgts)
        scores = image_scores(outs, tgts, embedder)
        if mode == "cross":
            # no ground truth exists for a foreign identity
            scores["psnr"] = scores["ssim"] = float("nan")
            e_out, e_src = embedder(outs), embedder(src_seq.frames[src_idx][None])
            scores["csim"] = float(np.mean(e_out @ e_src[0] / (np.linalg.norm(e_out, axis=1) * np.linalg.norm(e_src[0]))))
        conditioning = drv.params[idx]
        scores["aed"], scores["apd"] = aed_apd(conditioning, drv.params[idx])
        scores["akd"] = akd(
            keypoints(conditioning, src_seq.alpha, res), keypoints(drv.params[idx], drv.alpha, res)
        )
        rows.append({"sequence": drv.seq_id, "mode": mode, **scores})

    summary = {"sequence": "summary", "mode": mode}
    O, Tg = np.concatenate(all_out), np.concatenate(all_tgt)
    summary["fid"] = frechet_distance(embedder(O), embedder(Tg)) if len(O) >= 2 else float("nan")
    for col in ("psnr", "ssim", "csim", "aed", "apd", "akd"):
        vals = [r[col] for r in rows if not math.isnan(r[col])]
        summary[col] = float(np.mean(vals)) if vals else float("nan")
    rows.append(summary)
    return rows, pairs


def _fmt(v):
    if isinstance(v, str):
        return v
    return "nan" if math.isnan(v) else f"{v:.6f}"


def format_report(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write(format_report(rows))
