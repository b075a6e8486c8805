"""Acceptance criteria 1-10. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 7 and 8 train real models on CPU and dominate the runtime
(roughly a quarter of an hour together).
"""

import time

import numpy as np
import torch

from conftest import ACCEPTANCE_LINES, TINY
from gradients import fd_relative_error
from flowrenderer.cli import main
from flowrenderer.datamodel import make_synthetic_sequence, window_from_matrix
from flowrenderer.datamodel.compositing import separate_foreground
from flowrenderer.datamodel.synthetic import add_param_noise
from flowrenderer.losses import (
    TERMS,
    LossWeights,
    PerceptualFeatureExtractor,
    cyclic_from_warped,
    cyclic_warp_loss,
    gram_matrix,
    l1_image,
    perceptual_loss,
    style_loss,
    total_loss,
    warp3d_feature_loss,
)
from flowrenderer.mapping import MappingNetwork, map_motion
from flowrenderer.metrics import PooledFeatureEmbedder, akd, cosine_similarity, frechet_distance, psnr, ssim
from flowrenderer.evaluation import evaluate, format_report
from flowrenderer.pipeline import ModelConfig, read_checkpoint, reenact_frame
from flowrenderer.training import (
    PairBatch,
    TrainConfig,
    Trainer,
    evaluation_losses,
    lr_schedule,
    sample_pair,
    weights_digest,
)
from flowrenderer.transunet import TransUNet, refine, transunet_forward
from flowrenderer.warp3d import (
    AdaIN,
    FeatureDecoder3D,
    FeatureEncoder3D,
    FlowPredictor,
    ZeroFlowPredictor,
    adain3d,
    decode3d,
    encode3d,
    predict_flow,
    warp_volume,
)
from test_warp3d import trilinear_oracle


def verdict(n, ok, detail, capsys):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_criterion_01_trilinear_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        vol = rng.normal(size=(2, 4, 4, 4))
        flow = rng.uniform(-1.2, 1.2, size=(3, 4, 4, 4))
        got = warp_volume(torch.as_tensor(vol), torch.as_tensor(flow)).numpy()
        worst = max(worst, float(np.abs(got - trilinear_oracle(vol, flow)).max()))
    vol = torch.randn(2, 4, 4, 4)
    exact = torch.equal(warp_volume(vol, torch.zeros(3, 4, 4, 4)), vol)
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-6 and exact and dt < 30, f"max diff {worst:.2e}, zero-flow exact {exact}, {dt:.1f}s", capsys)


def _randomise_adain(module, std=0.5):
    for m in module.modules():
        if isinstance(m, AdaIN):
            torch.nn.init.normal_(m.affine.weight, std=std)


def test_criterion_02_gradients(capsys):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    errs = {}
    vol = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64)
    flow = torch.rand(1, 3, 3, 3, 3, dtype=torch.float64) * 0.4 - 0.2
    errs["warp(vol, flow)"] = fd_relative_error(warp_volume, (vol, flow))

    site = AdaIN(2, 3).double()
    _randomise_adain(site, 1.0)
    x, T = torch.randn(2, 2, 2, 3, 3, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
    errs["adain3d(x, T)"] = fd_relative_error(lambda a, b: adain3d(a, b, site), (x, T))

    net = TransUNet(3, 4, depth=2, base_width=4).double()
    _randomise_adain(net)
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    errs["transunet(T)"] = fd_relative_error(lambda t: transunet_forward(img, t, net), (torch.randn(1, 4, dtype=torch.float64),))

    phi = PerceptualFeatureExtractor(widths=(4, 4), strides=(1, 2)).double()
    a, b = torch.rand(1, 3, 8, 8, dtype=torch.float64), torch.rand(1, 3, 8, 8, dtype=torch.float64)
    errs["perceptual"] = fd_relative_error(lambda z: perceptual_loss(z, b, phi), (a,))
    errs["style"] = fd_relative_error(lambda z: style_loss(z, b, phi), (a,))
    f, g = torch.randn(1, 2, 2, 3, 3, dtype=torch.float64), torch.randn(1, 2, 2, 3, 3, dtype=torch.float64)
    errs["mse"] = fd_relative_error(lambda z: warp3d_feature_loss(z, g), (f,), eps=1e-3)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    summary = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdict(2, worst < 1e-2 and dt < 180, f"rel. errors {summary}; {dt:.1f}s", capsys)


class _Fold(torch.nn.Module):
    def forward(self, x):
        return x.reshape(x.shape[0], 3, 1, *x.shape[2:])


class _Unfold(torch.nn.Module):
    def forward(self, v):
        return v.reshape(v.shape[0], 3, *v.shape[3:])


def test_criterion_03_loss_identities(capsys):
    torch.manual_seed(0)
    phi = PerceptualFeatureExtractor()
    a = torch.rand(2, 3, 16, 16)
    vol = torch.randn(2, 4, 2, 3, 3)
    w = torch.randn(2, 73, 1)
    mapping = MappingNetwork(73, 8, 0)
    zeros = {
        "perceptual": float(perceptual_loss(a, a, phi)),
        "style": float(style_loss(a, a, phi)),
        "l1": float(l1_image(a, a)),
        "mse": float(warp3d_feature_loss(vol, vol)),
        "cyclic": float(cyclic_warp_loss(a, w, w, mapping, _Fold(), ZeroFlowPredictor(1, 1), _Unfold())),
    }
    total = float(total_loss({name: torch.tensor(1.0) for name in TERMS}, LossWeights()))
    g = torch.Generator().manual_seed(1)
    gram_ok = True
    for _ in range(100):
        G = gram_matrix(torch.randn(1, 4, 3, 5, generator=g, dtype=torch.float64))[0]
        gram_ok &= bool(torch.equal(G, G.T)) and float(torch.linalg.eigvalsh(G).min()) > -1e-10
    ok = all(v == 0 for v in zeros.values()) and total == 1211.5 and gram_ok
    verdict(3, ok, f"zeros {zeros}, unit total {total}, gram symmetric/PSD {gram_ok}", capsys)


def test_criterion_04_adain_statistics(capsys):
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(20):
        site = AdaIN(6, 10)
        with torch.no_grad():
            site.affine.weight.normal_(generator=g)
            site.affine.bias.normal_(generator=g)
        x = torch.randn(6, 4, 5, 5, generator=g) * 4 + 3
        T = torch.randn(10, generator=g)
        y = adain3d(x, T, site).detach()
        scale, bias = site.affine(T).detach().chunk(2)
        worst = max(
            worst,
            float((y.mean((1, 2, 3)) - bias).abs().max()),
            float((y.std((1, 2, 3), unbiased=False) - scale.abs()).abs().max()),
        )
    verdict(4, worst < 1e-3, f"max |stat - target| {worst:.2e}", capsys)


def test_criterion_05_shapes(capsys):
    torch.manual_seed(0)
    x = torch.rand(1, 3, 64, 64)
    T = map_motion(torch.randn(73, 27), MappingNetwork())
    vol = encode3d(x, FeatureEncoder3D())
    flow = predict_flow(x, T[None], FlowPredictor(), vol.shape)
    out = decode3d(vol, FeatureDecoder3D())
    unet = TransUNet()(torch.rand(1, 6, 64, 64), T[None])
    shapes = {
        "encode3d": tuple(vol.shape[1:]),
        "flow": tuple(flow.shape[1:]),
        "decode3d": tuple(out.shape[1:]),
        "transunet": tuple(unet.shape[1:]),
        "mapping": tuple(T.shape),
    }
    expected = {
        "encode3d": (64, 8, 2, 2),
        "flow": (3, 8, 2, 2),
        "decode3d": (3, 64, 64),
        "transunet": (3, 64, 64),
        "mapping": (256,),
    }
    verdict(5, shapes == expected, str(shapes), capsys)


def test_criterion_06_cyclic_wiring(capsys):
    torch.manual_seed(0)
    enc, dec = FeatureEncoder3D(), FeatureDecoder3D()
    zero = ZeroFlowPredictor(8, enc.factor)
    mapping = MappingNetwork()
    I = torch.rand(2, 3, 64, 64)
    w1, w2 = torch.randn(2, 73, 27), torch.randn(2, 73, 27) * 3
    with torch.no_grad():
        assert not torch.allclose(mapping(w1), mapping(w2))
        c1 = float(cyclic_warp_loss(I, w1, w2, mapping, enc, zero, dec))
        c2 = float(cyclic_warp_loss(I, w2, w1, mapping, enc, zero, dec))
        double = float(l1_image(dec(enc(dec(enc(I)))), I))
    ok = abs(c1 - c2) < 1e-6 and abs(c1 - double) < 1e-6
    verdict(6, ok, f"T1 {c1:.7f}, T2 {c2:.7f}, double round trip {double:.7f}", capsys)


# ---- training-based criteria -------------------------------------------------


def _self_psnr(model, seq):
    k = model.config.window_radius
    model.eval()
    vals = [
        psnr(reenact_frame(seq.frames[0], seq.masks[0], seq.window(i, k), model).numpy(), seq.frames[i])
        for i in range(1, len(seq))
    ]
    return float(np.mean(vals))


def _fixed_batch(seq, k, n=4, seed=99):
    rng = np.random.default_rng(seed)
    return PairBatch.from_samples([sample_pair([seq], rng, k) for _ in range(n)])


def test_criterion_07_overfit_smoke(capsys):
    t0 = time.perf_counter()
    seq = make_synthetic_sequence(7, 8, 64)
    cfg = TrainConfig(epochs_per_phase=300, steps_per_epoch=1, decay_epoch=150, batch_size=4, seed=0)
    tr = Trainer(cfg, [seq])
    batch = _fixed_batch(seq, cfg.window_radius)
    initial_total = evaluation_losses(batch, tr.model, cfg)["total"]
    initial_psnr = _self_psnr(tr.model, seq)
    tr.run(phases=(1, 2))
    final_total = evaluation_losses(batch, tr.model, cfg)["total"]
    final_psnr = _self_psnr(tr.model, seq)

    model = tr.model.eval()
    with torch.no_grad():
        src_fg, _ = separate_foreground(batch.src, batch.src_mask)
        tgt_fg, _ = separate_foreground(batch.tgt, batch.tgt_mask)
        T = model.mapping(batch.tgt_window)
        warped = model.warp(src_fg, T)[0]
        refined = refine(src_fg, warped, T, model.refiner)
        d_warp = float(perceptual_loss(warped, tgt_fg, model.perceptual))
        d_ref = float(perceptual_loss(refined, tgt_fg, model.perceptual))
    dt = time.perf_counter() - t0
    ok = final_total < 0.5 * initial_total and final_psnr - initial_psnr >= 3 and d_ref < d_warp and dt < 1200
    detail = (
        f"total {initial_total:.3f}->{final_total:.3f} (ratio {final_total / initial_total:.3f}), "
        f"PSNR {initial_psnr:.2f}->{final_psnr:.2f} dB, perceptual refined {d_ref:.4f} vs warped {d_warp:.4f}, "
        f"{dt:.0f}s"
    )
    verdict(7, ok, detail, capsys)


def _heldout_cyclic_error(model, seq, pairs, k):
    model.eval()
    errs = []
    with torch.no_grad():
        for i, j in pairs:
            fg = torch.as_tensor(seq.frames[i : i + 1] * seq.masks[i : i + 1])
            T_t = model.mapping(torch.as_tensor(seq.window(j, k)[None], dtype=torch.float32))
            T_s = model.mapping(torch.as_tensor(seq.window(i, k)[None], dtype=torch.float32))
            warped = model.warp(fg, T_t)[0]
            errs.append(float(cyclic_from_warped(fg, warped, T_s, model.enc3d, model.flow, model.dec3d)))
    return float(np.mean(errs))


ABLATION_STEPS = 200


def test_criterion_08a_cyclic_loss_ablation(capsys):
    # train on the even frames of a 16-frame sequence, score pairs of odd (held-out) frames
    full = make_synthetic_sequence(21, 16, 64)
    train = full.subset(range(0, 16, 2))
    k = 13
    pairs = [(i, j) for i in range(1, 16, 2) for j in range(1, 16, 2) if i != j][::3]
    errors = {}
    for name, w in (("with", LossWeights()), ("without", LossWeights(cyclic_warp=0.0))):
        cfg = TrainConfig(
            weights=w, epochs_per_phase=ABLATION_STEPS, steps_per_epoch=1, decay_epoch=ABLATION_STEPS // 2, seed=0
        )
        tr = Trainer(cfg, [train]).run(phases=(1,))
        errors[name] = _heldout_cyclic_error(tr.model, full, pairs, k)
    ok = errors["without"] >= errors["with"]
    verdict(8, ok, f"(a) held-out cyclic error with {errors['with']:.4f}, without {errors['without']:.4f}", capsys)


def test_criterion_08b_window_ablation(capsys):
    # contiguous train/test halves keep the frame rate, so a window spans the same time in both
    clean = make_synthetic_sequence(31, 32, 64)
    train = clean.subset(range(16))
    # per-frame noise on the scale of the dominant expression tracks (amplitude 1)
    noise = 1.0
    test_params = add_param_noise(clean.params, noise, seed=1234)
    held_out = list(range(16, 32))
    scores = {}
    for k in (0, 2):
        model_cfg = ModelConfig(window_radius=k, mapping_layers=0)
        cfg = TrainConfig(
            model=model_cfg, epochs_per_phase=ABLATION_STEPS, steps_per_epoch=1,
            decay_epoch=ABLATION_STEPS // 2, param_noise_std=noise, seed=0,
        )
        tr = Trainer(cfg, [train]).run(phases=(1, 2))
        model = tr.model.eval()
        vals = [
            psnr(reenact_frame(clean.frames[0], clean.masks[0], window_from_matrix(test_params, j, k), model).numpy(),
                 clean.frames[j])
            for j in held_out
        ]
        scores[k] = float(np.mean(vals))
    ok = scores[2] >= scores[0]
    verdict(8, ok, f"(b) noisy-stream PSNR k=0 {scores[0]:.3f} dB, k=2 {scores[2]:.3f} dB", capsys)


def test_criterion_09_metric_battery(capsys, tiny_model, two_seqs):
    rng = np.random.default_rng(0)
    img = rng.random((3, 32, 32))
    emb = PooledFeatureEmbedder()
    e = emb(img[None])[0]
    identities = {"psnr": psnr(img, img), "ssim": ssim(img, img), "csim": cosine_similarity(e, e)}
    fd = frechet_distance(rng.normal(0, 1, (20000, 1)), rng.normal(1, 1, (20000, 1)))
    k345 = akd(np.zeros((1, 1, 2)), np.array([[[3.0, 4.0]]]))
    model = tiny_model.eval()
    csv_a = format_report(evaluate(model, two_seqs, "cross", seed=11)[0])
    csv_b = format_report(evaluate(model, two_seqs, "cross", seed=11)[0])
    ok = (
        identities["psnr"] == 99.0
        and identities["ssim"] == 1.0
        and abs(identities["csim"] - 1.0) < 1e-12
        and abs(fd - 1.0) <= 0.05
        and k345 == 5.0
        and csv_a == csv_b
    )
    verdict(9, ok, f"identities {identities}, 1-D FD {fd:.4f}, AKD {k345}, CSV identical {csv_a == csv_b}", capsys)


def _toml(v):
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(str(x) for x in v) + "]"
    return str(v)


def test_criterion_10_schedule_and_phases(capsys, tmp_path, seq8):
    cfg = TrainConfig()
    lr49, lr50 = lr_schedule(49, cfg), lr_schedule(50, cfg)

    tiny = TrainConfig(model=ModelConfig(**TINY), epochs_per_phase=3, steps_per_epoch=2, decay_epoch=1, batch_size=2)
    tr = Trainer(tiny, [seq8])
    before = weights_digest(tr.model.refiner)
    tr.run(phases=(1,))
    frozen = weights_digest(tr.model.refiner) == before

    main(["synth", "--out", str(tmp_path / "data"), "--sequences", "1", "--frames", "4", "--seed", "0"])
    lines = [f'dataset_root = "{tmp_path / "data"}"', "epochs_per_phase = 3", "steps_per_epoch = 1",
             "decay_epoch = 1", "batch_size = 2", "[model]"] + [f"{k} = {_toml(v)}" for k, v in TINY.items()]
    (tmp_path / "c.toml").write_text("\n".join(lines) + "\n")
    code = main(["train", "--config", str(tmp_path / "c.toml"), "--phase", "both", "--out", str(tmp_path / "run")])
    epochs = read_checkpoint(tmp_path / "run" / "final.pt")["trainer"]["epochs_executed"] if code == 0 else None
    ok = lr49 == 1e-4 and abs(lr50 - 2e-5) < 1e-20 and frozen and epochs == 6
    verdict(10, ok, f"lr(49)={lr49:g}, lr(50)={lr50:g}, refiner frozen {frozen}, both-phase epochs {epochs} of 6", capsys)
