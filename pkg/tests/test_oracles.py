"""Closed-form and brute-force oracles for individual operations."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import TINY
from gradients import fd_relative_error
from flowrenderer.datamodel import composite_foreground, make_synthetic_sequence, separate_foreground, synthetic_basis
from flowrenderer.datamodel.synthetic import reconstruct_shape
from flowrenderer.losses import IdentityExtractor, PerceptualFeatureExtractor, l1_image, perceptual_loss
from flowrenderer.losses import roundtrip_feature_loss, style_loss, warp3d_feature_loss
from flowrenderer.mapping import MappingNetwork
from flowrenderer.metrics import aed_apd, cosine_similarity, psnr, ssim
from flowrenderer.pipeline import ModelConfig
from flowrenderer.training import PairBatch, TrainConfig, Trainer, compute_losses, sample_pair, total_loss
from flowrenderer.transunet import TransUNet, transunet_forward
from flowrenderer.warp3d import AdaIN, FeatureDecoder3D, FeatureEncoder3D, warp_volume


def test_reconstruct_shape_triple_loop():
    rng = np.random.default_rng(0)
    basis = synthetic_basis(seed=5)
    a, b = rng.normal(size=80), rng.normal(size=64)
    V = basis.mean_shape.shape[0]
    ref = np.zeros((V, 3))
    for v in range(V):
        for c in range(3):
            s = basis.mean_shape[v, c]
            for i in range(80):
                s += basis.id_basis[v, c, i] * a[i]
            for j in range(64):
                s += basis.exp_basis[v, c, j] * b[j]
            ref[v, c] = s
    assert np.abs(reconstruct_shape(basis, a, b) - ref).max() < 1e-10


def test_soft_mask_separation_is_additive():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 16, 16, generator=g)
    m = torch.rand(4, 1, 16, 16, generator=g)
    fg, bg = separate_foreground(x, m)
    assert (fg + bg - x).abs().max() < 1e-7


def test_blank_region_is_mask_set_difference():
    seq = make_synthetic_sequence(4, 12, 64)
    i, j = 0, int(np.argmax(np.abs(seq.params[:, 67] - seq.params[0, 67])))  # largest horizontal shift
    fg_new = torch.as_tensor(seq.frames[j : j + 1] * seq.masks[j : j + 1])
    src_mask = torch.as_tensor(seq.masks[i : i + 1])
    _, bg = separate_foreground(torch.as_tensor(seq.frames[i : i + 1]), src_mask)
    _, blank = composite_foreground(fg_new, bg, src_mask)
    old = seq.masks[i, 0]
    new_px = (0.299 * fg_new[0, 0] + 0.587 * fg_new[0, 1] + 0.114 * fg_new[0, 2]).numpy() > 1e-3
    expected = np.zeros_like(new_px)
    for y in range(64):
        for x in range(64):
            expected[y, x] = old[y, x] * (1 - new_px[y, x]) > 0.5
    assert expected.sum() > 0
    np.testing.assert_array_equal(blank[0, 0].numpy().astype(bool), expected)


def test_mapping_length_trace():
    net = MappingNetwork(73, 16, 3)
    x = net.embed(torch.randn(1, 73, 27))
    lengths = [x.shape[-1]]
    for conv in net.layers:
        x = F.leaky_relu(conv(x), 0.2)[..., 1:-1]
        lengths.append(x.shape[-1])
    assert lengths == [27, 23, 19, 15]
    assert net(torch.randn(1, 73, 27)).shape == (1, 16)


def test_encoder_keeps_depth_constant():
    enc = FeatureEncoder3D()
    h = enc.stem(torch.rand(1, 3, 64, 64))
    depths = [h.shape[2]]
    for block in enc.blocks:
        h = block(h)
        depths.append(h.shape[2])
    assert depths == [8, 8, 8, 8]


def test_decoded_warp_gradient_wrt_flow_entry():
    # 16x16 toy: one down block (factor 8) gives a 2x2 lattice, three upsampling stages restore 16x16
    torch.manual_seed(0)
    enc = FeatureEncoder3D(stem=(8, 8), depth=2, channels=(4,)).double()
    dec = FeatureDecoder3D(in_channels=4, depth=2, width=8, n_res=1, n_up=3, min_width=4).double()
    vol = enc(torch.rand(1, 3, 16, 16, dtype=torch.float64)).detach()
    flow = torch.rand(1, 3, 2, 2, 2, dtype=torch.float64) * 0.6 - 0.3
    entry = (0, 1, 1, 0, 1)

    def f(v):
        fl = flow.clone()
        fl[entry] = v
        return dec(warp_volume(vol, fl)).mean()

    v0 = flow[entry].clone().requires_grad_()
    (analytic,) = torch.autograd.grad(f(v0), v0)
    with torch.no_grad():
        numeric = (f(v0 + 1e-3) - f(v0 - 1e-3)) / 2e-3
    assert abs(float(analytic - numeric)) <= 1e-2 * abs(float(numeric))


def test_transunet_gradient_small_config():
    torch.manual_seed(1)
    net = TransUNet(6, 3, depth=2, base_width=2).double()
    for m in net.modules():
        if isinstance(m, AdaIN):
            torch.nn.init.normal_(m.affine.weight, std=0.5)
    x = torch.rand(1, 6, 8, 8, dtype=torch.float64)
    assert fd_relative_error(lambda t: transunet_forward(x, t, net), (torch.randn(1, 3, dtype=torch.float64),)) < 1e-2


def test_closed_form_loss_values():
    a = torch.rand(1, 3, 8, 8)
    assert float(perceptual_loss(a + 0.5, a, IdentityExtractor())) == pytest.approx(0.5, abs=1e-6)
    assert float(l1_image(a, a + 0.25)) == pytest.approx(0.25, abs=1e-6)
    v = torch.randn(1, 2, 2, 2, 2)
    assert float(warp3d_feature_loss(v + 2, v)) == pytest.approx(4.0, abs=1e-5)


def test_mse_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(1, 2, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2, 2))
    ref = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size
    assert abs(float(warp3d_feature_loss(torch.as_tensor(a), torch.as_tensor(b))) - ref) < 1e-10


def test_style_loss_loop_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.random((1, 2, 3, 3)), rng.random((1, 2, 3, 3))

    def gram(x):
        C, H, W = x.shape[1:]
        G = np.zeros((C, C))
        for i in range(C):
            for j in range(C):
                G[i, j] = sum(x[0, i, y, z] * x[0, j, y, z] for y in range(H) for z in range(W)) / (C * H * W)
        return G

    ref = np.abs(gram(a) - gram(b)).mean()
    got = float(style_loss(torch.as_tensor(a), torch.as_tensor(b), IdentityExtractor()))
    assert abs(got - ref) < 1e-8


def test_roundtrip_loss_decreases_on_fixed_image():
    torch.manual_seed(0)
    cfg = ModelConfig(**TINY)
    enc = FeatureEncoder3D(cfg.enc_stem, cfg.depth, cfg.enc_channels)
    dec = FeatureDecoder3D(cfg.enc_channels[-1], cfg.depth, cfg.dec_width, cfg.dec_res_blocks, n_up=5)
    phi = PerceptualFeatureExtractor()
    seq = make_synthetic_sequence(0, 2, 64)
    img = torch.as_tensor(seq.frames[:1] * seq.masks[:1])
    opt = torch.optim.Adam([*enc.parameters(), *dec.parameters()], lr=1e-3)
    first = None
    for _ in range(200):
        opt.zero_grad()
        loss = roundtrip_feature_loss(img, enc, dec, phi)
        first = float(loss.detach()) if first is None else first
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert float(roundtrip_feature_loss(img, enc, dec, phi)) < 0.5 * first


def test_phase1_loss_drops_after_toy_training(seq8):
    cfg = TrainConfig(model=ModelConfig(**TINY), epochs_per_phase=300, steps_per_epoch=1, decay_epoch=150,
                      batch_size=2, base_lr=1e-3)
    tr = Trainer(cfg, [seq8])
    batch = PairBatch.from_samples([sample_pair([seq8], np.random.default_rng(5), 2)])

    def phase1_total():
        tr.model.eval()
        with torch.no_grad():
            return float(total_loss(compute_losses(batch, tr.model, 1), cfg.weights))

    before = phase1_total()
    tr.run(phases=(1,))
    assert phase1_total() < before


def test_inpainter_keeps_valid_pixels(seq8):
    # after a short phase-1 run the inpainter should change valid pixels less than blanking destroys
    cfg = TrainConfig(model=ModelConfig(**TINY), epochs_per_phase=150, steps_per_epoch=1, decay_epoch=100,
                      batch_size=2, base_lr=1e-3)
    tr = Trainer(cfg, [seq8]).run(phases=(1,))
    model = tr.model.eval()
    composited = torch.as_tensor(seq8.frames[3:4])
    T = model.mapping(torch.as_tensor(seq8.window(3, 2)[None], dtype=torch.float32))
    half = torch.ones(1, 1, 64, 64)
    half[..., :, 32:] = 0
    with torch.no_grad():
        out = model.inpainter(composited, T)
    keep_err = float((out - composited).abs().mean())
    blank_err = float((composited * (1 - half)).abs().sum() / (3 * (1 - half).sum()))
    assert keep_err < blank_err


def test_sample_pair_never_repeats_index(seq8):
    rng = np.random.default_rng(0)
    assert all(s.src_index != s.tgt_index for s in (sample_pair([seq8], rng, 1) for _ in range(1000)))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(0)
    a = rng.random((3, 32, 32))
    base = rng.normal(size=a.shape)
    values = [psnr(a, a + s * base) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_anticorrelated_binary_image():
    a = (np.random.default_rng(0).random((32, 32)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


def test_cosine_loop_oracle():
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=17), rng.normal(size=17)
    dot = sum(u[i] * v[i] for i in range(17))
    nu = sum(x * x for x in u) ** 0.5
    nv = sum(x * x for x in v) ** 0.5
    assert abs(cosine_similarity(u, v) - dot / (nu * nv)) < 1e-8


def test_aed_constant_beta_offset():
    p = np.random.default_rng(2).normal(size=(5, 73))
    q = p.copy()
    q[:, :64] += 0.1
    aed, apd = aed_apd(p, q)
    assert aed == pytest.approx(0.1) and apd == 0.0
