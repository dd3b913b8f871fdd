"""Acceptance gate: nine primary criteria, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines.
Criterion 1 trains three 5000-step models; trained checkpoints and the
synthetic dataset are cached outside the repository keyed by a hash of the
package sources, so a rerun without code changes is fast while any code
change forces honest retraining.
"""

import glob
import hashlib
import itertools
import math
import os

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

import framefuse
from framefuse import fusion, media, metrics, networks, path_opt, training
from framefuse.flow import (
    WarpBundle,
    backward_warp,
    bilinear_sample,
    chain_flow,
    consistency_error,
    estimate_flow_fallback,
)
from framefuse.media import ProjectConfig, write_flo, write_frame_sequence
from framefuse.pipeline import stabilize

_LEAN = dict(feature_dim=16, enc_hidden=8, wn_hidden=16, gen_base=16)
_CACHE_ROOT = os.environ.get("ACCEPTANCE_CACHE", "/tmp/framefuse_acceptance_cache")


def _verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {name}"
    if detail:
        line += f" ({detail})"
    print("\n" + line)
    assert ok, line


# --- shared synthesis helpers -------------------------------------------------------


def _texture_clip(seed: int, size: int = 120, frames: int = 7):
    rng = np.random.default_rng(seed)
    big = np.repeat(
        gaussian_filter(rng.random((size, size, 1)).astype(np.float32), (2, 2, 0)),
        3,
        axis=2,
    )
    big = (big - big.min()) / (big.max() - big.min())
    return [big] * frames


def _sharp_clip(seed: int, size: int = 120, frames: int = 7):
    """Multi-scale texture with real high-frequency content.

    Sub-pixel warping visibly softens this texture, so fusion spaces that can
    only reweight warped pixels lose detail that the decoding spaces recover.
    """
    rng = np.random.default_rng(seed)
    big = gaussian_filter(rng.random((size, size, 1)), (0.7, 0.7, 0))
    big = big + 0.5 * gaussian_filter(rng.random((size, size, 1)), (3, 3, 0))
    big = np.repeat(big, 3, axis=2).astype(np.float32)
    big = (big - big.min()) / (big.max() - big.min())
    return [big] * frames


def _write_scene(tmp_path, n, h=40, w=40, drift=0, jitter=3, seed=0, sigma=3.0):
    """Jittery (optionally panning) crops of a static texture + exact flows."""
    rng = np.random.default_rng(seed)
    big = gaussian_filter(rng.random((h + 4 * (jitter + drift * n // 2) + 40,
                                      w + 4 * (jitter + drift * n // 2) + 40, 3)),
                          (sigma, sigma, 0))
    big = ((big - big.min()) / (big.max() - big.min())).astype(np.float32)
    margin = jitter + 1
    offsets = []
    for k in range(n):
        jx = int(rng.integers(-jitter, jitter + 1))
        jy = int(rng.integers(-jitter, jitter + 1))
        offsets.append((margin + drift * k + jx, margin + jy))
    frames = [big[oy : oy + h, ox : ox + w].copy() for ox, oy in offsets]
    frame_dir = os.path.join(tmp_path, "frames")
    write_frame_sequence(frame_dir, frames)
    flow_dir = os.path.join(tmp_path, "flows")
    os.makedirs(flow_dir, exist_ok=True)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            f = np.zeros((h, w, 2), np.float32)
            f[..., 0] = offsets[i][0] - offsets[j][0]
            f[..., 1] = offsets[i][1] - offsets[j][1]
            write_flo(os.path.join(flow_dir, f"{i:06d}_{j:06d}.flo"), f)
    return frame_dir, flow_dir, offsets


def _code_fingerprint() -> str:
    h = hashlib.sha256()
    pkg = os.path.dirname(framefuse.__file__)
    for path in sorted(glob.glob(os.path.join(pkg, "*.py"))):
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def ordering_dataset():
    """200 train + 40 held-out synthetic 64x64 samples with sub-pixel jitter."""
    root = os.path.join(_CACHE_ROOT, _code_fingerprint(), "dataset")
    if not os.path.isdir(root) or len(os.listdir(root)) != 240:
        os.makedirs(root, exist_ok=True)
        rng = np.random.default_rng(7)
        clips = [_sharp_clip(100 + i) for i in range(8)]
        for i in range(240):
            s = training.synthesize_sample(clips[i % 8], (64, 64), 6, rng, subpixel=True)
            training.save_sample(os.path.join(root, f"sample_{i:05d}"), s)
    samples = training.load_dataset(root)
    assert len(samples) == 240
    return samples[:200], samples[200:]


@pytest.fixture(scope="session")
def ordering_models(ordering_dataset):
    """Three 5000-step trainings (one per fusion space), cached per code hash."""
    train, _ = ordering_dataset
    ckpt_dir = os.path.join(_CACHE_ROOT, _code_fingerprint())
    os.makedirs(ckpt_dir, exist_ok=True)
    models = {}
    for space in training.TRAIN_SPACES:
        path = os.path.join(ckpt_dir, f"{space}.fstb")
        if not os.path.exists(path):
            cfg = training.TrainConfig(
                steps=5000, learning_rate=1e-3, seed=0, fusion_space=space, **_LEAN
            )
            m, _ = training.train_run(train, cfg)
            networks.save_checkpoint(path, m, step=cfg.steps)
        models[space] = networks.load_checkpoint(path)[0]
    return models


# --- 1. fusion-space ordering -------------------------------------------------------


def test_criterion_1_fusion_space_ordering(ordering_dataset, ordering_models):
    _, held = ordering_dataset
    scores = {
        space: training.evaluate_psnr(ordering_models[space], held, space)
        for space in ("image", "feature", "hybrid")
    }
    ok = (
        scores["hybrid"] > scores["image"] + 0.3
        and scores["hybrid"] >= scores["feature"]
    )
    detail = ", ".join(f"{k}={v:.3f} dB" for k, v in scores.items())
    _verdict(1, "held-out PSNR ordering hybrid > image + 0.3 dB, hybrid >= feature", ok, detail)


# --- 2. single-sample overfit -------------------------------------------------------


def test_criterion_2_overfit_sanity():
    rng = np.random.default_rng(11)
    sample = training.synthesize_sample(_texture_clip(42), (64, 64), 6, rng)
    cfg = training.TrainConfig(
        steps=500, learning_rate=1e-3, seed=0, fusion_space="hybrid", **_LEAN
    )
    models, trace = training.train_run([sample], cfg)
    train_psnr = training.evaluate_psnr(models, [sample], "hybrid")
    losses = np.array([row[1] for row in trace])
    medians = [float(np.median(losses[i : i + 50])) for i in range(0, 500, 50)]
    monotone = all(b < a for a, b in zip(medians, medians[1:]))
    ok = train_psnr > 30.0 and monotone
    _verdict(
        2,
        "hybrid overfit: train PSNR > 30 dB, 50-step loss medians decreasing",
        ok,
        f"PSNR={train_psnr:.2f} dB, medians {medians[0]:.4f} -> {medians[-1]:.4f}, "
        f"monotone={monotone}",
    )


# --- 3. oracle equivalences ---------------------------------------------------------


def _ref_sample(raster, x, y):
    h, w = raster.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        raster[y0, x0] * (1 - fx) * (1 - fy)
        + raster[y0, x1] * fx * (1 - fy)
        + raster[y1, x0] * (1 - fx) * fy
        + raster[y1, x1] * fx * fy
    )


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(3)
    h = w = 32
    worst = 0.0
    for _ in range(50):
        src = rng.random((h, w, 3)).astype(np.float32)
        f_ab = (rng.random((h, w, 2)).astype(np.float32) - 0.5) * 10
        f_bc = (rng.random((h, w, 2)).astype(np.float32) - 0.5) * 10
        warped = backward_warp(src, f_ab)
        chained = chain_flow(f_ab, f_bc)
        err = consistency_error(f_ab, f_bc)
        items = rng.random((4, h, w, 3)).astype(np.float32)
        weights = rng.random((4, h, w)).astype(np.float32)
        weights /= weights.sum(axis=0, keepdims=True)
        blended = fusion.weighted_blend(items, weights)
        src64 = src.astype(np.float64)
        f_bc64 = f_bc.astype(np.float64)
        for _ in range(40):
            y, x = int(rng.integers(h)), int(rng.integers(w))
            fx, fy = float(f_ab[y, x, 0]), float(f_ab[y, x, 1])
            worst = max(worst, float(np.abs(
                warped[y, x] - _ref_sample(src64, x + fx, y + fy)).max()))
            bx = float(_ref_sample(f_bc64[..., 0], x + fx, y + fy))
            by = float(_ref_sample(f_bc64[..., 1], x + fx, y + fy))
            worst = max(worst, abs(chained[y, x, 0] - (fx + bx)))
            worst = max(worst, abs(chained[y, x, 1] - (fy + by)))
            worst = max(worst, abs(err[y, x] - math.hypot(fx + bx, fy + by)))
            num = sum(items[n, y, x] * weights[n, y, x] for n in range(4))
            worst = max(worst, float(np.abs(blended[y, x] - num).max()))
    oracle_ok = worst <= 1e-5

    dp_ok = True
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        t = int(rng.integers(2, 5))
        lam = float(rng.random() * 5)
        costs = rng.random((t, 5, 5))

        def cost(k, label):
            return float(costs[k, label[1] + 2, label[0] + 2])

        path, _ = path_opt.optimize_path(cost, lam, 10.0, radius=2, n_frames=t)
        labels = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3)]
        best = None
        for combo in itertools.product(labels, repeat=t):
            e = sum(cost(k, combo[k]) for k in range(t))
            for k in range(t - 1):
                d2 = (combo[k][0] - combo[k + 1][0]) ** 2 + (
                    combo[k][1] - combo[k + 1][1]) ** 2
                e += 2.0 * lam * d2 / 100.0
            if best is None or e < best[0] - 1e-12:
                best = (e, combo)
        got = sum(cost(k, path[k]) for k in range(t))
        for k in range(t - 1):
            d2 = (path[k][0] - path[k + 1][0]) ** 2 + (path[k][1] - path[k + 1][1]) ** 2
            got += 2.0 * lam * d2 / 100.0
        if abs(got - best[0]) > 1e-9:
            dp_ok = False
    ok = oracle_ok and dp_ok
    _verdict(
        3,
        "warp/chain/consistency/blend oracles within 1e-5; DP == exhaustive",
        ok,
        f"max oracle err {worst:.2e}, dp_ok={dp_ok}",
    )


# --- 4. full-frame guarantee --------------------------------------------------------


def test_criterion_4_full_frame_guarantee(tmp_path):
    from framefuse.flow import DiskFlowProvider
    from framefuse.pipeline import simple_smoother

    frame_dir, flow_dir, _ = _write_scene(
        str(tmp_path), n=30, h=64, w=64, seed=4, sigma=2.0
    )
    # integer-quantized smoothed trajectory keeps every output an exact crop
    frames = media.read_frame_sequence(frame_dir)
    provider = DiskFlowProvider(frames, flow_dir)
    warp_dir = os.path.join(str(tmp_path), "warps")
    os.makedirs(warp_dir)
    for k, f in enumerate(simple_smoother(frames, provider)):
        write_flo(os.path.join(warp_dir, f"{k:06d}.flo"), np.rint(f).astype(np.float32))
    out_dir = os.path.join(str(tmp_path), "out")
    config = ProjectConfig(
        frame_dir=frame_dir,
        warp_dir=warp_dir,
        output_dir=out_dir,
        flow_dir=flow_dir,
        neighborhood_radius=4,
        fusion_space="image",
        fusion_function="flow_error",
        detail_transfer=False,
        lambda_s=0.01,
    )
    run = stabilize(config, auto_smooth=False, path_adjust=True)
    inputs = media.read_frame_sequence(frame_dir)
    outputs = media.read_frame_sequence(out_dir)
    finite = all(np.isfinite(f).all() for f in outputs)
    holes = max(run.hole_fractions)
    crop = metrics.cropping_ratio(inputs, outputs, estimate_flow_fallback)[0]
    ok = finite and holes == 0.0 and crop == 1.0
    _verdict(
        4,
        "30-frame jitter clip: zero undefined pixels, cropping_ratio == 1.0",
        ok,
        f"max hole fraction {holes}, cropping_ratio {crop}",
    )


# --- 5. identity pipeline -----------------------------------------------------------


def test_criterion_5_identity_pipeline(tmp_path):
    rng = np.random.default_rng(5)
    frame = gaussian_filter(rng.random((40, 40, 3)).astype(np.float32), (2, 2, 0))
    frame = (frame - frame.min()) / (frame.max() - frame.min())
    frames = [frame.copy() for _ in range(14)]
    frame_dir = os.path.join(str(tmp_path), "frames")
    write_frame_sequence(frame_dir, frames)
    warp_dir = os.path.join(str(tmp_path), "warps")
    os.makedirs(warp_dir)
    for k in range(14):
        write_flo(os.path.join(warp_dir, f"{k:06d}.flo"), np.zeros((40, 40, 2), np.float32))
    out_dir = os.path.join(str(tmp_path), "out")
    config = ProjectConfig(
        frame_dir=frame_dir,
        warp_dir=warp_dir,
        output_dir=out_dir,
        neighborhood_radius=2,
        fusion_space="image",
        fusion_function="mean",
    )
    stabilize(config, auto_smooth=False, path_adjust=False)
    inputs = media.read_frame_sequence(frame_dir)
    outputs = media.read_frame_sequence(out_dir)
    pix = max(float(np.abs(a - b).max()) for a, b in zip(inputs, outputs))
    report = metrics.evaluate_stabilization(inputs, inputs, estimate_flow_fallback)
    ok = (
        pix <= 1.0 / 255.0 + 1e-6
        and abs(report.cropping_ratio - 1.0) <= 1e-3
        and abs(report.distortion - 1.0) <= 1e-3
        and report.accumulated_flow == 0.0
        and report.stability == 1.0
    )
    _verdict(
        5,
        "static video reproduced within 1/255; evaluate(v, v) gives C=D=1, A=0, S=1",
        ok,
        f"max pixel diff {pix:.5f}, C={report.cropping_ratio}, "
        f"D={report.distortion}, A={report.accumulated_flow}, S={report.stability}",
    )


# --- 6. weight normalization --------------------------------------------------------


def _random_bundle(rng, n, h=12, w=12):
    masks = (rng.random((n, h, w)) < 0.8).astype(np.float32)
    masks[:, : h // 4, : w // 4] = 0.0  # force an all-invalid patch
    key = int(rng.integers(n))
    masks[key] = np.maximum(masks[key], 0.0)
    return WarpBundle(
        target=key,
        neighbors=list(range(n)),
        warps=(rng.random((n, h, w, 2)).astype(np.float32) - 0.5) * 4,
        masks=masks,
        errors=rng.random((n, h, w)).astype(np.float32) * 3,
        src_masks=masks.copy(),
        src_errors=rng.random((n, h, w)).astype(np.float32) * 3,
    )


def test_criterion_6_weight_normalization():
    torch.manual_seed(6)
    models = networks.build_models(**_LEAN)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        bundle = _random_bundle(rng, n)
        for mode in ("mean", "gaussian", "argmax", "flow_error"):
            w = fusion.heuristic_weights(mode, bundle)
            worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
        feats = rng.random((n, 12, 12, _LEAN["feature_dim"])).astype(np.float32)
        w = fusion.learned_weights(bundle, feats, models)
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
        conf = fusion.fuse_hybrid(bundle, feats, models).per_neighbor_confidence
        worst = max(worst, float(np.abs(conf.sum(axis=0) - 1.0).max()))
    ok = worst <= 1e-5
    _verdict(
        6,
        "per-pixel weight sums within 1e-5 of 1 for all five weight functions "
        "and hybrid confidences (100 random bundles)",
        ok,
        f"worst deviation {worst:.2e}",
    )


# --- 7. path solver properties ------------------------------------------------------


def test_criterion_7_solver_properties():
    levels_ok = True
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)

        def cost(k, label, r=rng):
            h = hash((k, label)) % (2**32)
            return np.random.default_rng(h + seed).random()

        _, energies = path_opt.optimize_path(
            cost, float(rng.random() * 10), 100.0, radius=24, n_frames=5
        )
        if len(energies) < 2 or any(
            b > a + 1e-12 for a, b in zip(energies, energies[1:])
        ):
            levels_ok = False

    rng = np.random.default_rng(77)
    costs = rng.random((6, 9, 9))

    def cost2(k, label):
        return float(costs[k, label[1] + 4, label[0] + 4])

    rigid, _ = path_opt.optimize_path(cost2, 1e6, 10.0, radius=4, n_frames=6)
    rigid_ok = all(x == rigid[0] for x in rigid)

    free, _ = path_opt.optimize_path(cost2, 0.0, 10.0, radius=4, n_frames=6)
    free_ok = all(
        cost2(k, free[k]) == costs[k].min() for k in range(6)
    )
    ok = levels_ok and rigid_ok and free_ok
    _verdict(
        7,
        "coarse-to-fine energies non-increasing; lambda_s=1e6 -> constant path; "
        "lambda_s=0 -> per-frame argmin",
        ok,
        f"levels_ok={levels_ok}, rigid_ok={rigid_ok}, free_ok={free_ok}",
    )


# --- 8. gradient check --------------------------------------------------------------


def test_criterion_8_gradient_check():
    torch.manual_seed(8)
    rng = np.random.default_rng(8)
    sample = training.synthesize_sample(
        _texture_clip(80, size=48), (16, 16), 2, rng
    )
    models = networks.build_models(feature_dim=4, enc_hidden=4, wn_hidden=8, gen_base=8)
    for p in models.parameters():
        p.data = p.data.double()
    extractor = training.RandomFeatureExtractor(seed=0).double()
    tensors = training.sample_tensors(sample, dtype=torch.float64)

    def loss_value():
        pred = training.render_sample(models, tensors, "hybrid")
        return training.perceptual_l1_loss(
            pred, tensors["target"], extractor, training.DEFAULT_PERCEPTUAL_WEIGHTS
        )

    loss = loss_value()
    loss.backward()
    params = list(models.encoder.parameters()) + list(
        models.weight_net.parameters()
    ) + list(models.generator.parameters())
    picks = []
    per_net = max(1, 24 // len(params))
    for p in params:
        flat = p.detach().reshape(-1)
        idx = rng.choice(flat.numel(), size=min(per_net, flat.numel()), replace=False)
        picks.extend((p, int(i)) for i in idx)
    picks = picks[:max(24, 20)]
    eps = 1e-5
    worst = 0.0
    checked = 0
    for p, i in picks:
        if p.grad is None:
            continue
        analytic = float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            orig = float(p.data.reshape(-1)[i])
            p.data.reshape(-1)[i] = orig + eps
            up = float(loss_value())
            p.data.reshape(-1)[i] = orig - eps
            down = float(loss_value())
            p.data.reshape(-1)[i] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
    ok = checked >= 20 and worst <= 1e-3
    _verdict(
        8,
        "analytic gradients match central differences (<= 1e-3 relative, "
        ">= 20 parameters, all three networks)",
        ok,
        f"checked {checked} params, worst relative error {worst:.2e}",
    )


# --- 9. stabilization effect --------------------------------------------------------


def _write_pan_scene(tmp_path, n, h, w, amp, period, jitter, seed, sigma=2.0):
    """Sinusoidal pan + sub-pixel white jitter, rendered by bilinear resampling.

    Sub-pixel offsets keep the input's inter-frame rotation estimates noisy
    (integer crops would make them exactly zero, which the stability metric
    treats as a degenerate perfectly-stable sequence). The pan period is
    chosen so the smoothed output's velocity-magnitude harmonic falls inside
    the metric's low-frequency band while the input stays jitter-dominated.
    """
    rng = np.random.default_rng(seed)
    pad = 2 * (jitter + amp) + 40
    big = gaussian_filter(rng.random((h + pad, w + pad, 3)), (sigma, sigma, 0))
    big = ((big - big.min()) / (big.max() - big.min())).astype(np.float32)
    margin = jitter + amp + 1
    offsets = []
    for k in range(n):
        px = amp * math.sin(2 * math.pi * k / period)
        jx = float(rng.uniform(-jitter, jitter))
        jy = float(rng.uniform(-jitter, jitter))
        offsets.append((margin + px + jx, margin + jy))
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    frames = [
        bilinear_sample(big, xs + ox, ys + oy).astype(np.float32) for ox, oy in offsets
    ]
    frame_dir = os.path.join(tmp_path, "frames")
    write_frame_sequence(frame_dir, frames)
    flow_dir = os.path.join(tmp_path, "flows")
    os.makedirs(flow_dir, exist_ok=True)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            f = np.zeros((h, w, 2), np.float32)
            f[..., 0] = offsets[i][0] - offsets[j][0]
            f[..., 1] = offsets[i][1] - offsets[j][1]
            write_flo(os.path.join(flow_dir, f"{i:06d}_{j:06d}.flo"), f)
    return frame_dir, flow_dir


def test_criterion_9_stabilization_effect(tmp_path, ordering_models):
    frame_dir, flow_dir = _write_pan_scene(
        str(tmp_path), n=40, h=64, w=64, amp=12, period=20, jitter=5, seed=5
    )
    ckpt = os.path.join(str(tmp_path), "toy.fstb")
    networks.save_checkpoint(ckpt, ordering_models["hybrid"])
    out_dir = os.path.join(str(tmp_path), "out")
    config = ProjectConfig(
        frame_dir=frame_dir,
        warp_dir=os.path.join(str(tmp_path), "unused"),
        output_dir=out_dir,
        flow_dir=flow_dir,
        neighborhood_radius=3,
        fusion_space="hybrid",
        fusion_function="learned",
        checkpoint=ckpt,
    )
    stabilize(config, auto_smooth=True, path_adjust=True)
    inputs = media.read_frame_sequence(frame_dir)
    outputs = media.read_frame_sequence(out_dir)
    a_in = metrics.accumulated_flow(inputs, estimate_flow_fallback)[0]
    a_out = metrics.accumulated_flow(outputs, estimate_flow_fallback)[0]
    s_in = metrics.stability_score(inputs, estimate_flow_fallback)
    s_out = metrics.stability_score(outputs, estimate_flow_fallback)
    ok = a_out < a_in and s_out > s_in
    _verdict(
        9,
        "auto-smooth + hybrid model reduces accumulated flow and raises stability",
        ok,
        f"A {a_in:.4f} -> {a_out:.4f}, S {s_in:.4f} -> {s_out:.4f}",
    )
