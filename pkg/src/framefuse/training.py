"""Training: synthetic unstable/stable pairs, the L1 + perceptual loss, and
the optimization loop for the encoder, weight net, and generator.

Training pairs are made by jitter-cropping a stable clip: 7 crops with
independent random shifts form the unstable input, one more shifted crop of
the center frame is the ground-truth stabilized target. The key warp field
is then a constant translation, exact by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import media
from .flow import (
    backward_warp,
    bilinear_sample,
    chain_flow,
    consistency_error,
    in_bounds_mask,
    visibility_mask,
)
from .fusion import (
    feature_decode_torch,
    fuse_feature_torch,
    hybrid_decode_torch,
    learned_weights_torch,
)
from .networks import ModelBundle, build_models, warp_backward_torch, _to_nchw
from .metrics import psnr

SAMPLE_FRAMES = 7
KEY_INDEX = SAMPLE_FRAMES // 2

TRAIN_SPACES = ("image", "feature", "hybrid")

DEFAULT_PERCEPTUAL_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8)


@dataclass
class TrainSample:
    """One synthetic training pair.

    ``offsets`` are the jitter shifts applied to the source content before
    cropping (so the target->key warp is offsets[key] - target_offset).
    ``flows`` maps (i, j) to the flow over crop i sampling crop j for all
    pairs (key, n) and (n, key).
    """

    frames: list[np.ndarray]
    target: np.ndarray
    key_warp: np.ndarray
    flows: dict[tuple[int, int], np.ndarray]
    offsets: list[tuple[int, int]]
    target_offset: tuple[int, int]


def synthesize_sample(
    clip,
    crop_size: tuple[int, int],
    max_jitter: int,
    rng: np.random.Generator,
    provider=None,
    subpixel: bool = False,
) -> TrainSample:
    """Jitter-crop 7 frames of a stable clip plus a shifted target crop.

    With ``provider`` given, key<->neighbor flows come from
    provider(crop_key, crop_n); otherwise they are the constant translation
    between the crop shifts (exact for a static clip). With ``subpixel`` the
    source shifts are continuous and crops are bilinearly resampled, so every
    warped source carries realistic interpolation softening while the target
    (drawn at an integer shift) stays crisp.
    """
    if len(clip) < SAMPLE_FRAMES:
        raise ValueError(f"clip has {len(clip)} frames, need {SAMPLE_FRAMES}")
    cw, ch = crop_size
    src_h, src_w = clip[0].shape[:2]
    if src_w < cw + 2 * max_jitter or src_h < ch + 2 * max_jitter:
        raise ValueError(
            f"clip {src_w}x{src_h} too small for crop {cw}x{ch} "
            f"with jitter {max_jitter}"
        )
    start = rng.integers(0, len(clip) - SAMPLE_FRAMES + 1)
    base_x = int(rng.integers(max_jitter, src_w - cw - max_jitter + 1))
    base_y = int(rng.integers(max_jitter, src_h - ch - max_jitter + 1))

    def jitter(integral: bool = False) -> tuple:
        if max_jitter == 0:
            return (0, 0)
        if subpixel and not integral:
            return (
                float(rng.uniform(-max_jitter, max_jitter)),
                float(rng.uniform(-max_jitter, max_jitter)),
            )
        return (
            int(rng.integers(-max_jitter, max_jitter + 1)),
            int(rng.integers(-max_jitter, max_jitter + 1)),
        )

    def crop(frame, off):
        # offset = content shift; the crop origin moves the opposite way
        x0, y0 = base_x - off[0], base_y - off[1]
        if float(x0).is_integer() and float(y0).is_integer():
            x0, y0 = int(x0), int(y0)
            return np.ascontiguousarray(frame[y0 : y0 + ch, x0 : x0 + cw])
        xs, ys = np.meshgrid(np.arange(cw, dtype=np.float64),
                             np.arange(ch, dtype=np.float64))
        return bilinear_sample(frame, xs + x0, ys + y0).astype(frame.dtype)

    offsets = [jitter() for _ in range(SAMPLE_FRAMES)]
    target_offset = jitter(integral=True)
    frames = [crop(clip[start + i], offsets[i]) for i in range(SAMPLE_FRAMES)]
    target = crop(clip[start + KEY_INDEX], target_offset)

    key_off = offsets[KEY_INDEX]
    warp = np.empty((ch, cw, 2), dtype=np.float32)
    warp[..., 0] = key_off[0] - target_offset[0]
    warp[..., 1] = key_off[1] - target_offset[1]

    flows = {}
    for n in range(SAMPLE_FRAMES):
        if n == KEY_INDEX:
            continue
        if provider is not None:
            flows[(KEY_INDEX, n)] = provider(frames[KEY_INDEX], frames[n])
            flows[(n, KEY_INDEX)] = provider(frames[n], frames[KEY_INDEX])
        else:
            for i, j in ((KEY_INDEX, n), (n, KEY_INDEX)):
                # frame_i(p) = frame_j(p + F), so F is the content-shift gap
                f = np.empty((ch, cw, 2), dtype=np.float32)
                f[..., 0] = offsets[j][0] - offsets[i][0]
                f[..., 1] = offsets[j][1] - offsets[i][1]
                flows[(i, j)] = f
    return TrainSample(
        frames=frames,
        target=target,
        key_warp=warp,
        flows=flows,
        offsets=offsets,
        target_offset=target_offset,
    )


# ---------------------------------------------------------------------------
# Sample directories (synth-data output)
# ---------------------------------------------------------------------------


def save_sample(dir: str, sample: TrainSample) -> None:
    os.makedirs(dir, exist_ok=True)
    media.write_frame_sequence(os.path.join(dir, "frames"), sample.frames)
    media.write_frame(os.path.join(dir, "target.png"), sample.target)
    media.write_flo(os.path.join(dir, "warp.flo"), sample.key_warp)
    flow_dir = os.path.join(dir, "flows")
    os.makedirs(flow_dir, exist_ok=True)
    for (i, j), f in sorted(sample.flows.items()):
        media.write_flo(os.path.join(flow_dir, f"{i:06d}_{j:06d}.flo"), f)
    meta = {
        "offsets": [list(o) for o in sample.offsets],
        "target_offset": list(sample.target_offset),
    }
    with open(os.path.join(dir, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_sample(dir: str) -> TrainSample:
    frames = media.read_frame_sequence(os.path.join(dir, "frames"))
    target = media.read_frame(os.path.join(dir, "target.png"))
    warp = media.read_flo(os.path.join(dir, "warp.flo"))
    flows = {}
    flow_dir = os.path.join(dir, "flows")
    for name in os.listdir(flow_dir):
        if name.endswith(".flo"):
            i, j = (int(p) for p in name[:-4].split("_"))
            flows[(i, j)] = media.read_flo(os.path.join(flow_dir, name))
    with open(os.path.join(dir, "meta.json")) as f:
        meta = json.load(f)
    return TrainSample(
        frames=frames,
        target=target,
        key_warp=warp,
        flows=flows,
        offsets=[tuple(o) for o in meta["offsets"]],
        target_offset=tuple(meta["target_offset"]),
    )


def load_dataset(root: str) -> list[TrainSample]:
    dirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not dirs:
        raise ValueError(f"no sample directories under {root}")
    return [load_sample(os.path.join(root, d)) for d in dirs]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


class RandomFeatureExtractor(nn.Module):
    """Fixed random-parameter stand-in for a pretrained perceptual network.

    Three frozen strided conv stages; taps after each stage. Used because the
    package ships no pretrained weights; the loss-shape properties (zero at
    equality, nonnegative) are what training relies on.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        chans = [(3, 16), (16, 32), (32, 32)]
        for cin, cout in chans:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5), generator=gen)
                conv.bias.zero_()
            self.stages.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = torch.relu(stage(x))
            taps.append(x)
        return taps


def perceptual_l1_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    extractor: nn.Module | None,
    weights=DEFAULT_PERCEPTUAL_WEIGHTS,
) -> torch.Tensor:
    """mean |pred - gt| plus weighted L1 distances between extractor taps.

    pred/gt: (3, H, W) or (N, 3, H, W) tensors in [0, 1].
    """
    if pred.shape != gt.shape:
        raise ValueError(f"loss shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if any(w < 0 for w in weights):
        raise ValueError("perceptual weights must be >= 0")
    loss = (pred - gt).abs().mean()
    if extractor is not None and any(w > 0 for w in weights):
        p = pred if pred.ndim == 4 else pred.unsqueeze(0)
        g = gt if gt.ndim == 4 else gt.unsqueeze(0)
        taps_p = extractor(p)
        taps_g = extractor(g)
        for lam, tp, tg in zip(weights, taps_p, taps_g):
            if lam > 0:
                loss = loss + lam * (tp - tg).abs().mean()
    return loss


# ---------------------------------------------------------------------------
# Differentiable rendering of one sample
# ---------------------------------------------------------------------------


def sample_tensors(sample: TrainSample, dtype=torch.float32):
    """Precompute the torch-side inputs of one sample (no gradients needed)."""
    frames = _to_nchw(np.stack(sample.frames)).to(dtype)
    target = _to_nchw(sample.target[None]).to(dtype)[0]
    n = len(sample.frames)
    h, w = sample.target.shape[:2]
    warps = np.empty((n, h, w, 2), dtype=np.float32)
    masks = np.empty((n, h, w), dtype=np.float32)
    errors = np.zeros((n, h, w), dtype=np.float32)
    key_warp = sample.key_warp
    for i in range(n):
        if i == KEY_INDEX:
            warps[i] = key_warp
            masks[i] = in_bounds_mask(key_warp)
        else:
            f_kn = sample.flows[(KEY_INDEX, i)]
            f_nk = sample.flows[(i, KEY_INDEX)]
            warps[i] = chain_flow(key_warp, f_kn)
            vis = visibility_mask(f_kn, f_nk)
            err = consistency_error(f_kn, f_nk)
            masks[i] = backward_warp(vis, key_warp) * in_bounds_mask(warps[i])
            errors[i] = backward_warp(err, key_warp)
    return {
        "frames": frames,
        "target": target,
        "warps": torch.from_numpy(warps).permute(0, 3, 1, 2).to(dtype),
        "masks": torch.from_numpy(masks).unsqueeze(1).to(dtype),
        "errors": torch.from_numpy(errors).unsqueeze(1).to(dtype),
    }


def render_sample(models: ModelBundle, tensors: dict, space: str) -> torch.Tensor:
    """Forward pass producing the (3, H, W) prediction for one sample."""
    if space not in TRAIN_SPACES:
        raise ValueError(f"fusion space must be one of {TRAIN_SPACES}, got {space!r}")
    feats = models.encoder(tensors["frames"])
    feats_w = warp_backward_torch(feats, tensors["warps"])
    masks = tensors["masks"]
    weights = learned_weights_torch(feats_w, masks, tensors["errors"], KEY_INDEX, models)
    if space == "image":
        warped_rgb = warp_backward_torch(tensors["frames"], tensors["warps"])
        return (warped_rgb * weights).sum(dim=0)
    fused = fuse_feature_torch(feats_w, weights)
    if space == "feature":
        union = masks.amax(dim=0, keepdim=True)
        return feature_decode_torch(fused, union, models)
    out, _, _ = hybrid_decode_torch(feats_w, masks, fused, models)
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-4
    seed: int = 0
    fusion_space: str = "hybrid"
    feature_dim: int = 32
    enc_hidden: int = 16
    wn_hidden: int = 64
    gen_base: int = 64
    perceptual_weights: tuple = DEFAULT_PERCEPTUAL_WEIGHTS
    perceptual_seed: int = 0


def train_run(samples, config: TrainConfig):
    """Optimize the three networks with Adam; returns (models, loss trace).

    The trace has one (step, loss, psnr) row per step. Deterministic given
    the seed within one runtime configuration; aborts on non-finite loss.
    """
    if not samples:
        raise ValueError("train_run: empty dataset")
    if config.fusion_space not in TRAIN_SPACES:
        raise ValueError(f"unsupported fusion space {config.fusion_space!r}")
    torch.manual_seed(config.seed)
    models = build_models(
        feature_dim=config.feature_dim,
        enc_hidden=config.enc_hidden,
        wn_hidden=config.wn_hidden,
        gen_base=config.gen_base,
    )
    extractor = RandomFeatureExtractor(seed=config.perceptual_seed)
    tensors = [sample_tensors(s) for s in samples]
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(models.parameters(), lr=config.learning_rate)
    trace = []
    for step in range(config.steps):
        idx = int(rng.integers(0, len(tensors)))
        t = tensors[idx]
        optimizer.zero_grad()
        pred = render_sample(models, t, config.fusion_space)
        loss = perceptual_l1_loss(pred, t["target"], extractor, config.perceptual_weights)
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss={loss.item()}")
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            step_psnr = psnr(pred.detach().numpy(), t["target"].numpy())
        trace.append((step, float(loss.item()), step_psnr))
    models.eval()
    return models, trace


def evaluate_psnr(models: ModelBundle, samples, space: str) -> float:
    """Mean reconstruction PSNR of a trained model over samples."""
    scores = []
    with torch.no_grad():
        for s in samples:
            t = sample_tensors(s)
            pred = render_sample(models, t, space)
            scores.append(psnr(pred.numpy(), t["target"].numpy()))
    return float(np.mean(scores))


def write_trace_csv(path: str, trace) -> None:
    with open(path, "w") as f:
        f.write("step,loss,psnr\n")
        for step, loss, p in trace:
            f.write(f"{step},{loss:.8f},{p:.4f}\n")
