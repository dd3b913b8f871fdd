"""Learned operators: feature encoder, fusion-weight net, image generator.

All three are small full-resolution CNNs. The weight net and generator are
applied with shared parameters across neighbors, so the neighborhood size is
flexible at inference. A custom checkpoint container ("FSTB") round-trips
parameters bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"FSTB"
CHECKPOINT_VERSION = 1

DEFAULT_FEATURE_DIM = 32


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class Encoder(nn.Module):
    """Frame -> full-resolution feature map (3 -> hidden -> D -> D)."""

    def __init__(self, feature_dim: int = DEFAULT_FEATURE_DIM, hidden: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, feature_dim, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(feature_dim, feature_dim, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise ValueError(f"encoder expects 3 input channels, got {x.shape[1]}")
        return self.net(x)


class WeightNet(nn.Module):
    """Per-neighbor blending logit from [f_n | M_n | f_key | M_key | e_n]."""

    def __init__(self, feature_dim: int = DEFAULT_FEATURE_DIM, hidden: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.in_channels = 2 * feature_dim + 3
        self.net = nn.Sequential(
            nn.Conv2d(self.in_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"weight net expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        return self.net(x)


class Generator(nn.Module):
    """Two-scale encoder-decoder: [f_n | M_n | f_fused] -> RGB + confidence logit.

    RGB channels pass through a sigmoid; the confidence logit is unbounded.
    """

    def __init__(self, feature_dim: int = DEFAULT_FEATURE_DIM, base: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.in_channels = 2 * feature_dim + 1
        self.head = nn.Sequential(
            nn.Conv2d(self.in_channels, base, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(base, 2 * base, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * base, 2 * base, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.up = nn.Sequential(
            nn.Conv2d(3 * base, base, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(base, 4, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"generator expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        skip = self.head(x)
        deep = self.down(skip)
        deep = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        y = self.out(self.up(torch.cat([skip, deep], dim=1)))
        rgb = torch.sigmoid(y[:, :3])
        conf = y[:, 3:4]
        return rgb, conf


@dataclass
class ModelBundle:
    """The three learned operators plus the hyperparameters that shape them."""

    encoder: Encoder
    weight_net: WeightNet
    generator: Generator
    feature_dim: int
    enc_hidden: int
    wn_hidden: int
    gen_base: int

    def descriptor(self) -> str:
        return json.dumps(
            {
                "feature_dim": self.feature_dim,
                "enc_hidden": self.enc_hidden,
                "wn_hidden": self.wn_hidden,
                "gen_base": self.gen_base,
            },
            sort_keys=True,
        )

    def parameters(self):
        for m in (self.encoder, self.weight_net, self.generator):
            yield from m.parameters()

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "weight_net": self.weight_net,
            "generator": self.generator,
        }

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self


def build_models(
    feature_dim: int = DEFAULT_FEATURE_DIM,
    enc_hidden: int = 16,
    wn_hidden: int = 64,
    gen_base: int = 64,
    seed: int | None = None,
) -> ModelBundle:
    """Construct the three networks with fan-in-scaled uniform init (seedable)."""
    if seed is not None:
        torch.manual_seed(seed)
    return ModelBundle(
        encoder=Encoder(feature_dim, enc_hidden),
        weight_net=WeightNet(feature_dim, wn_hidden),
        generator=Generator(feature_dim, gen_base),
        feature_dim=feature_dim,
        enc_hidden=enc_hidden,
        wn_hidden=wn_hidden,
        gen_base=gen_base,
    )


# ---------------------------------------------------------------------------
# Torch-side raster helpers (shared by inference and training)
# ---------------------------------------------------------------------------


def warp_backward_torch(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp NCHW tensors by (N, 2, H, W) flows, clamped at the edges.

    Matches flow.backward_warp: out(p) = src(p + flow(p)).
    """
    n, _, h, w = src.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=src.dtype, device=src.device),
        torch.arange(w, dtype=src.dtype, device=src.device),
        indexing="ij",
    )
    px = xs + flow[:, 0]
    py = ys + flow[:, 1]
    gx = 2.0 * px / max(w - 1, 1) - 1.0
    gy = 2.0 * py / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(
        src, grid, mode="bilinear", padding_mode="border", align_corners=True
    )


def _to_nchw(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    if t.ndim == 3:  # (N, H, W) -> (N, 1, H, W)
        t = t.unsqueeze(1)
    elif t.ndim == 4:  # (N, H, W, C) -> (N, C, H, W)
        t = t.permute(0, 3, 1, 2)
    else:
        raise ValueError(f"expected 3- or 4-d array, got {arr.shape}")
    return t


# ---------------------------------------------------------------------------
# numpy-facing operation wrappers
# ---------------------------------------------------------------------------


def encode(frame: np.ndarray, models: ModelBundle) -> np.ndarray:
    """Encode an (H, W, 3) frame into (H, W, D) features."""
    with torch.no_grad():
        x = _to_nchw(frame[None])
        feat = models.encoder(x)[0]
    return feat.permute(1, 2, 0).numpy()


def weight_logits(
    feat_n: np.ndarray,
    mask_n: np.ndarray,
    feat_key: np.ndarray,
    mask_key: np.ndarray,
    err_n: np.ndarray,
    models: ModelBundle,
) -> np.ndarray:
    """One neighbor's (H, W) blending logit map from the shared weight net."""
    d = models.feature_dim
    if feat_n.shape[-1] != d or feat_key.shape[-1] != d:
        raise ValueError(
            f"weight_logits: feature depth {feat_n.shape[-1]} does not match D={d}"
        )
    with torch.no_grad():
        x = torch.cat(
            [
                _to_nchw(feat_n[None]),
                _to_nchw(mask_n[None]),
                _to_nchw(feat_key[None]),
                _to_nchw(mask_key[None]),
                _to_nchw(err_n[None]),
            ],
            dim=1,
        )
        logits = models.weight_net(x)[0, 0]
    return logits.numpy()


def generate(
    feat_n: np.ndarray,
    mask_n: np.ndarray,
    fused_feat: np.ndarray,
    models: ModelBundle,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode one neighbor into an RGB frame and a confidence logit map."""
    d = models.feature_dim
    if feat_n.shape[-1] != d or fused_feat.shape[-1] != d:
        raise ValueError(
            f"generate: feature depth {feat_n.shape[-1]}/{fused_feat.shape[-1]} "
            f"does not match D={d}"
        )
    with torch.no_grad():
        x = torch.cat(
            [_to_nchw(feat_n[None]), _to_nchw(mask_n[None]), _to_nchw(fused_feat[None])],
            dim=1,
        )
        rgb, conf = models.generator(x)
    return rgb[0].permute(1, 2, 0).numpy(), conf[0, 0].numpy()


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _flat_state(models: ModelBundle) -> dict[str, torch.Tensor]:
    state = {}
    for prefix, module in models.modules().items():
        for name, tensor in module.state_dict().items():
            state[f"{prefix}.{name}"] = tensor
    return state


def save_checkpoint(path: str, models: ModelBundle, step: int = 0) -> None:
    """Serialize the three networks; parameters round-trip bit-exactly."""
    state = _flat_state(models)
    desc = models.descriptor().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIQ", CHECKPOINT_VERSION, models.feature_dim, step))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            tensor = state[name].detach().to(torch.float32).contiguous()
            raw = tensor.numpy().astype("<f4").tobytes()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{max(tensor.ndim, 1)}q", *(tensor.shape or (0,))))
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_checkpoint(path: str) -> tuple[ModelBundle, int]:
    """Load a checkpoint, validating magic, version, and tensor shapes."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = data[off : off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, feature_dim, step = struct.unpack("<IIQ", take(16))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (desc_len,) = struct.unpack("<I", take(4))
    try:
        desc = json.loads(take(desc_len).decode("utf-8"))
        models = build_models(
            feature_dim=desc["feature_dim"],
            enc_hidden=desc["enc_hidden"],
            wn_hidden=desc["wn_hidden"],
            gen_base=desc["gen_base"],
        )
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid architecture descriptor ({exc})") from exc
    if desc["feature_dim"] != feature_dim:
        raise CheckpointError(
            f"{path}: header D={feature_dim} disagrees with descriptor "
            f"D={desc['feature_dim']}"
        )

    expected = _flat_state(models)
    (n_tensors,) = struct.unpack("<I", take(4))
    loaded = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{max(ndim, 1)}q", take(8 * max(ndim, 1)))
        if ndim == 0:
            shape = ()
        (nbytes,) = struct.unpack("<Q", take(8))
        raw = take(nbytes)
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, architecture "
                f"descriptor requires {tuple(expected[name].shape)}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        loaded[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    for prefix, module in models.modules().items():
        module.load_state_dict(
            {
                name[len(prefix) + 1 :]: tensor
                for name, tensor in loaded.items()
                if name.startswith(prefix + ".")
            }
        )
    models.eval()
    return models, step
