"""Blending weights and multi-frame fusion.

Weights come either from closed-form heuristics over masks and flow errors
or from the learned weight net; fusion happens in image space (blend warped
colors), feature space (blend features, decode once), or hybrid space
(blend features for guidance, decode per neighbor, merge by learned
confidence).

The ``*_torch`` helpers carry gradients and are reused by the trainer; the
numpy-facing functions wrap them under ``no_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .flow import VALID_EPS, WarpBundle
from .networks import ModelBundle, _to_nchw

WEIGHT_MODES = ("mean", "gaussian", "argmax", "flow_error")


@dataclass
class FusedResult:
    """One rendered target frame plus bookkeeping.

    hole_mask is 1 where no neighbor had any validity; per_neighbor holds the
    hybrid generator's (N, H, W, 3) frames and (N, H, W) confidences when
    available.
    """

    frame: np.ndarray
    hole_mask: np.ndarray
    per_neighbor_frames: np.ndarray | None = None
    per_neighbor_confidence: np.ndarray | None = None


def hole_mask(bundle: WarpBundle) -> np.ndarray:
    """1 where every neighbor's warped mask is (numerically) zero."""
    return (np.max(bundle.masks, axis=0) < VALID_EPS).astype(np.float32)


def _normalize(weights: np.ndarray) -> np.ndarray:
    """Per-pixel normalization; all-zero pixels fall back to uniform 1/N."""
    n = weights.shape[0]
    total = weights.sum(axis=0)
    zero = total <= 0.0
    safe = np.where(zero, 1.0, total)
    out = weights / safe
    out[:, zero] = 1.0 / n
    return out.astype(np.float32)


def heuristic_weights(mode: str, bundle: WarpBundle, sigma_t: float = 2.0) -> np.ndarray:
    """Closed-form (N, H, W) blending weights, nonnegative, summing to 1.

    mean:       M_n
    gaussian:   M_n * exp(-(n-k)^2 / (2 sigma_t^2))
    flow_error: M_n * exp(-e_n)
    argmax:     indicator of the valid neighbor with smallest e_n
                (ties: smallest |n-k|, then smaller n)
    """
    masks = bundle.masks
    n, h, w = masks.shape
    offsets = np.array(bundle.neighbors, dtype=np.float64) - bundle.target
    if mode == "mean":
        raw = masks.astype(np.float64)
    elif mode == "gaussian":
        temporal = np.exp(-(offsets**2) / (2.0 * sigma_t**2))
        raw = masks.astype(np.float64) * temporal[:, None, None]
    elif mode == "flow_error":
        raw = masks.astype(np.float64) * np.exp(-bundle.errors.astype(np.float64))
    elif mode == "argmax":
        valid = masks > VALID_EPS
        err = np.where(valid, bundle.errors.astype(np.float64), np.inf)
        # Stable argmin over neighbors pre-sorted by the tie-break preference.
        order = sorted(range(n), key=lambda i: (abs(offsets[i]), offsets[i]))
        pick = np.argmin(err[order], axis=0)
        winner = np.asarray(order, dtype=np.int64)[pick]
        raw = np.zeros((n, h, w), dtype=np.float64)
        np.put_along_axis(raw, winner[None], 1.0, axis=0)
        any_valid = valid.any(axis=0)
        raw *= any_valid[None]
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    return _normalize(raw)


def weighted_blend(items: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination: out = sum_n items[n] * weights[n]."""
    items = np.asarray(items)
    if items.shape[:3] != weights.shape:
        raise ValueError(
            f"weighted_blend: items {items.shape} do not match weights {weights.shape}"
        )
    w = weights if items.ndim == 3 else weights[..., None]
    return (items * w).sum(axis=0)


# ---------------------------------------------------------------------------
# Learned fusion (torch core + numpy wrappers)
# ---------------------------------------------------------------------------


def learned_weights_torch(
    feats: torch.Tensor,   # (N, D, H, W) warped features
    masks: torch.Tensor,   # (N, 1, H, W)
    errors: torch.Tensor,  # (N, 1, H, W)
    key_pos: int,
    models: ModelBundle,
) -> torch.Tensor:
    """Softmax-normalized (N, 1, H, W) weights from the shared weight net."""
    n = feats.shape[0]
    feat_key = feats[key_pos : key_pos + 1].expand(n, -1, -1, -1)
    mask_key = masks[key_pos : key_pos + 1].expand(n, -1, -1, -1)
    x = torch.cat([feats, masks, feat_key, mask_key, errors], dim=1)
    logits = models.weight_net(x)
    return torch.softmax(logits, dim=0)


def fuse_feature_torch(feats: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of warped features -> (1, D, H, W) fused feature."""
    return (feats * weights).sum(dim=0, keepdim=True)


def hybrid_decode_torch(
    feats: torch.Tensor,
    masks: torch.Tensor,
    fused: torch.Tensor,
    models: ModelBundle,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-neighbor decode + confidence merge.

    Returns (output RGB (3, H, W), per-neighbor frames (N, 3, H, W),
    confidences (N, 1, H, W) softmaxed across neighbors).
    """
    n = feats.shape[0]
    x = torch.cat([feats, masks, fused.expand(n, -1, -1, -1)], dim=1)
    rgb, conf_logits = models.generator(x)
    conf = torch.softmax(conf_logits, dim=0)
    out = (rgb * conf).sum(dim=0)
    return out, rgb, conf


def feature_decode_torch(
    fused: torch.Tensor, union_mask: torch.Tensor, models: ModelBundle
) -> torch.Tensor:
    """Single decode of the fused feature (+ union mask) to an RGB frame.

    The generator's per-neighbor feature slot is fed the fused feature again
    so one architecture serves both feature- and hybrid-space fusion.
    """
    x = torch.cat([fused, union_mask, fused], dim=1)
    rgb, _ = models.generator(x)
    return rgb[0]


def _bundle_tensors(bundle: WarpBundle, features: np.ndarray):
    if features.shape[0] != len(bundle.neighbors):
        raise ValueError(
            f"feature stack has {features.shape[0]} entries for "
            f"{len(bundle.neighbors)} neighbors"
        )
    feats = _to_nchw(features)
    masks = _to_nchw(bundle.masks)
    errors = _to_nchw(bundle.errors)
    return feats, masks, errors


def learned_weights(bundle: WarpBundle, features: np.ndarray, models: ModelBundle) -> np.ndarray:
    """(N, H, W) learned blending weights for warped (N, H, W, D) features."""
    with torch.no_grad():
        feats, masks, errors = _bundle_tensors(bundle, features)
        w = learned_weights_torch(feats, masks, errors, bundle.key_pos, models)
    return w[:, 0].numpy()


def fuse_image_space(
    bundle: WarpBundle, warped_frames: np.ndarray, weights: np.ndarray
) -> FusedResult:
    """Blend warped color frames directly (late fusion)."""
    if warped_frames.shape[:3] != weights.shape:
        raise ValueError(
            f"fuse_image_space: frames {warped_frames.shape} do not match "
            f"weights {weights.shape}"
        )
    frame = np.clip(weighted_blend(warped_frames, weights), 0.0, 1.0)
    return FusedResult(frame=frame.astype(np.float32), hole_mask=hole_mask(bundle))


def fuse_feature_space(
    bundle: WarpBundle, features: np.ndarray, models: ModelBundle
) -> FusedResult:
    """Fuse warped features with learned weights; decode once (early fusion)."""
    with torch.no_grad():
        feats, masks, errors = _bundle_tensors(bundle, features)
        w = learned_weights_torch(feats, masks, errors, bundle.key_pos, models)
        fused = fuse_feature_torch(feats, w)
        union = masks.amax(dim=0, keepdim=True)
        rgb = feature_decode_torch(fused, union, models)
    return FusedResult(
        frame=rgb.permute(1, 2, 0).numpy(), hole_mask=hole_mask(bundle)
    )


def fuse_hybrid(
    bundle: WarpBundle, features: np.ndarray, models: ModelBundle
) -> FusedResult:
    """Hybrid fusion: fused feature guides per-neighbor decoding, confidence merge."""
    with torch.no_grad():
        feats, masks, errors = _bundle_tensors(bundle, features)
        w = learned_weights_torch(feats, masks, errors, bundle.key_pos, models)
        fused = fuse_feature_torch(feats, w)
        out, rgb, conf = hybrid_decode_torch(feats, masks, fused, models)
    return FusedResult(
        frame=out.permute(1, 2, 0).numpy(),
        hole_mask=hole_mask(bundle),
        per_neighbor_frames=rgb.permute(0, 2, 3, 1).numpy(),
        per_neighbor_confidence=conf[:, 0].numpy(),
    )
