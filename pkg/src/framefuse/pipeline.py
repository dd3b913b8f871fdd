"""End-to-end stabilization pipeline.

Per target frame: build the warp bundle, apply the globally optimized path
adjustment, drop blurry neighbors, fuse (heuristic or learned), optionally
transfer high-frequency detail from the warped key frame, and write the
result. Every emitted frame is fully defined; hole pixels are filled by the
fusion fallback and counted in the run log.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, gaussian_filter

from . import flow as flow_mod
from . import fusion, media, networks, path_opt
from .flow import (
    FallbackFlowProvider,
    DiskFlowProvider,
    WarpBundle,
    backward_warp,
    build_warp_bundle,
    estimate_flow_fallback,
    _luminance,
)

SMOOTHER_SIGMA = 5.0  # frames
DETAIL_SIGMA = 1.5    # px, high-frequency band split
FEATHER_SIGMA = 5.0   # px, key-mask feathering
MIN_NEIGHBORS_AFTER_FILTER = 3

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32)


@dataclass
class PipelineRun:
    """Per-run bookkeeping: output location, timings, hole-area trace."""

    output_dir: str
    config: media.ProjectConfig
    hole_fractions: list[float] = field(default_factory=list)
    frame_seconds: list[float] = field(default_factory=list)
    path: list[tuple[int, int]] = field(default_factory=list)
    path_energies: list[float] = field(default_factory=list)


def simple_smoother(frames, provider) -> list[np.ndarray]:
    """Plumbing motion smoother: global-translation trajectory, Gaussian-smoothed.

    Per-frame translations come from flow medians accumulated into a raw
    trajectory. The warp field for frame k is the constant (raw_k - smoothed_k):
    since the accumulated flow runs opposite to the camera motion, this equals
    smoothed camera position minus actual position, mapping target pixels back
    into the source frame.
    """
    n = len(frames)
    if n < 2:
        raise ValueError("simple_smoother needs at least 2 frames")
    raw = np.zeros((n, 2), dtype=np.float64)
    for k in range(n - 1):
        f = provider.flow(k, k + 1)
        step = np.array([np.median(f[..., 0]), np.median(f[..., 1])])
        raw[k + 1] = raw[k] + step
    smoothed = np.stack(
        [
            gaussian_filter(raw[:, 0], sigma=SMOOTHER_SIGMA, mode="reflect"),
            gaussian_filter(raw[:, 1], sigma=SMOOTHER_SIGMA, mode="reflect"),
        ],
        axis=1,
    )
    h, w = frames[0].shape[:2]
    fields = []
    for k in range(n):
        warp = np.empty((h, w, 2), dtype=np.float32)
        warp[..., 0] = raw[k, 0] - smoothed[k, 0]
        warp[..., 1] = raw[k, 1] - smoothed[k, 1]
        fields.append(warp)
    return fields


def sharpness(frame: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response on luminance."""
    lum = _luminance(frame)
    resp = convolve(lum, _LAPLACIAN, mode="nearest")
    return float(resp.var())


def sharpness_filter(bundle: WarpBundle, frames, tau: float) -> WarpBundle:
    """Drop neighbors much blurrier than the key frame.

    Neighbor n != key is dropped when sharpness(I_n) < tau * sharpness(I_key);
    the key is never dropped and at least MIN_NEIGHBORS_AFTER_FILTER neighbors
    (closest first) are retained.
    """
    if tau <= 0:
        return bundle
    key = bundle.target
    sharp = {n: sharpness(frames[n]) for n in bundle.neighbors}
    keep = [n for n in bundle.neighbors if n == key or sharp[n] >= tau * sharp[key]]
    if len(keep) < MIN_NEIGHBORS_AFTER_FILTER:
        by_distance = sorted(bundle.neighbors, key=lambda n: (abs(n - key), n))
        for n in by_distance:
            if n not in keep:
                keep.append(n)
            if len(keep) >= min(MIN_NEIGHBORS_AFTER_FILTER, len(bundle.neighbors)):
                break
        keep.sort()
    if len(keep) == len(bundle.neighbors):
        return bundle
    return bundle.select(keep)


def residual_detail_transfer(
    rendered: np.ndarray,
    warped_key: np.ndarray,
    key_mask: np.ndarray,
    sigma_b: float = DETAIL_SIGMA,
) -> np.ndarray:
    """Swap the rendered frame's high-frequency band for the warped key's.

    Applied inside the (feathered) key-valid region only; output clipped to
    [0, 1].
    """

    def highpass(img):
        return img - gaussian_filter(img, sigma=(sigma_b, sigma_b, 0), mode="nearest")

    feathered = gaussian_filter(key_mask, sigma=FEATHER_SIGMA, mode="nearest")
    feathered = np.clip(feathered * key_mask, 0.0, 1.0)
    residual = highpass(warped_key) - highpass(rendered)
    out = rendered + feathered[..., None] * residual
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _read_warp_fields(warp_dir: str, n: int, shape) -> list[np.ndarray]:
    fields = []
    for k in range(n):
        path = os.path.join(warp_dir, f"{k:06d}.flo")
        if not os.path.exists(path):
            raise media.FormatError(f"missing warp field {path}")
        warp = media.read_flo(path)
        if warp.shape[:2] != shape:
            raise ValueError(
                f"{path}: warp field {warp.shape[:2]} does not match frames {shape}"
            )
        fields.append(warp)
    return fields


def _fuse_bundle(bundle, frames, config, models):
    warped = flow_mod.warp_neighbor_frames(bundle, frames)
    if config.fusion_function == "learned":
        if models is None:
            raise media.ConfigError(
                "fusion_function 'learned' requires a checkpoint"
            )
        feats = np.stack(
            [
                backward_warp(networks.encode(frames[n], models), bundle.warps[i])
                for i, n in enumerate(bundle.neighbors)
            ]
        )
        if config.fusion_space == "hybrid":
            return fusion.fuse_hybrid(bundle, feats, models), warped
        if config.fusion_space == "feature":
            return fusion.fuse_feature_space(bundle, feats, models), warped
        weights = fusion.learned_weights(bundle, feats, models)
        return fusion.fuse_image_space(bundle, warped, weights), warped
    weights = fusion.heuristic_weights(config.fusion_function, bundle, sigma_t=2.0)
    return fusion.fuse_image_space(bundle, warped, weights), warped


def stabilize(
    config: media.ProjectConfig,
    auto_smooth: bool = False,
    path_adjust: bool = True,
    seed: int = 0,
) -> PipelineRun:
    """Run the full pipeline described by ``config`` and write output frames."""
    config.validate()
    frames = media.read_frame_sequence(config.frame_dir)
    n = len(frames)
    h, w = frames[0].shape[:2]
    if config.flow_dir:
        provider = DiskFlowProvider(frames, config.flow_dir)
    else:
        provider = FallbackFlowProvider(frames)

    if auto_smooth:
        warp_fields = simple_smoother(frames, provider)
    else:
        warp_fields = _read_warp_fields(config.warp_dir, n, (h, w))

    models = None
    if config.fusion_function == "learned":
        if not config.checkpoint:
            raise media.ConfigError("learned fusion requires a checkpoint path")
        models, _ = networks.load_checkpoint(config.checkpoint)

    bundles = [
        build_warp_bundle(k, frames, warp_fields[k], provider, config.neighborhood_radius)
        for k in range(n)
    ]

    run = PipelineRun(output_dir=config.output_dir, config=config)
    if path_adjust and n > 0:
        radius = path_opt.default_search_radius(h, w)
        cache: dict[tuple[int, tuple[int, int]], float] = {}

        def cov(k, label):
            key = (k, tuple(label))
            if key not in cache:
                cache[key] = path_opt.coverage_fraction(bundles[k], label)
            return cache[key]

        path, energies = path_opt.optimize_path(
            cov, config.lambda_s, math.hypot(h, w), radius=radius, n_frames=n
        )
        bundles = [path_opt.apply_path(b, x) for b, x in zip(bundles, path)]
        run.path = [tuple(x) for x in path]
        run.path_energies = energies
    else:
        run.path = [(0, 0)] * n

    os.makedirs(config.output_dir, exist_ok=True)
    for k in range(n):
        t0 = time.perf_counter()
        bundle = sharpness_filter(bundles[k], frames, config.sharpness_threshold)
        result, warped = _fuse_bundle(bundle, frames, config, models)
        out = result.frame
        if config.detail_transfer:
            key_pos = bundle.key_pos
            out = residual_detail_transfer(
                out, warped[key_pos], bundle.masks[key_pos]
            )
        if not np.isfinite(out).all():
            raise RuntimeError(f"frame {k}: non-finite pixels in rendered output")
        media.write_frame(os.path.join(config.output_dir, f"{k:06d}.png"), out)
        run.hole_fractions.append(float(result.hole_mask.mean()))
        run.frame_seconds.append(time.perf_counter() - t0)
    return run


def pairwise_flow_estimator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Default metric-side flow estimator (the built-in fallback)."""
    return estimate_flow_fallback(a, b)
