"""Dense correspondence machinery.

Flow providers (a pluggable estimator with a built-in pyramid fallback),
flow chaining, backward warping, forward-backward consistency, visibility
masks, and the per-target-frame warp bundle.

A flow F_{a->b} is defined over frame a and samples frame b:
a(p) == b(p + F(p)) wherever the correspondence is valid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import median_filter, uniform_filter, zoom

from . import media

# Forward-backward occlusion criterion constants (residual^2 vs flow magnitudes).
OCC_ALPHA = 0.01
OCC_BETA = 0.5

# Fractional masks below this are treated as "no valid neighbor" throughout.
VALID_EPS = 1e-3


def _luminance(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        return frame
    return 0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2]


def bilinear_sample(raster: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample raster at float coordinates with clamped-edge extension.

    raster: (H, W) or (H, W, C); xs/ys: arrays of sample coordinates.
    """
    h, w = raster.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(raster.dtype if raster.dtype.kind == "f" else np.float32)
    fy = (ys - y0).astype(fx.dtype)
    if raster.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = raster[y0, x0]
    v01 = raster[y0, x1]
    v10 = raster[y1, x0]
    v11 = raster[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float32), ys.astype(np.float32)


def backward_warp(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out(p) = bilinear_sample(src, p + flow(p)), clamped at the edges."""
    if src.ndim == 3 and src.shape[2] == 0:
        raise ValueError("backward_warp: source has zero channels")
    h, w = flow.shape[:2]
    if src.shape[:2] != (h, w):
        raise ValueError(
            f"backward_warp: source {src.shape[:2]} does not match flow {(h, w)}"
        )
    xs, ys = _grid(h, w)
    return bilinear_sample(src, xs + flow[..., 0], ys + flow[..., 1])


def in_bounds_mask(flow: np.ndarray) -> np.ndarray:
    """1 where p + flow(p) lands inside the raster, else 0."""
    h, w = flow.shape[:2]
    xs, ys = _grid(h, w)
    tx = xs + flow[..., 0]
    ty = ys + flow[..., 1]
    ok = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    return ok.astype(np.float32)


def chain_flow(f_ab: np.ndarray, f_bc: np.ndarray) -> np.ndarray:
    """Compose two flows: result(p) = f_ab(p) + f_bc(p + f_ab(p))."""
    if f_ab.shape != f_bc.shape:
        raise ValueError(f"chain_flow: shape mismatch {f_ab.shape} vs {f_bc.shape}")
    h, w = f_ab.shape[:2]
    xs, ys = _grid(h, w)
    sampled = bilinear_sample(f_bc, xs + f_ab[..., 0], ys + f_ab[..., 1])
    return f_ab + sampled


def consistency_error(f_fw: np.ndarray, f_bw: np.ndarray) -> np.ndarray:
    """Forward-backward residual magnitude ||f_fw(p) + f_bw(p + f_fw(p))||_2."""
    if f_fw.shape != f_bw.shape:
        raise ValueError(
            f"consistency_error: shape mismatch {f_fw.shape} vs {f_bw.shape}"
        )
    h, w = f_fw.shape[:2]
    xs, ys = _grid(h, w)
    bw = bilinear_sample(f_bw, xs + f_fw[..., 0], ys + f_fw[..., 1])
    residual = f_fw + bw
    return np.sqrt(residual[..., 0] ** 2 + residual[..., 1] ** 2)


def visibility_mask(f_fw: np.ndarray, f_bw: np.ndarray) -> np.ndarray:
    """Occlusion mask: 1 = visible, 0 = occluded or out of bounds.

    A pixel is occluded when the squared forward-backward residual exceeds
    OCC_ALPHA * (|f_fw|^2 + |f_bw o f_fw|^2) + OCC_BETA (strict inequality),
    or when its forward sample location leaves the raster.
    """
    if f_fw.shape != f_bw.shape:
        raise ValueError(
            f"visibility_mask: shape mismatch {f_fw.shape} vs {f_bw.shape}"
        )
    h, w = f_fw.shape[:2]
    xs, ys = _grid(h, w)
    bw = bilinear_sample(f_bw, xs + f_fw[..., 0], ys + f_fw[..., 1])
    residual_sq = np.sum((f_fw + bw) ** 2, axis=-1)
    mags = np.sum(f_fw**2, axis=-1) + np.sum(bw**2, axis=-1)
    occluded = residual_sq > OCC_ALPHA * mags + OCC_BETA
    visible = (~occluded).astype(np.float32)
    return visible * in_bounds_mask(f_fw)


# ---------------------------------------------------------------------------
# Fallback flow estimator: coarse-to-fine patch matching + local refinement.
# ---------------------------------------------------------------------------


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    sm = uniform_filter(img, size=2, mode="nearest")
    return sm[::2, ::2][:h2, :w2]


def _block_match(a: np.ndarray, b: np.ndarray, prior: np.ndarray, radius: int, patch: int) -> np.ndarray:
    """Per-pixel integer shift refinement of ``prior`` by windowed SSD.

    Candidates are ordered by shift magnitude with a strict comparison, so
    textureless ties keep the prior flow.
    """
    h, w = a.shape
    warped_base = backward_warp(b, prior)
    shifts = [
        (dx, dy)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
    ]
    shifts.sort(key=lambda s: (s[0] * s[0] + s[1] * s[1], s[1], s[0]))
    best_cost = None
    best_dx = np.zeros((h, w), dtype=np.float32)
    best_dy = np.zeros((h, w), dtype=np.float32)
    xs, ys = _grid(h, w)
    for dx, dy in shifts:
        if dx == 0 and dy == 0:
            warped = warped_base
        else:
            warped = bilinear_sample(
                b, xs + prior[..., 0] + dx, ys + prior[..., 1] + dy
            )
        cost = uniform_filter((warped - a) ** 2, size=patch, mode="nearest")
        if best_cost is None:
            best_cost = cost.copy()
        else:
            better = cost < best_cost
            best_cost[better] = cost[better]
            best_dx[better] = dx
            best_dy[better] = dy
    out = prior.copy()
    out[..., 0] += best_dx
    out[..., 1] += best_dy
    return out


def _smooth_flow(flow: np.ndarray, size: int) -> np.ndarray:
    """Component-wise box smoothing; regularizes the per-pixel matches."""
    out = flow.copy()
    out[..., 0] = uniform_filter(flow[..., 0], size=size, mode="nearest")
    out[..., 1] = uniform_filter(flow[..., 1], size=size, mode="nearest")
    return out


def _global_shift(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Dominant integer translation via FFT cross-correlation, flow convention."""
    fa = np.fft.fft2(a - a.mean())
    fb = np.fft.fft2(b - b.mean())
    corr = np.fft.ifft2(np.conj(fa) * fb).real
    dy, dx = np.unravel_index(np.argmax(corr), corr.shape)
    h, w = a.shape
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    return float(dx), float(dy)


def _median_flow(flow: np.ndarray, size: int) -> np.ndarray:
    """Component-wise median filtering; rejects isolated bad matches."""
    out = flow.copy()
    out[..., 0] = median_filter(flow[..., 0], size=size, mode="nearest")
    out[..., 1] = median_filter(flow[..., 1], size=size, mode="nearest")
    return out


def _window_ssd(a: np.ndarray, b: np.ndarray, flow: np.ndarray, win: int) -> np.ndarray:
    """Windowed mean squared residual over in-bounds samples only.

    Out-of-bounds samples would compare against clamped (fabricated) values,
    so they are excluded; windows with no observable sample score 0, which
    lets the dominant-translation snap extrapolate into unobservable zones.
    """
    inb = in_bounds_mask(flow)
    warped = backward_warp(b, flow)
    num = uniform_filter((warped - a) ** 2 * inb, size=win, mode="nearest")
    den = uniform_filter(inb, size=win, mode="nearest")
    return np.where(den > 0, num / np.maximum(den, 1e-12), 0.0)


def _lk_refine(a: np.ndarray, b: np.ndarray, flow: np.ndarray, iters: int, win: int) -> np.ndarray:
    """Dense Lucas-Kanade refinement of ``flow`` (a(p) ~ b(p + flow)).

    Each iteration is safeguarded per pixel: a Gauss-Newton step is kept
    only where it lowers the windowed SSD, so refinement never regresses
    below the matching stage.
    """
    h, w = a.shape
    xs, ys = _grid(h, w)
    gy, gx = np.gradient(b)
    # Tikhonov floor relative to image contrast so flat regions stay put.
    eps = 1e-6 * max(float(b.max() - b.min()), 1e-6) ** 2
    for _ in range(iters):
        px = xs + flow[..., 0]
        py = ys + flow[..., 1]
        bw = bilinear_sample(b, px, py)
        bx = bilinear_sample(gx, px, py)
        by = bilinear_sample(gy, px, py)
        err = bw - a
        a11 = uniform_filter(bx * bx, size=win, mode="nearest") + eps
        a12 = uniform_filter(bx * by, size=win, mode="nearest")
        a22 = uniform_filter(by * by, size=win, mode="nearest") + eps
        b1 = -uniform_filter(bx * err, size=win, mode="nearest")
        b2 = -uniform_filter(by * err, size=win, mode="nearest")
        det = a11 * a22 - a12 * a12
        safe = det > eps * eps
        inv = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        du = np.clip((a22 * b1 - a12 * b2) * inv, -1.0, 1.0)
        dv = np.clip((a11 * b2 - a12 * b1) * inv, -1.0, 1.0)
        candidate = flow + np.stack([du, dv], axis=-1).astype(np.float32)
        improved = _window_ssd(a, b, candidate, win) < _window_ssd(a, b, flow, win)
        flow = np.where(improved[..., None], candidate, flow)
        if not improved.any():
            break
    return flow


def estimate_flow_fallback(
    a: np.ndarray,
    b: np.ndarray,
    levels: int = 3,
    search_radius: int = 4,
    patch: int = 7,
    refine_iters: int = 4,
) -> np.ndarray:
    """Built-in flow estimator: 3-level pyramid, patch matching + LK refinement.

    Plumbing so the pipeline runs without an external flow model; not a
    competitive estimator.
    """
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(
            f"estimate_flow_fallback: shape mismatch {a.shape[:2]} vs {b.shape[:2]}"
        )
    ga, gb = _luminance(a), _luminance(b)
    if np.array_equal(ga, gb):
        return np.zeros(a.shape[:2] + (2,), dtype=np.float32)
    pyr_a, pyr_b = [ga], [gb]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 16:
            break
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))
    scale = 2.0 ** (len(pyr_a) - 1)
    dx, dy = _global_shift(ga, gb)
    flow = np.empty(pyr_a[-1].shape + (2,), dtype=np.float32)
    flow[..., 0] = dx / scale
    flow[..., 1] = dy / scale
    for lvl in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[lvl], pyr_b[lvl]
        if flow.shape[:2] != la.shape:
            factors = (la.shape[0] / flow.shape[0], la.shape[1] / flow.shape[1], 1)
            flow = zoom(flow * 2.0, factors, order=1, mode="nearest").astype(np.float32)
        radius = search_radius if lvl == len(pyr_a) - 1 else 1
        flow = _block_match(la, lb, flow, radius, patch)
        flow = _smooth_flow(flow, size=5)
        flow = _lk_refine(la, lb, flow, refine_iters, patch + 2)
        flow = _median_flow(flow, size=5)
        flow = _lk_refine(la, lb, flow, refine_iters, patch + 2)
        flow = _median_flow(flow, size=3)
    # Fall back per pixel to the dominant translation wherever it explains
    # the pair at least as well; pins down weakly textured regions.
    const = np.empty_like(flow)
    const[..., 0] = dx
    const[..., 1] = dy
    win = patch + 2
    better = _window_ssd(ga, gb, const, win) <= _window_ssd(ga, gb, flow, win)
    flow = np.where(better[..., None], const, flow)
    return flow.astype(np.float32)


# ---------------------------------------------------------------------------
# Flow providers
# ---------------------------------------------------------------------------


class FlowProvider:
    """Pairwise flow oracle over a frame sequence: flow(i, j) = F_{i->j}."""

    def __init__(self, frames):
        self.frames = frames
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def flow(self, i: int, j: int) -> np.ndarray:
        key = (i, j)
        if key not in self._cache:
            self._cache[key] = self._compute(i, j)
        return self._cache[key]

    def _compute(self, i: int, j: int) -> np.ndarray:
        raise NotImplementedError


class FallbackFlowProvider(FlowProvider):
    """Pairwise flows from the built-in pyramid estimator."""

    def _compute(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.zeros(self.frames[i].shape[:2] + (2,), dtype=np.float32)
        return estimate_flow_fallback(self.frames[i], self.frames[j])


class DiskFlowProvider(FlowProvider):
    """Reads precomputed ``<from>_<to>.flo`` files, falling back per pair."""

    def __init__(self, frames, flow_dir: str, fallback: FlowProvider | None = None):
        super().__init__(frames)
        self.flow_dir = flow_dir
        self.fallback = fallback or FallbackFlowProvider(frames)

    def _compute(self, i: int, j: int) -> np.ndarray:
        path = os.path.join(self.flow_dir, f"{i:06d}_{j:06d}.flo")
        if os.path.exists(path):
            flow = media.read_flo(path)
            if flow.shape[:2] != self.frames[i].shape[:2]:
                raise ValueError(
                    f"{path}: flow shape {flow.shape[:2]} does not match frames"
                )
            return flow
        return self.fallback.flow(i, j)


class KnownFlowProvider(FlowProvider):
    """Provider over an explicit {(i, j): flow} table (synthetic data, tests)."""

    def __init__(self, frames, table):
        super().__init__(frames)
        self._cache.update(table)

    def _compute(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.zeros(self.frames[i].shape[:2] + (2,), dtype=np.float32)
        raise KeyError(f"no known flow for pair ({i}, {j})")


# ---------------------------------------------------------------------------
# Warp bundles
# ---------------------------------------------------------------------------


@dataclass
class WarpBundle:
    """Everything needed to render one stabilized target frame.

    All per-neighbor arrays are stacked along axis 0 in ``neighbors`` order.
    ``src_masks``/``src_errors`` hold the visibility masks and consistency
    errors in the key source frame's space, kept so masks can be recomputed
    exactly when the warps are shifted by path adjustment.
    """

    target: int
    neighbors: list[int]
    warps: np.ndarray       # (N, H, W, 2) target -> neighbor source
    masks: np.ndarray       # (N, H, W) warped visibility x in-bounds
    errors: np.ndarray      # (N, H, W) warped flow consistency error
    src_masks: np.ndarray   # (N, H, W) visibility in key-source space
    src_errors: np.ndarray  # (N, H, W) consistency error in key-source space

    @property
    def key_pos(self) -> int:
        return self.neighbors.index(self.target)

    @property
    def key_warp(self) -> np.ndarray:
        return self.warps[self.key_pos]

    @property
    def shape(self) -> tuple[int, int]:
        return self.warps.shape[1:3]

    def select(self, keep: list[int]) -> "WarpBundle":
        """Restrict the bundle to a subset of neighbor indices (key retained)."""
        if self.target not in keep:
            raise ValueError("cannot drop the key frame from a bundle")
        pos = [i for i, n in enumerate(self.neighbors) if n in keep]
        return replace(
            self,
            neighbors=[self.neighbors[i] for i in pos],
            warps=self.warps[pos],
            masks=self.masks[pos],
            errors=self.errors[pos],
            src_masks=self.src_masks[pos],
            src_errors=self.src_errors[pos],
        )


def neighborhood(k: int, n_frames: int, radius: int) -> list[int]:
    """Window of up to 2*radius+1 indices nearest k, shifted at sequence ends."""
    size = min(n_frames, 2 * radius + 1)
    start = min(max(k - radius, 0), n_frames - size)
    return list(range(start, start + size))


def recompute_bundle_masks(bundle: WarpBundle) -> WarpBundle:
    """Re-derive warped masks and errors from the current warps.

    Source-space visibility is pulled to the target through the key warp and
    multiplied by each chained warp's in-bounds indicator.
    """
    key_warp = bundle.warps[bundle.key_pos]
    n = len(bundle.neighbors)
    masks = np.empty_like(bundle.masks)
    errors = np.empty_like(bundle.errors)
    for i in range(n):
        inb = in_bounds_mask(bundle.warps[i])
        if bundle.neighbors[i] == bundle.target:
            masks[i] = inb
            errors[i] = 0.0
        else:
            masks[i] = backward_warp(bundle.src_masks[i], key_warp) * inb
            errors[i] = backward_warp(bundle.src_errors[i], key_warp)
    return replace(bundle, masks=masks, errors=errors)


def build_warp_bundle(
    k: int,
    frames,
    warp_field: np.ndarray,
    provider: FlowProvider,
    radius: int,
) -> WarpBundle:
    """Chain the key warp with pairwise flows for every neighbor of frame k."""
    n_frames = len(frames)
    if n_frames == 0:
        raise ValueError("build_warp_bundle: empty frame sequence")
    if not (0 <= k < n_frames):
        raise ValueError(f"build_warp_bundle: index {k} out of range [0, {n_frames})")
    h, w = frames[k].shape[:2]
    if warp_field.shape[:2] != (h, w):
        raise ValueError(
            f"build_warp_bundle: warp field {warp_field.shape[:2]} "
            f"does not match frames {(h, w)}"
        )
    neighbors = neighborhood(k, n_frames, radius)
    n = len(neighbors)
    warps = np.empty((n, h, w, 2), dtype=np.float32)
    src_masks = np.empty((n, h, w), dtype=np.float32)
    src_errors = np.empty((n, h, w), dtype=np.float32)
    for i, nb in enumerate(neighbors):
        if nb == k:
            warps[i] = warp_field
            src_masks[i] = 1.0
            src_errors[i] = 0.0
        else:
            f_kn = provider.flow(k, nb)
            f_nk = provider.flow(nb, k)
            warps[i] = chain_flow(warp_field, f_kn)
            src_masks[i] = visibility_mask(f_kn, f_nk)
            src_errors[i] = consistency_error(f_kn, f_nk)
    bundle = WarpBundle(
        target=k,
        neighbors=neighbors,
        warps=warps,
        masks=np.zeros((n, h, w), dtype=np.float32),
        errors=np.zeros((n, h, w), dtype=np.float32),
        src_masks=src_masks,
        src_errors=src_errors,
    )
    return recompute_bundle_masks(bundle)


def warp_neighbor_frames(bundle: WarpBundle, frames) -> np.ndarray:
    """Backward-warp each neighbor's color frame into the target space."""
    return np.stack(
        [backward_warp(frames[n], bundle.warps[i]) for i, n in enumerate(bundle.neighbors)]
    )
