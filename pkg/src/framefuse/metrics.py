"""Stabilization quality metrics.

Cropping ratio, distortion, stability, and accumulated flow, plus PSNR/SSIM
for synthesis quality. Homographies between frame pairs are fit to flow
correspondences with a normalized DLT inside a seeded RANSAC loop.

Metric definitions follow the common lineage in the stabilization
literature; cross-paper numeric comparability is not claimed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .flow import FlowProvider, consistency_error

RANSAC_ITERS = 500
RANSAC_THRESHOLD = 2.0  # px reprojection
CORRESPONDENCE_STRIDE = 8
CONSISTENCY_LIMIT = 1.0  # px; flow samples above this are dropped
STABILITY_MIN_FRAMES = 13
STABILITY_BAND = (2, 6)  # inclusive frequency bins counted as "stable" motion

# Per-frame scale factors are rounded to this many decimals before clamping;
# differences below it are estimation noise, and it keeps a genuinely
# full-frame method at a cropping ratio of exactly 1.0.
_SCALE_DECIMALS = 6


class HomographyError(ValueError):
    """Homography fitting failed (too few or degenerate correspondences)."""


@dataclass
class StabReport:
    """The four stabilization metrics plus per-frame traces."""

    cropping_ratio: float
    distortion: float
    stability: float
    accumulated_flow: float
    crop_trace: list[float] = field(default_factory=list)
    distortion_trace: list[float] = field(default_factory=list)
    flow_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cropping_ratio": self.cropping_ratio,
            "distortion": self.distortion,
            "stability": self.stability,
            "accumulated_flow": self.accumulated_flow,
        }


# ---------------------------------------------------------------------------
# Homography fitting
# ---------------------------------------------------------------------------


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = math.sqrt(2.0) / max(dist, 1e-12)
    t = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]]
    )
    ones = np.ones((len(pts), 1))
    normed = (t @ np.hstack([pts, ones]).T).T
    return normed[:, :2], t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization."""
    ns, ts = _normalize_points(src)
    nd, td = _normalize_points(dst)
    rows = []
    for (x, y), (u, v) in zip(ns, nd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.array(rows)
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) < 1e-12:
        raise HomographyError("degenerate homography (h33 ~ 0)")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-9 or not np.isfinite(h).all():
        raise HomographyError("degenerate homography (non-invertible)")
    return h


def _project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ones = np.ones((len(pts), 1))
    proj = (h @ np.hstack([pts, ones]).T).T
    wcol = proj[:, 2:3]
    wcol = np.where(np.abs(wcol) < 1e-12, 1e-12, wcol)
    return proj[:, :2] / wcol


def fit_homography(correspondences, seed: int = 0) -> np.ndarray:
    """RANSAC + normalized DLT over (p, p') pairs; refit on the inlier set."""
    pairs = list(correspondences)
    if len(pairs) < 4:
        raise HomographyError(f"need at least 4 correspondences, got {len(pairs)}")
    src = np.array([p for p, _ in pairs], dtype=np.float64)
    dst = np.array([q for _, q in pairs], dtype=np.float64)
    rng = np.random.default_rng(seed)
    best_inliers = None
    for _ in range(RANSAC_ITERS):
        idx = rng.choice(len(src), size=4, replace=False)
        try:
            h = _dlt(src[idx], dst[idx])
        except (HomographyError, np.linalg.LinAlgError):
            continue
        err = np.sqrt(((dst - _project(h, src)) ** 2).sum(axis=1))
        inliers = err < RANSAC_THRESHOLD
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < 4:
        raise HomographyError("RANSAC found no valid model")
    try:
        return _dlt(src[best_inliers], dst[best_inliers])
    except np.linalg.LinAlgError as exc:
        raise HomographyError(f"inlier refit failed: {exc}") from exc


def flow_correspondences(
    provider: FlowProvider, i: int, j: int, stride: int = CORRESPONDENCE_STRIDE
):
    """Grid-sampled (p, p + flow) pairs where forward-backward error < 1 px."""
    f_fw = provider.flow(i, j)
    f_bw = provider.flow(j, i)
    err = consistency_error(f_fw, f_bw)
    h, w = f_fw.shape[:2]
    pairs = []
    for y in range(stride // 2, h, stride):
        for x in range(stride // 2, w, stride):
            if err[y, x] < CONSISTENCY_LIMIT:
                pairs.append(
                    ((x, y), (x + float(f_fw[y, x, 0]), y + float(f_fw[y, x, 1])))
                )
    return pairs


def _affine_part(h: np.ndarray) -> np.ndarray:
    return h[:2, :2] / h[2, 2]


def _pair_homography(provider, i, j, seed):
    pairs = flow_correspondences(provider, i, j)
    return fit_homography(pairs, seed=seed)


def _frame_homographies(make_provider_pairs, n, seed, max_skip_frac=0.2):
    """Fit per-index homographies, skipping (and logging) sporadic failures."""
    results = {}
    skipped = []
    for k in range(n):
        try:
            results[k] = make_provider_pairs(k)
        except HomographyError:
            skipped.append(k)
    if len(skipped) > max_skip_frac * n:
        raise HomographyError(
            f"homography fitting failed on {len(skipped)}/{n} frames"
        )
    return results, skipped


# ---------------------------------------------------------------------------
# The four stabilization metrics
# ---------------------------------------------------------------------------


class _PairProvider(FlowProvider):
    """Adapter exposing two frames from different sequences as indices 0/1."""

    def __init__(self, frame_a, frame_b, estimator):
        super().__init__([frame_a, frame_b])
        self._estimator = estimator

    def _compute(self, i, j):
        return self._estimator(self.frames[i], self.frames[j])


def _cross_homography(inp, out, k, estimator, seed):
    provider = _PairProvider(out[k], inp[k], estimator)
    return _pair_homography(provider, 0, 1, seed)


def cropping_ratio(input_frames, output_frames, estimator, seed: int = 0):
    """Mean over frames of min(sqrt|det A|, 1) for H mapping output -> input."""
    n = len(output_frames)
    fits, _ = _frame_homographies(
        lambda k: _cross_homography(input_frames, output_frames, k, estimator, seed),
        n,
        seed,
    )
    trace = {}
    for k, h in fits.items():
        c = math.sqrt(abs(np.linalg.det(_affine_part(h))))
        trace[k] = round(c, _SCALE_DECIMALS)
    headline = float(np.mean([min(c, 1.0) for c in trace.values()]))
    return headline, [trace.get(k, float("nan")) for k in range(n)]


def distortion_value(input_frames, output_frames, estimator, seed: int = 0):
    """Min over frames of the affine part's singular-value ratio (in (0, 1])."""
    n = len(output_frames)
    fits, _ = _frame_homographies(
        lambda k: _cross_homography(input_frames, output_frames, k, estimator, seed),
        n,
        seed,
    )
    trace = {}
    for k, h in fits.items():
        s = np.linalg.svd(_affine_part(h), compute_uv=False)
        trace[k] = round(float(s[1] / max(s[0], 1e-12)), _SCALE_DECIMALS)
    headline = float(min(trace.values()))
    return headline, [trace.get(k, float("nan")) for k in range(n)]


def _spectral_ratio(seq: np.ndarray) -> float:
    """Energy share of frequency bins 2..6 excluding DC; all-zero -> 1."""
    seq = np.asarray(seq, dtype=np.float64)
    if np.max(np.abs(seq)) < 1e-12:
        return 1.0  # degenerate, perfectly stable by convention
    spectrum = np.abs(np.fft.rfft(seq)) ** 2
    total = spectrum[1:].sum()
    if total <= 0:
        return 1.0
    lo, hi = STABILITY_BAND
    return float(spectrum[lo : hi + 1].sum() / total)


def stability_score(output_frames, estimator, seed: int = 0) -> float:
    """Low-frequency energy share of the output's inter-frame motion.

    Translation magnitudes and rotation angles are extracted from consecutive
    homographies; each sequence is scored by its bins-2..6 spectral ratio and
    the two scores averaged.
    """
    n = len(output_frames)
    if n < STABILITY_MIN_FRAMES:
        raise ValueError(
            f"stability_score needs at least {STABILITY_MIN_FRAMES} frames, got {n}"
        )

    def pair(k):
        provider = _PairProvider(output_frames[k], output_frames[k + 1], estimator)
        return _pair_homography(provider, 0, 1, seed)

    fits, skipped = _frame_homographies(pair, n - 1, seed)
    translations = []
    rotations = []
    for k in range(n - 1):
        h = fits.get(k)
        if h is None:
            translations.append(0.0)
            rotations.append(0.0)
            continue
        h = h / h[2, 2]
        translations.append(math.hypot(h[0, 2], h[1, 2]))
        a = _affine_part(h)
        u, _, vt = np.linalg.svd(a)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        rotations.append(math.atan2(r[1, 0], r[0, 0]))
    return 0.5 * (_spectral_ratio(translations) + _spectral_ratio(rotations))


def accumulated_flow(output_frames, estimator) -> tuple[float, list[float]]:
    """Mean per-pixel flow magnitude between consecutive frames / diagonal."""
    n = len(output_frames)
    h, w = output_frames[0].shape[:2]
    diag = math.hypot(h, w)
    trace = []
    for k in range(n - 1):
        f = estimator(output_frames[k], output_frames[k + 1])
        mag = np.sqrt(f[..., 0] ** 2 + f[..., 1] ** 2)
        trace.append(float(mag.mean()) / diag)
    return (float(np.mean(trace)) if trace else 0.0), trace


def evaluate_stabilization(
    input_frames, output_frames, estimator, seed: int = 0
) -> StabReport:
    n = len(output_frames)
    # Fit the cross homographies once and derive both C and D from them.
    fits, _ = _frame_homographies(
        lambda k: _cross_homography(input_frames, output_frames, k, estimator, seed),
        n,
        seed,
    )
    c_by_frame = {}
    d_by_frame = {}
    for k, h in fits.items():
        affine = _affine_part(h)
        c_by_frame[k] = round(math.sqrt(abs(np.linalg.det(affine))), _SCALE_DECIMALS)
        sv = np.linalg.svd(affine, compute_uv=False)
        d_by_frame[k] = round(float(sv[1] / max(sv[0], 1e-12)), _SCALE_DECIMALS)
    c = float(np.mean([min(v, 1.0) for v in c_by_frame.values()]))
    d = float(min(d_by_frame.values()))
    c_trace = [c_by_frame.get(k, float("nan")) for k in range(n)]
    d_trace = [d_by_frame.get(k, float("nan")) for k in range(n)]
    s = stability_score(output_frames, estimator, seed)
    a, a_trace = accumulated_flow(output_frames, estimator)
    return StabReport(
        cropping_ratio=c,
        distortion=d,
        stability=s,
        accumulated_flow=a,
        crop_trace=c_trace,
        distortion_trace=d_trace,
        flow_trace=a_trace,
    )


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report 99."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(peak * peak / mse), 99.0)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window, sigma 1.5."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = _gaussian_kernel()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = fftconvolve(x, kernel, mode="valid")
        mu_y = fftconvolve(y, kernel, mode="valid")
        xx = fftconvolve(x * x, kernel, mode="valid") - mu_x**2
        yy = fftconvolve(y * y, kernel, mode="valid") - mu_y**2
        xy = fftconvolve(x * y, kernel, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
