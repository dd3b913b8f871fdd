"""Path adjustment: per-frame global translations maximizing valid coverage.

The energy couples a per-frame invalid-pixel fraction with a squared
smoothness penalty between adjacent frames (translations normalized by the
frame diagonal, so lambda_s is scale-free). The pairwise graph is a chain,
so each coarse-to-fine level is solved exactly by dynamic programming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .flow import VALID_EPS, WarpBundle, recompute_bundle_masks

# Label grids at most this large are solved exactly in a single DP pass;
# the 8 -> 2 -> 1 coarse-to-fine schedule only kicks in above it.
_EXACT_GRID_LIMIT = 289

Label = tuple[int, int]


def _label_key(label: Label) -> tuple:
    return (label[0] * label[0] + label[1] * label[1], label[0], label[1])


@dataclass
class CoverageField:
    """Per-frame tables mapping candidate translations to invalid fractions."""

    tables: list[dict[Label, float]]

    def __len__(self) -> int:
        return len(self.tables)

    def cost(self, k: int, label: Label) -> float:
        return self.tables[k][label]

    def labels(self, k: int) -> list[Label]:
        return sorted(self.tables[k], key=_label_key)


def shifted_masks(bundle: WarpBundle, x) -> np.ndarray:
    """Bundle masks after adding the translation x to every chained warp."""
    shift = np.asarray(x, dtype=np.float32).reshape(1, 1, 1, 2)
    shifted = replace(bundle, warps=bundle.warps + shift)
    return recompute_bundle_masks(shifted).masks


def coverage_fraction(bundle: WarpBundle, x) -> float:
    """Fraction of target pixels no neighbor covers after shifting by x."""
    masks = shifted_masks(bundle, x)
    holes = np.max(masks, axis=0) < VALID_EPS
    return float(holes.mean())


def apply_path(bundle: WarpBundle, x) -> WarpBundle:
    """Add x to every chained warp; masks and errors are recomputed."""
    shift = np.asarray(x, dtype=np.float32).reshape(1, 1, 1, 2)
    return recompute_bundle_masks(replace(bundle, warps=bundle.warps + shift))


def build_coverage_field(bundles, labels) -> CoverageField:
    """Tabulate coverage_fraction for every (frame, label) pair."""
    tables = []
    for bundle in bundles:
        tables.append({tuple(l): coverage_fraction(bundle, l) for l in labels})
    return CoverageField(tables)


def path_energy(path, coverage: CoverageField, lambda_s: float, diag: float) -> float:
    """Coverage data term plus the (both-directions) pairwise smoothness term."""
    total = 0.0
    t = len(path)
    for k in range(t):
        total += coverage.cost(k, tuple(path[k]))
    for k in range(t):
        for q in (k - 1, k + 1):
            if 0 <= q < t:
                dx = (path[k][0] - path[q][0]) / diag
                dy = (path[k][1] - path[q][1]) / diag
                total += lambda_s * (dx * dx + dy * dy)
    return total


def solve_chain_dp(
    label_sets: list[list[Label]],
    cost_fn,
    lambda_s: float,
    diag: float,
) -> list[Label]:
    """Exact minimizer of the chain energy over per-frame label sets.

    cost_fn(k, label) is the data term. Labels are visited in order of
    (norm, lexicographic) preference with strict comparisons, so energy ties
    resolve toward the smallest translations.
    """
    t = len(label_sets)
    if t == 0 or any(len(ls) == 0 for ls in label_sets):
        raise ValueError("solve_chain_dp: empty label set")
    # Pairwise term counts each adjacent pair in both directions.
    w = 2.0 * lambda_s / (diag * diag)
    ordered = [sorted(set(ls), key=_label_key) for ls in label_sets]
    values = [np.array([cost_fn(0, l) for l in ordered[0]], dtype=np.float64)]
    pointers = []
    for k in range(1, t):
        prev_labels = np.array(ordered[k - 1], dtype=np.float64)
        prev_values = values[-1]
        cur = np.empty(len(ordered[k]), dtype=np.float64)
        ptr = np.empty(len(ordered[k]), dtype=np.int64)
        for i, label in enumerate(ordered[k]):
            diff = prev_labels - np.array(label, dtype=np.float64)
            trans = prev_values + w * (diff**2).sum(axis=1)
            best = int(np.argmin(trans))  # first minimum = preferred tie-break
            cur[i] = cost_fn(k, label) + trans[best]
            ptr[i] = best
        values.append(cur)
        pointers.append(ptr)
    path = [None] * t
    idx = int(np.argmin(values[-1]))
    path[t - 1] = ordered[t - 1][idx]
    for k in range(t - 2, -1, -1):
        idx = int(pointers[k][idx])
        path[k] = ordered[k][idx]
    return path


def _grid_labels(radius: int, step: int, center: Label = (0, 0)) -> list[Label]:
    vals_x = range(center[0] - radius, center[0] + radius + 1, step)
    vals_y = range(center[1] - radius, center[1] + radius + 1, step)
    return [(x, y) for x in vals_x for y in vals_y]


def _clamp_label(label: Label, radius: int) -> Label:
    return (
        max(-radius, min(radius, label[0])),
        max(-radius, min(radius, label[1])),
    )


def optimize_path(
    coverage,
    lambda_s: float,
    diag: float,
    radius: int | None = None,
    n_frames: int | None = None,
    steps: tuple[int, ...] = (8, 2, 1),
) -> tuple[list[Label], list[float]]:
    """Minimize the chain energy over integer translations in [-R, R]^2.

    ``coverage`` is either a CoverageField (its tabulated labels define the
    grid) or a callable cost(k, label) paired with explicit ``radius`` and
    ``n_frames``. Small grids are solved exactly in one DP pass; larger ones
    use the coarse-to-fine 8 -> 2 -> 1 schedule, each level refining a window
    around (and always containing) the previous solution, so the energy is
    non-increasing across levels.

    Returns (path, per-level energies).
    """
    if isinstance(coverage, CoverageField):
        t = len(coverage)
        label_sets = [coverage.labels(k) for k in range(t)]
        cost_fn = coverage.cost
        if all(len(ls) <= _EXACT_GRID_LIMIT for ls in label_sets):
            path = solve_chain_dp(label_sets, cost_fn, lambda_s, diag)
            return path, [path_energy(path, coverage, lambda_s, diag)]
        radius = max(max(abs(l[0]), abs(l[1])) for ls in label_sets for l in ls)
    else:
        if radius is None or n_frames is None:
            raise ValueError("callable coverage requires radius and n_frames")
        t = n_frames
        cost_fn = coverage

    def energy(path):
        total = sum(cost_fn(k, path[k]) for k in range(t))
        for k in range(t - 1):
            dx = (path[k][0] - path[k + 1][0]) / diag
            dy = (path[k][1] - path[k + 1][1]) / diag
            total += 2.0 * lambda_s * (dx * dx + dy * dy)
        return total

    side = 2 * radius + 1
    if side * side <= _EXACT_GRID_LIMIT:
        labels = _grid_labels(radius, 1)
        path = solve_chain_dp([labels] * t, cost_fn, lambda_s, diag)
        return path, [energy(path)]

    path = None
    energies = []
    prev_step = None
    for step in steps:
        if step > 2 * radius:
            continue
        if path is None:
            label_sets = [_grid_labels(radius, step)] * t
        else:
            window = prev_step
            label_sets = []
            for k in range(t):
                center = path[k]
                labels = {
                    _clamp_label(l, radius)
                    for l in _grid_labels(window, step, center)
                }
                labels.add(path[k])  # keeps the level energy non-increasing
                label_sets.append(sorted(labels, key=_label_key))
        path = solve_chain_dp(label_sets, cost_fn, lambda_s, diag)
        energies.append(energy(path))
        prev_step = step
    if path is None:  # radius too small for every step in the schedule
        labels = _grid_labels(radius, 1)
        path = solve_chain_dp([labels] * t, cost_fn, lambda_s, diag)
        energies.append(energy(path))
    return path, energies


def default_search_radius(height: int, width: int) -> int:
    """Default label range: 10% of the frame diagonal."""
    return max(1, int(round(0.1 * math.hypot(height, width))))
