"""Markerless rope splitting: skeleton pixels to equidistant nodes.

Starting from the attachment pixel, the next node is the closest skeleton
point that is at least ``d_min`` away from the current node and closer to the
current node than to the previous one (so the walk cannot turn back).  Points
already passed, i.e. closer than ``d_min`` to an earlier node, are skipped.  The
brute-force variant scans every point per step; the accelerated variant asks a
k-d tree for the points inside a growing ball.  Both evaluate distances with
the same scalar formula and break ties by the lowest point index, so they
return identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyInput, InsufficientPoints, NonMonotonicTime

BRUTE = "brute"
ACCELERATED = "accelerated"


@dataclass(frozen=True)
class SplitResult:
    points: np.ndarray  # (N'+1, 2)
    indices: tuple  # skeleton index of each split point
    early_termination: bool = False  # the walk stopped with skeleton points never passed

    @property
    def spacings(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def spacing_stats(self) -> dict:
        s = self.spacings
        if s.size == 0:
            return {"count": 0, "min": None, "max": None, "mean": None}
        return {"count": int(s.size), "min": float(s.min()), "max": float(s.max()),
                "mean": float(s.mean())}


def _dist(xs, ys, i, cx, cy):
    dx = xs[i] - cx
    dy = ys[i] - cy
    return math.sqrt(dx * dx + dy * dy)


def _best(cands, xs, ys, cur, prev, d_min, used):
    """Lowest-index unused candidate of minimal distance that satisfies both constraints."""
    cx, cy = xs[cur], ys[cur]
    best, best_d = -1, math.inf
    for j in cands:
        if used[j]:
            continue
        d = _dist(xs, ys, j, cx, cy)
        if d < d_min or d >= best_d:
            continue
        if prev >= 0 and not d < _dist(xs, ys, j, xs[prev], ys[prev]):
            continue
        best, best_d = j, d
    return best, best_d


def _validate(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyInput("skeleton has no points")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatch(f"skeleton must be (M, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("skeleton coordinates must be finite")
    return pts


def split_rope(points, d_min: float, mode: str = ACCELERATED) -> SplitResult:
    """Greedy equidistant split of a skeleton; index 0 is the attachment end."""
    if not d_min > 0:
        raise ValueError("d_min must be positive")
    pts = _validate(points)
    xs, ys = pts[:, 0].tolist(), pts[:, 1].tolist()
    m = len(xs)
    order = list(range(m))
    tree = None
    if mode == ACCELERATED:
        tree = cKDTree(pts)
        extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    elif mode != BRUTE:
        raise ValueError(f"unknown mode '{mode}'")
    chosen = [0]
    # Skeleton points within d_min of a placed split have been walked past and
    # stop being candidates; this ends the walk at the rope's free end.
    used = [False] * m

    def consume(c):
        near = order if tree is None else sorted(tree.query_ball_point((xs[c], ys[c]), d_min * (1 + 1e-9)))
        for j in near:
            if _dist(xs, ys, j, xs[c], ys[c]) < d_min:
                used[j] = True
        used[c] = True

    consume(0)
    prev, cur = -1, 0
    while True:
        if tree is None:
            nxt, _ = _best(order, xs, ys, cur, prev, d_min, used)
        else:
            r = 1.5 * d_min
            while True:
                if r > extent:
                    nxt, _ = _best(order, xs, ys, cur, prev, d_min, used)
                    break
                cands = sorted(tree.query_ball_point((xs[cur], ys[cur]), r))
                nxt, d = _best(cands, xs, ys, cur, prev, d_min, used)
                # everything at distance <= d is certainly inside the ball
                if nxt >= 0 and d < r * (1 - 1e-9):
                    break
                r *= 2.0
        if nxt < 0:
            break
        chosen.append(nxt)
        consume(nxt)
        prev, cur = cur, nxt
    return SplitResult(pts[chosen], tuple(chosen), not all(used))


def equalize_splits(fine: SplitResult, n: int) -> SplitResult:
    """Keep ``n`` of the fine split points at equal index strides, first and last included."""
    f = len(fine.points)
    if n < 1 or f < n:
        raise InsufficientPoints(f"cannot select {n} points from {f}")
    if n == 1:
        sel = [0]
    else:
        sel = np.round(np.linspace(0, f - 1, n)).astype(int).tolist()
    return SplitResult(fine.points[sel], tuple(fine.indices[i] for i in sel), fine.early_termination)


def split_nodes(points, n_nodes: int, d_min: float, factor: int = 4,
                mode: str = ACCELERATED) -> SplitResult:
    """Split at ``d_min / factor`` first, then equalize down to ``n_nodes`` points."""
    return equalize_splits(split_rope(points, d_min / factor, mode), n_nodes)


def estimate_node_velocities(frames, window: int = 1) -> np.ndarray:
    """Per-node 2-D velocities from ``[(t, SplitResult | (n, 2) array), ...]``.

    Backward differences between consecutive frames (the first frame reuses the
    second's value), then a trailing moving average over ``window`` frames.
    """
    if len(frames) < 2:
        raise InsufficientPoints("need at least two frames")
    if window < 1:
        raise ValueError("window must be >= 1")
    t = np.array([float(f[0]) for f in frames])
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("frame timestamps must increase")
    X = [np.asarray(f[1].points if isinstance(f[1], SplitResult) else f[1], dtype=np.float64)
         for f in frames]
    if len({x.shape for x in X}) != 1:
        raise DimensionMismatch("frames have different node counts")
    X = np.stack(X)
    raw = np.diff(X, axis=0) / np.diff(t)[:, None, None]
    raw = np.concatenate([raw[:1], raw])
    csum = np.cumsum(raw, axis=0)
    out = np.empty_like(raw)
    for k in range(len(raw)):
        lo = k - window
        s = csum[k] - (csum[lo] if lo >= 0 else 0.0)
        out[k] = s / (k - max(lo, -1))
    return out


# ---------------------------------------------------------------------------
# files


def load_skeleton(path):
    """``x, y`` per line; an optional ``# t = <seconds>`` comment sets the timestamp."""
    t = None
    rows = []
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("t") and "=" in body:
                    t = float(body.split("=", 1)[1])
                continue
            if s:
                x, y = s.split(",")
                rows.append((float(x), float(y)))
    return t, np.array(rows, dtype=np.float64).reshape(-1, 2)


def save_splits(path, frames) -> None:
    """``t, node, x, y`` rows for a sequence of ``(t, SplitResult)``."""
    with open(path, "w") as fh:
        fh.write("t, node, x, y\n")
        for t, res in frames:
            for i, (x, y) in enumerate(res.points):
                fh.write(f"{t:.17g}, {i}, {x:.17g}, {y:.17g}\n")
