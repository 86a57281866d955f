"""Convex-hull representability of high-resolution flow vectors.

A convex upsampler can only reproduce a target vector that lies in the convex
hull of the low-resolution vectors its mask covers.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .windows import window_index

HULL_TOL = 1e-9


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def points_in_hull(targets: np.ndarray, neighbors: np.ndarray, tol: float = HULL_TOL) -> np.ndarray:
    """Vectorised containment test of ``targets (N, 2)`` against the hull of ``neighbors (K, 2)``."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    hull = convex_hull(neighbors)
    if len(hull) == 0:
        return np.zeros(len(t), dtype=bool)
    if len(hull) == 1:
        return np.abs(t - hull[0]).max(axis=1) <= tol
    if len(hull) == 2:
        a, b = hull
        ab = b - a
        on_line = np.abs(_cross(a, b, t)) <= tol
        proj = (t - a) @ ab
        return on_line & (proj >= -tol) & (proj <= ab @ ab + tol)
    inside = np.ones(len(t), dtype=bool)
    for i in range(len(hull)):
        inside &= _cross(hull[i], hull[(i + 1) % len(hull)], t) >= -tol
    return inside


def hull_representable(target: Sequence[float], neighbors: Sequence[Sequence[float]], tol: float = HULL_TOL) -> bool:
    """True iff ``target`` lies in the convex hull of ``neighbors`` (boundary counts as inside)."""
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, 2)
    if len(nb) == 0:
        raise ValueError("need at least one neighbor")
    return bool(points_in_hull(np.asarray(target, dtype=np.float64)[None], nb, tol)[0])


def representability_map(flow_hr: np.ndarray, factor: int, m: int) -> np.ndarray:
    """Boolean ``(H, W)`` map: is each pixel's vector in the hull of its parent's m x m low-res window?

    The low-resolution field is the block average of ``flow_hr``; windows are
    clamped inside the low-resolution image as in neighborhood attention.
    """
    flow_hr = np.asarray(flow_hr, dtype=np.float64)
    _, hh, ww = flow_hr.shape
    if hh % factor or ww % factor:
        raise ValueError(f"flow size {hh}x{ww} not divisible by {factor}")
    h, w = hh // factor, ww // factor
    low = flow_hr.reshape(2, h, factor, w, factor).mean(axis=(2, 4))
    rows, _ = window_index(h, m, "clamp")
    cols, _ = window_index(w, m, "clamp")
    out = np.zeros((hh, ww), dtype=bool)
    for y in range(h):
        for x in range(w):
            nb = low[:, rows[y]][:, :, cols[x]].reshape(2, -1).T
            block = flow_hr[:, y * factor : (y + 1) * factor, x * factor : (x + 1) * factor].reshape(2, -1).T
            out[y * factor : (y + 1) * factor, x * factor : (x + 1) * factor] = \
                points_in_hull(block, nb).reshape(factor, factor)
    return out


def representability_study(flow_hr: np.ndarray, factor: int, mask_sizes: Sequence[int]) -> dict:
    """Fraction of representable high-resolution pixels for each mask size."""
    return {int(m): float(representability_map(flow_hr, factor, m).mean()) for m in mask_sizes}
