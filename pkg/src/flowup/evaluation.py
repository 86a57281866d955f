"""End-point error and detail-stratified error analysis over 32x32 patches."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import DimensionError

EDGE_THRESHOLD = 8.0
PATCH = 32
BUCKET_WIDTH = 0.02
N_BUCKETS = 19

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise DimensionError(f"epe: shapes {pred.shape} and {gt.shape} must both be (2,H,W)")
    return np.sqrt(((pred - gt) ** 2).sum(axis=0))


def epe(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean end-point error and the per-pixel map."""
    m = epe_map(pred, gt)
    return float(m.mean()), m


def _sobel(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    p = np.pad(channel, 1, mode="edge")
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * p[i : i + h, j : j + w]
    return out


def gradient_magnitude(flow: np.ndarray) -> np.ndarray:
    """L2 norm of the 4-vector (du/dx, du/dy, dv/dx, dv/dy) from unnormalised 3x3 Sobel, replicate border."""
    flow = np.asarray(flow, dtype=np.float64)
    grads = [_sobel(c, k) for c in flow for k in (_SOBEL_X, _SOBEL_Y)]
    return np.sqrt(sum(g * g for g in grads))


def detail_map(flow_gt: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    flow_gt = np.asarray(flow_gt)
    if flow_gt.ndim != 3 or flow_gt.shape[0] != 2 or min(flow_gt.shape[1:]) < 3:
        raise DimensionError(f"detail_map needs a (2,H,W) field with H,W >= 3, got {flow_gt.shape}")
    return (gradient_magnitude(flow_gt) >= threshold).astype(np.uint8)


def patch_statistics(pred: np.ndarray, gt: np.ndarray, patch: int = PATCH,
                     threshold: float = EDGE_THRESHOLD) -> Tuple[np.ndarray, np.ndarray]:
    """Per non-overlapping patch: (detail level, mean EPE). Trailing partial patches are dropped."""
    err = epe_map(pred, gt)
    edges = detail_map(gt, threshold).astype(np.float64)
    h, w = err.shape
    ph, pw = h // patch, w // patch
    if ph == 0 or pw == 0:
        raise DimensionError(f"field {h}x{w} smaller than one {patch}x{patch} patch")
    crop = (slice(0, ph * patch), slice(0, pw * patch))

    def pooled(a):
        return a[crop].reshape(ph, patch, pw, patch).mean(axis=(1, 3)).ravel()

    return pooled(edges), pooled(err)


def bucket_index(detail: np.ndarray, width: float = BUCKET_WIDTH, n_buckets: int = N_BUCKETS) -> np.ndarray:
    return np.minimum(np.floor(np.asarray(detail) / width).astype(int), n_buckets - 1)


@dataclass
class DetailBucketReport:
    counts: np.ndarray
    mean_epe: np.ndarray  # NaN for empty buckets
    percentage: np.ndarray
    reverse_cumulative_percentage: np.ndarray
    contribution: np.ndarray
    reverse_cumulative_contribution: np.ndarray
    global_epe: float  # mean over patches
    bucket_width: float = BUCKET_WIDTH

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def high_detail_epe(self, min_bucket: int) -> float:
        sel = slice(min_bucket, None)
        n = self.counts[sel]
        if n.sum() == 0:
            return float("nan")
        return float(np.nansum(n * self.mean_epe[sel]) / n.sum())

    def rows(self) -> list:
        return [
            ("number of samples", [f"{int(c)}" for c in self.counts]),
            ("samples (percentage)", [f"{p:.2f}%" for p in self.percentage]),
            ("samples (reverse cumulative percentage)", [f"{p:.2f}%" for p in self.reverse_cumulative_percentage]),
            ("mean end-point-error", ["-" if np.isnan(e) else f"{e:.3f}" for e in self.mean_epe]),
            ("contribution to error (percentage)", [f"{p:.2f}%" for p in self.contribution]),
            ("contribution to error (reverse cumulative percentage)",
             [f"{p:.2f}%" for p in self.reverse_cumulative_contribution]),
        ]

    def to_text(self) -> str:
        rows = self.rows()
        label_w = max(len(r[0]) for r in rows)
        col_w = max(7, max(len(v) for _, vals in rows for v in vals))
        header = "Statistic".ljust(label_w) + "".join(str(b).rjust(col_w + 1) for b in range(len(self.counts)))
        lines = [header, "-" * len(header)]
        lines += [label.ljust(label_w) + "".join(v.rjust(col_w + 1) for v in vals) for label, vals in rows]
        lines.append(f"global patch-mean EPE: {self.global_epe:.4f} over {self.total} patches")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bucket", "detail_low", "detail_high", "count", "percentage",
                             "reverse_cumulative_percentage", "mean_epe", "contribution",
                             "reverse_cumulative_contribution"])
            n = len(self.counts)
            for b in range(n):
                high = "inf" if b == n - 1 else f"{(b + 1) * self.bucket_width:.2f}"
                writer.writerow([b, f"{b * self.bucket_width:.2f}", high, int(self.counts[b]),
                                 f"{self.percentage[b]:.6f}", f"{self.reverse_cumulative_percentage[b]:.6f}",
                                 "" if np.isnan(self.mean_epe[b]) else f"{self.mean_epe[b]:.9f}",
                                 f"{self.contribution[b]:.6f}", f"{self.reverse_cumulative_contribution[b]:.6f}"])
            writer.writerow(["global", "", "", self.total, "", "", f"{self.global_epe:.9f}", "", ""])


def report_from_patches(details: np.ndarray, errors: np.ndarray, width: float = BUCKET_WIDTH,
                        n_buckets: int = N_BUCKETS) -> DetailBucketReport:
    details, errors = np.asarray(details, dtype=np.float64), np.asarray(errors, dtype=np.float64)
    idx = bucket_index(details, width, n_buckets)
    counts = np.bincount(idx, minlength=n_buckets)
    totals = np.bincount(idx, weights=errors, minlength=n_buckets)
    n = counts.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    pct = 100.0 * counts / n
    grand = totals.sum()
    contrib = 100.0 * totals / grand if grand > 0 else np.zeros(n_buckets)
    rev = lambda a: np.cumsum(a[::-1])[::-1]  # noqa: E731
    return DetailBucketReport(counts=counts, mean_epe=mean, percentage=pct,
                              reverse_cumulative_percentage=rev(pct), contribution=contrib,
                              reverse_cumulative_contribution=rev(contrib),
                              global_epe=float(errors.mean()), bucket_width=width)


def bucket_report(pred, gt, patch: int = PATCH, threshold: float = EDGE_THRESHOLD) -> DetailBucketReport:
    """Table-1-style report for one pair, or for sequences of predictions and ground truths."""
    if isinstance(pred, np.ndarray) and pred.ndim == 3:
        pred, gt = [pred], [gt]
    details, errors = [], []
    for p, g in zip(pred, gt):
        d, e = patch_statistics(p, g, patch, threshold)
        details.append(d)
        errors.append(e)
    return report_from_patches(np.concatenate(details), np.concatenate(errors))


def edge_epe(preds: Iterable[np.ndarray], gts: Sequence[np.ndarray], threshold: float = EDGE_THRESHOLD) -> float:
    """Mean EPE over ground-truth edge pixels (``detail_map == 1``), pooled over all pairs."""
    total, count = 0.0, 0
    for p, g in zip(preds, gts):
        mask = detail_map(g, threshold).astype(bool)
        total += float(epe_map(p, g)[mask].sum())
        count += int(mask.sum())
    return total / count if count else float("nan")
