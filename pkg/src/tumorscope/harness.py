"""Verification oracles used by the test suite.

Nothing here calls into the engine's kernels, the classifier code or the
metrics module: each oracle is a second, deliberately naive route to the same
answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class OracleReport:
    op: str
    max_rel_error: float
    tolerance: float
    seed: int | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.op}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, seed {self.seed})"


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64.

    ``x`` is perturbed in place one element at a time and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise TypeError("finite_diff works on float64 arrays")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"f is non-finite near element {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


# -- classifier oracles -----------------------------------------------------------

def _standardize_lists(train: Sequence[Sequence[float]], rows: Sequence[Sequence[float]]):
    d = len(train[0])
    n = len(train)
    means = [sum(r[j] for r in train) / n for j in range(d)]
    stds = []
    for j in range(d):
        var = sum((r[j] - means[j]) ** 2 for r in train) / n
        stds.append(math.sqrt(var) if var > 0 else 1.0)
    z = lambda r: [(r[j] - means[j]) / stds[j] for j in range(d)]  # noqa: E731
    return [z(r) for r in train], [z(r) for r in rows]


def knn_bruteforce(train_x, train_y, queries, k: int) -> list[int]:
    """Sort every training point by (distance, index) and vote."""
    tr, qs = _standardize_lists(np.asarray(train_x).tolist(), np.asarray(queries).tolist())
    labels = [int(v) for v in train_y]
    out = []
    for q in qs:
        dists = []
        for i, r in enumerate(tr):
            dists.append((math.sqrt(sum((a - b) ** 2 for a, b in zip(r, q))), i))
        dists.sort()
        votes = sum(labels[i] for _, i in dists[:k])
        out.append(1 if votes * 2 > k else 0)
    return out


def naive_bayes_log_ratio_bruteforce(train_x, train_y, query, var_floor: float = 1e-9) -> float:
    """log[P(1) prod p(x_r|1)] - log[P(0) prod p(x_r|0)] via explicit density products."""
    tr, (q,) = _standardize_lists(np.asarray(train_x).tolist(), [list(query)])
    labels = [int(v) for v in train_y]
    post = {}
    for c in (0, 1):
        rows = [r for r, y in zip(tr, labels) if y == c]
        prior = len(rows) / len(tr)
        prod = prior
        for j in range(len(q)):
            mu = sum(r[j] for r in rows) / len(rows)
            var = max(sum((r[j] - mu) ** 2 for r in rows) / len(rows), var_floor)
            prod *= math.exp(-((q[j] - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
        post[c] = prod
    return math.log(post[1]) - math.log(post[0])


def gini_split_bruteforce(x, y) -> tuple[float, int, float]:
    """Exhaustive scan of every (feature, midpoint threshold); returns
    (weighted gini, feature, threshold) of the best split, lowest feature then
    lowest threshold on ties. ``(inf, -1, nan)`` when no split exists."""
    x = np.asarray(x, dtype=float).tolist()
    y = [int(v) for v in y]
    n = len(y)
    best = (math.inf, -1, math.nan)

    def gini(labels):
        if not labels:
            return 0.0
        p = sum(labels) / len(labels)
        return 1.0 - p * p - (1 - p) * (1 - p)

    for j in range(len(x[0])):
        values = sorted(set(r[j] for r in x))
        for a, b in zip(values, values[1:]):
            t = (a + b) / 2
            left = [y[i] for i in range(n) if x[i][j] <= t]
            right = [y[i] for i in range(n) if x[i][j] > t]
            score = (len(left) * gini(left) + len(right) * gini(right)) / n
            if score < best[0]:
                best = (score, j, t)
    return best


def count_confusion(predictions, labels) -> dict[str, int]:
    """Second, independently written tally of TP/TN/FP/FN (positive = 1)."""
    counts = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    key = {(1, 1): "tp", (0, 0): "tn", (1, 0): "fp", (0, 1): "fn"}
    for p, t in zip(predictions, labels):
        counts[key[(int(p), int(t))]] += 1
    return counts


# -- localization proxy ---------------------------------------------------------

def top_fraction_mask(heatmap: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask of the round(fraction * size) highest pixels (row-major order breaks ties)."""
    flat = np.asarray(heatmap, dtype=float).ravel()
    k = max(1, int(round(fraction * flat.size)))
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(heatmap))


def blob_iou(heatmap: np.ndarray, blob_mask: np.ndarray, fraction: float = 0.2) -> float:
    """IoU between the heatmap's top-``fraction`` pixels and a ground-truth mask."""
    if np.shape(heatmap) != np.shape(blob_mask):
        raise ValueError(f"heatmap {np.shape(heatmap)} and mask {np.shape(blob_mask)} differ")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    hot = top_fraction_mask(heatmap, fraction)
    truth = np.asarray(blob_mask, dtype=bool)
    union = np.logical_or(hot, truth).sum()
    return float(np.logical_and(hot, truth).sum() / union) if union else 0.0
