"""Robust location/scale and anomaly scoring.

``q_estimator`` is the Rousseeuw-Croux Q scale,

    Q = c * {|v_i - v_l| : i < l}_(r),   r = C(floor(n/2) + 1, 2),

with 1-based ascending order statistics and c = 2.2219 (Gaussian
consistency, no finite-sample correction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScaleError

Q_CONSISTENCY = 2.2219


def median(v) -> float:
    """Lower median: element ceil(n/2)-1 of the sorted vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("median of an empty vector")
    k = (v.size + 1) // 2 - 1
    return float(np.partition(v, k)[k])


def q_rank(n: int) -> int:
    h = n // 2 + 1
    return h * (h - 1) // 2


def q_order_statistic_brute(v) -> float:
    """r-th smallest pairwise distance by full enumeration, O(n^2)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    n = v.size
    if n < 2:
        raise ValueError("Q needs at least two values")
    iu = np.triu_indices(n, k=1)
    d = np.abs(v[:, None] - v[None, :])[iu]
    return float(np.partition(d, q_rank(n) - 1)[q_rank(n) - 1])


def _count_below(x, rows, lo, hi, pivot, strict):
    """Per row i, how many columns j in [lo, hi) have x[j] - x[i] < pivot (<= if not strict).

    Differences are computed exactly as the brute force does, so counts
    are consistent with it bit for bit.  Vectorized bisection over rows.
    """
    a, b = lo.copy(), hi.copy()
    xi = x[rows]
    while True:
        active = a < b
        if not active.any():
            return a - lo
        mid = (a + b) // 2
        d = x[np.minimum(mid, x.size - 1)] - xi
        ok = (d < pivot) if strict else (d <= pivot)
        go_right = active & ok
        go_left = active & ~ok
        a = np.where(go_right, mid + 1, a)
        b = np.where(go_left, mid, b)


def _weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    k = np.searchsorted(cw, cw[-1] / 2.0)
    return values[order[k]]


def q_order_statistic_fast(v) -> float:
    """Same order statistic by selection in the implicitly sorted difference matrix.

    After sorting, row i holds x[j] - x[i] for j > i, nondecreasing in j.
    Each round pivots on the weighted median of the row medians of the
    remaining candidates (Johnson-Mizoguchi), which discards at least a
    quarter of them, so O(log n) rounds of O(n log n) counting suffice.
    """
    x = np.sort(np.asarray(v, dtype=np.float64).ravel())
    n = x.size
    if n < 2:
        raise ValueError("Q needs at least two values")
    k = q_rank(n) - 1  # 0-based rank among all pairs
    rows = np.arange(n - 1)
    lo = rows + 1
    hi = np.full(n - 1, n)
    below = 0
    while True:
        width = hi - lo
        remaining = int(width.sum())
        if remaining <= 4 * n:
            cand = np.concatenate([x[lo[i]:hi[i]] - x[i] for i in np.flatnonzero(width)])
            return float(np.partition(cand, k - below)[k - below])
        act = width > 0
        r, l_, h_ = rows[act], lo[act], hi[act]
        mids = x[l_ + (h_ - l_ - 1) // 2] - x[r]
        pivot = _weighted_median(mids, (h_ - l_).astype(np.float64))
        lt = _count_below(x, rows, lo, hi, pivot, strict=True)
        le = _count_below(x, rows, lo, hi, pivot, strict=False)
        n_lt, n_le = int(lt.sum()), int(le.sum())
        if k - below < n_lt:
            hi = lo + lt
        elif k - below < n_le:
            return float(pivot)
        else:
            below += n_le
            lo = lo + le


def q_estimator(v, method: str = "auto") -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("Q needs at least two values")
    if method == "brute" or (method == "auto" and v.size <= 64):
        stat = q_order_statistic_brute(v)
    elif method in ("fast", "auto"):
        stat = q_order_statistic_fast(v)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Q_CONSISTENCY * stat


@dataclass
class AnomalyScores:
    center: float
    scale: float
    scores: np.ndarray  # aligned with the masked elements, in input order
    index: np.ndarray  # positions in the full vector that were scored
    class_label: int | None = None
    size: int = 0  # length of the scored vector

    def full(self, fill=-np.inf) -> np.ndarray:
        """Scores scattered back into a vector of the input's length."""
        out = np.full(max(self.size, int(self.index.max()) + 1 if self.index.size else 0), fill)
        out[self.index] = self.scores
        return out


def anomaly_scores(v, subset_mask=None, class_label=None) -> AnomalyScores:
    """sigma = (v - median) / Q over the masked subset."""
    v = np.asarray(v, dtype=np.float64).ravel()
    mask = np.ones(v.size, bool) if subset_mask is None else np.asarray(subset_mask, bool)
    idx = np.flatnonzero(mask)
    name = "all" if class_label is None else f"class {class_label}"
    if idx.size < 2:
        raise DegenerateScaleError(name, f"subset {name} has {idx.size} element(s); Q needs at least 2")
    sub = v[idx]
    mu = median(sub)
    s = q_estimator(sub)
    if not s > 0:
        raise DegenerateScaleError(name)
    return AnomalyScores(mu, s, (sub - mu) / s, idx, class_label, v.size)


def tail_heaviness(scores, kappa: int) -> float:
    """kappa-th largest anomaly score."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= kappa <= s.size:
        raise ValueError(f"kappa={kappa} outside [1, {s.size}]")
    return float(np.partition(s, s.size - kappa)[s.size - kappa])
