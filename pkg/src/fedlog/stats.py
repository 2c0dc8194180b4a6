"""One-tailed Wilcoxon signed-rank test for paired per-seed results."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXACT_MAX_N = 20


@dataclass
class WilcoxonResult:
    p_value: float
    statistic: float
    n: int
    method: str
    undefined: bool = False


def midranks(values):
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(doubled_ranks, observed):
    # counts[s] = number of sign patterns whose doubled positive-rank sum is s
    counts = np.zeros(int(doubled_ranks.sum()) + 1)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return float(counts[int(observed) :].sum() / 2.0 ** doubled_ranks.size)


def wilcoxon_one_tailed(a, b, method="auto"):
    """p-value for the alternative that ``a`` tends to exceed ``b``.

    Zero differences are dropped. ``method="auto"`` uses the exact null
    distribution up to 20 non-zero pairs and the continuity-corrected normal
    approximation (with tie correction) above. All-zero differences give
    p = 1 flagged ``undefined``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, "none", undefined=True)
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_upper_tail(2.0 * ranks, round(2.0 * w_plus))
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
        z = (w_plus - mean - 0.5) / math.sqrt(var)
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(p, w_plus, n, method)
