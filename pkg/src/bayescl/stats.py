"""Mann-Whitney U rank test with exact and normal-approximation p-values.

The exact two-sided p-value enumerates the null distribution of U by
the standard counting recurrence (no ties). The approximation uses the
normal limit with midranks, tie-corrected variance, and a continuity
correction. ``method="auto"`` picks exact when min(n1, n2) <= 8 and the
pooled sample has no ties.
"""

import math
from functools import lru_cache

import numpy as np

__all__ = ["mann_whitney_u"]


def _midranks(values):
    """Average ranks (1-based); tied values share the mean of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@lru_cache(maxsize=None)
def _u_counts(n1, n2):
    """Counts of arrangements per U value under the null (no ties).

    Recurrence: c(n1, n2, u) = c(n1-1, n2, u-n2) + c(n1, n2-1, u),
    i.e. the largest observation belongs to sample 1 or sample 2.
    """
    if n1 == 0 or n2 == 0:
        return (1,)
    with_largest_in_a = _u_counts(n1 - 1, n2)
    with_largest_in_b = _u_counts(n1, n2 - 1)
    size = n1 * n2 + 1
    counts = [0] * size
    for u, c in enumerate(with_largest_in_a):
        counts[u + n2] += c
    for u, c in enumerate(with_largest_in_b):
        counts[u] += c
    return tuple(counts)


def _exact_p(u1, n1, n2):
    counts = _u_counts(n1, n2)
    total = math.comb(n1 + n2, n1)
    u_small = min(u1, n1 * n2 - u1)
    tail = sum(counts[: int(math.floor(u_small)) + 1])
    return min(1.0, 2.0 * tail / total)


def _normal_p(u1, n1, n2, pooled):
    n = n1 + n2
    mu = 0.5 * n1 * n2
    _, tie_sizes = np.unique(np.asarray(pooled, dtype=np.float64), return_counts=True)
    tie_term = float(np.sum(tie_sizes**3 - tie_sizes))
    if n < 2:
        return 1.0
    var = (n1 * n2 / 12.0) * ((n + 1.0) - tie_term / (n * (n - 1.0)))
    if var <= 0:
        return 1.0  # all pooled values identical: degenerate, documented
    z = (abs(u1 - mu) - 0.5) / math.sqrt(var)  # continuity correction
    if z < 0:
        z = 0.0
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney_u(a, b, method="auto"):
    """Two-sided Mann-Whitney U test; returns (U of sample ``a``, p-value).

    ``method`` is "exact", "normal", or "auto". Exact enumeration
    requires a tie-free pooled sample. Swapping the samples maps U to
    n1*n2 - U and leaves p unchanged.
    """
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    if not a or not b:
        raise ValueError("both samples must be non-empty")
    n1, n2 = len(a), len(b)
    pooled = a + b
    ranks = _midranks(pooled)
    r1 = float(np.sum(ranks[:n1]))
    u1 = r1 - n1 * (n1 + 1) / 2.0
    has_ties = len(set(pooled)) < len(pooled)
    if method == "auto":
        method = "exact" if (min(n1, n2) <= 8 and not has_ties) else "normal"
    if method == "exact":
        if has_ties:
            raise ValueError("exact p-value requires a tie-free pooled sample")
        return u1, _exact_p(u1, n1, n2)
    if method == "normal":
        return u1, _normal_p(u1, n1, n2, pooled)
    raise ValueError(f"unknown method {method!r}")
