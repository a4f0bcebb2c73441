"""Binomial confidence helpers."""

import math
from statistics import NormalDist

from .errors import DomainError


def wilson_ci(successes: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise DomainError(f"need 0 <= successes <= n and n >= 1, got {successes}/{n}")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    z2 = z * z
    denom = 1 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # the bounds are exactly 0 and 1 at the extremes; rounding can leave them a hair inside
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def rule_of_three(n: int) -> float:
    """95% upper bound on an event rate after observing zero events in ``n`` trials."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return 3.0 / n


def percentile_nearest_rank(values, q: float) -> int:
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]
