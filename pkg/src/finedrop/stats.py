"""Small statistics helpers used by reports, demos, and the test suite."""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError

__all__ = ["quantile_linear", "five_number_summary", "normalized_entropy", "sign_test_p"]


def quantile_linear(values, q: float) -> float:
    """Quantile with linear interpolation between inclusive order statistics.

    With sorted values v_0..v_{n-1}, the q-quantile sits at rank
    h = (n - 1) * q and interpolates v_floor(h) and v_ceil(h). E.g. the
    quartiles of {1, 2, 3, 4} are 1.75, 2.5, 3.25.
    """
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"q must be in [0, 1], got {q}")
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValidationError("quantile of an empty sequence")
    h = (v.size - 1) * q
    lo = int(math.floor(h))
    hi = int(math.ceil(h))
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def five_number_summary(values) -> dict:
    """min, q25, median, q75, max under the linear-interpolation rule."""
    return {
        "min": quantile_linear(values, 0.0),
        "q25": quantile_linear(values, 0.25),
        "median": quantile_linear(values, 0.5),
        "q75": quantile_linear(values, 0.75),
        "max": quantile_linear(values, 1.0),
    }


def normalized_entropy(weights) -> float:
    """Entropy of |weights| normalized to a distribution, divided by log(n).

    1.0 means perfectly spread mass, 0.0 means all mass on one coordinate.
    Used to quantify how concentrated a per-feature weight profile is.
    """
    w = np.abs(np.asarray(weights, dtype=np.float64).reshape(-1))
    if w.size < 2:
        raise ValidationError("entropy needs at least 2 coordinates")
    total = w.sum()
    if total == 0:
        return 1.0
    p = w / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(w.size))


def sign_test_p(wins: int, trials: int) -> float:
    """One-sided sign test: P(Binomial(trials, 1/2) >= wins).

    Ties should be excluded from both counts before calling.
    """
    if trials < 1 or wins < 0 or wins > trials:
        raise ValidationError(f"need 0 <= wins <= trials with trials >= 1, got {wins}/{trials}")
    total = sum(math.comb(trials, k) for k in range(wins, trials + 1))
    return total / 2.0 ** trials
