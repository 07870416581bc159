"""Return aggregation helpers: interquartile mean and bootstrap intervals."""

from __future__ import annotations

import numpy as np


def interquartile_mean(values) -> float:
    """Mean of the middle half: floor(n/4) values dropped from each end."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("interquartile mean of an empty sample")
    drop = v.size // 4
    return float(v[drop : v.size - drop].mean())


def stratified_bootstrap_ci(
    per_stratum_values,
    n_resamples: int = 2000,
    confidence: float = 0.95,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the pooled interquartile mean.

    ``per_stratum_values`` is a sequence of 1-D arrays, one per stratum
    (seed); each resample draws with replacement inside every stratum
    independently, then pools.  Returns the (lo, hi) percentile bounds.
    """
    strata = [np.asarray(s, dtype=np.float64).ravel() for s in per_stratum_values]
    if not strata or any(s.size == 0 for s in strata):
        raise ValueError("every stratum needs at least one value")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    estimates = np.empty(n_resamples)
    for b in range(n_resamples):
        pooled = np.concatenate(
            [s[rng.integers(0, s.size, size=s.size)] for s in strata]
        )
        estimates[b] = interquartile_mean(pooled)
    tail = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(estimates, [tail, 1.0 - tail])
    return float(lo), float(hi)
