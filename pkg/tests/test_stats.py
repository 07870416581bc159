"""Interquartile mean and bootstrap interval behavior."""

import numpy as np
import pytest

from dime.stats import interquartile_mean, stratified_bootstrap_ci


class TestInterquartileMean:
    def test_four_values(self):
        assert interquartile_mean([0.0, 1.0, 2.0, 3.0]) == 1.5

    def test_order_free(self):
        assert interquartile_mean([3.0, 1.0, 0.0, 2.0]) == 1.5

    def test_small_samples_keep_everything(self):
        assert interquartile_mean([5.0]) == 5.0
        assert interquartile_mean([1.0, 2.0, 3.0]) == 2.0

    def test_trims_outliers(self):
        values = [0.0] * 3 + [10.0] * 10 + [1e6] * 3
        assert interquartile_mean(values) == 10.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            interquartile_mean([])


class TestStratifiedBootstrap:
    def test_interval_brackets_point_estimate(self):
        rng = np.random.default_rng(0)
        strata = [rng.normal(loc=2.0, size=30) for _ in range(4)]
        point = interquartile_mean(np.concatenate(strata))
        lo, hi = stratified_bootstrap_ci(strata, n_resamples=500, rng=rng)
        assert lo <= point <= hi
        assert lo < hi

    def test_deterministic_under_fixed_rng(self):
        strata = [np.arange(10.0), np.arange(5.0, 15.0)]
        a = stratified_bootstrap_ci(strata, n_resamples=200, rng=np.random.default_rng(3))
        b = stratified_bootstrap_ci(strata, n_resamples=200, rng=np.random.default_rng(3))
        assert a == b

    def test_degenerate_data_collapses(self):
        strata = [np.full(8, 4.0), np.full(8, 4.0)]
        lo, hi = stratified_bootstrap_ci(strata, n_resamples=100)
        assert lo == hi == 4.0

    def test_contains_estimate_across_synthetic_datasets(self):
        rng = np.random.default_rng(1)
        hits = 0
        n_sets = 200
        for _ in range(n_sets):
            strata = [rng.normal(size=24) for _ in range(3)]
            point = interquartile_mean(np.concatenate(strata))
            lo, hi = stratified_bootstrap_ci(strata, n_resamples=200, rng=rng)
            hits += lo <= point <= hi
        assert hits / n_sets >= 0.95

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            stratified_bootstrap_ci([])
        with pytest.raises(ValueError):
            stratified_bootstrap_ci([np.array([])])
        with pytest.raises(ValueError):
            stratified_bootstrap_ci([np.ones(3)], confidence=1.5)
