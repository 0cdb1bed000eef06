import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab.tensor import DomainError
from kdlab.weighting import (
    WarmupSchedule,
    WeightingScheme,
    equal_weights,
    frozen_variance_weights,
    hard_discard_weights,
    hard_mining_weights,
    lambda_at,
    load_variance_table,
    save_variance_table,
    soft_exp_weights,
    soft_poly_weights,
)

gap_vectors = st.lists(
    st.floats(min_value=0.0, max_value=50.0, allow_nan=False), min_size=1, max_size=32
).map(np.asarray)


class TestSoftExp:
    def test_constant_gaps_give_uniform(self):
        w = soft_exp_weights(np.full(5, 3.3), temperature=2.0)
        np.testing.assert_allclose(w, np.full(5, 0.2), atol=1e-15)

    def test_hand_value(self):
        w = soft_exp_weights(np.array([0.0, np.log(2.0)]), temperature=1.0)
        np.testing.assert_allclose(w, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_huge_temperature_limit_is_uniform(self):
        w = soft_exp_weights(np.array([0.0, 1.0, 2.0, 5.0]), temperature=1e9)
        np.testing.assert_allclose(w, np.full(4, 0.25), atol=1e-6)

    def test_non_positive_temperature_rejected(self):
        with pytest.raises(DomainError):
            soft_exp_weights(np.array([1.0]), temperature=0.0)

    @settings(max_examples=150, deadline=None)
    @given(d=gap_vectors, t=st.floats(min_value=0.05, max_value=20.0))
    def test_normalized_and_anti_monotone(self, d, t):
        w = soft_exp_weights(d, t)
        assert abs(w.sum() - 1.0) <= 1e-9
        assert np.all(w >= 0) and np.all(np.isfinite(w))
        order = np.argsort(d)
        assert np.all(np.diff(w[order]) <= 1e-12)

    @settings(max_examples=60, deadline=None)
    @given(d=gap_vectors, t=st.floats(min_value=0.1, max_value=10.0),
           c=st.floats(min_value=0.0, max_value=20.0))
    def test_shift_invariance(self, d, t, c):
        np.testing.assert_allclose(soft_exp_weights(d + c, t), soft_exp_weights(d, t), atol=1e-9)


class TestSoftPoly:
    def test_constant_gaps_give_uniform(self):
        np.testing.assert_allclose(soft_poly_weights(np.full(4, 1.7), 2.0), np.full(4, 0.25))

    def test_hand_value(self):
        w = soft_poly_weights(np.array([0.0, 1.0]), alpha=1.0)
        np.testing.assert_allclose(w, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_non_positive_alpha_rejected(self):
        with pytest.raises(DomainError):
            soft_poly_weights(np.array([1.0]), alpha=0.0)

    @settings(max_examples=150, deadline=None)
    @given(d=gap_vectors, a=st.floats(min_value=0.05, max_value=10.0))
    def test_normalized_and_anti_monotone(self, d, a):
        w = soft_poly_weights(d, a)
        assert abs(w.sum() - 1.0) <= 1e-9
        order = np.argsort(d)
        assert np.all(np.diff(w[order]) <= 1e-12)


class TestHardMining:
    def test_constant_gaps_give_uniform(self):
        np.testing.assert_allclose(hard_mining_weights(np.full(3, 0.4), 1.0), np.full(3, 1 / 3))

    def test_hand_value(self):
        w = hard_mining_weights(np.array([0.0, np.log(2.0)]), temperature=1.0)
        np.testing.assert_allclose(w, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(d=gap_vectors, t=st.floats(min_value=0.05, max_value=20.0))
    def test_ordering_reverses_soft_exp(self, d, t):
        hm = hard_mining_weights(d, t)
        se = soft_exp_weights(d, t)
        order = np.argsort(d)
        assert np.all(np.diff(hm[order]) >= -1e-12)
        assert np.all(np.diff(se[order]) <= 1e-12)


class TestHardDiscard:
    def test_k_zero_is_equal_weighting(self):
        d = np.random.default_rng(0).uniform(0, 5, 9)
        w = hard_discard_weights(d, 0)
        np.testing.assert_array_equal(w, equal_weights(9))

    def test_drops_largest(self):
        np.testing.assert_array_equal(hard_discard_weights(np.array([3.0, 1.0, 2.0]), 1), [0, 1, 1])

    def test_tie_drops_higher_index(self):
        np.testing.assert_array_equal(hard_discard_weights(np.array([2.0, 2.0, 1.0]), 1), [1, 0, 1])

    def test_k_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            hard_discard_weights(np.array([1.0, 2.0]), 2)

    @settings(max_examples=100, deadline=None)
    @given(d=gap_vectors, data=st.data())
    def test_exactly_k_zeros_on_the_largest(self, d, data):
        k = data.draw(st.integers(min_value=0, max_value=len(d) - 1))
        w = hard_discard_weights(d, k)
        assert int((w == 0).sum()) == k
        if k:
            assert d[w == 0].min() >= d[w == 1].max() - 1e-12


class TestFrozenVariance:
    def test_constant_table_gives_uniform(self):
        table = {i: 1.0 for i in range(4)}
        np.testing.assert_allclose(frozen_variance_weights(table, [0, 1, 2, 3]), np.ones(4))

    def test_reciprocal_ratio(self):
        w = frozen_variance_weights({0: 1.0, 1: 4.0}, [0, 1])
        assert w[0] / w[1] == pytest.approx(4.0)

    def test_mean_normalized_to_one(self):
        rng = np.random.default_rng(1)
        table = {i: float(v) for i, v in enumerate(rng.uniform(0.1, 5.0, 16))}
        w = frozen_variance_weights(table, list(range(16)))
        assert abs(w.mean() - 1.0) <= 1e-9

    def test_missing_id_rejected(self):
        with pytest.raises(KeyError):
            frozen_variance_weights({0: 1.0}, [0, 7])

    def test_table_file_roundtrip(self, tmp_path):
        path = tmp_path / "var.csv"
        ids = np.arange(5)
        sig = np.random.default_rng(2).uniform(0.5, 2.0, 5)
        save_variance_table(path, ids, sig)
        table = load_variance_table(path)
        assert set(table) == set(range(5))
        np.testing.assert_allclose([table[i] for i in ids], sig, rtol=0)


class TestScheme:
    def test_dispatch_matches_functions(self):
        d = np.array([0.1, 2.0, 0.7])
        np.testing.assert_array_equal(
            WeightingScheme("soft_exp", temperature=2.0).weights(d), soft_exp_weights(d, 2.0)
        )
        np.testing.assert_array_equal(
            WeightingScheme("hard_discard", discard_count=1).weights(d), hard_discard_weights(d, 1)
        )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            WeightingScheme("focal")


class TestWarmup:
    def test_ramp_start_is_zero(self):
        assert lambda_at(WarmupSchedule(10, 2.0), 0) == 0.0

    def test_ramp_end_is_final(self):
        assert lambda_at(WarmupSchedule(10, 2.0), 10) == 2.0
        assert lambda_at(WarmupSchedule(10, 2.0), 25) == 2.0

    def test_linear_midpoint(self):
        assert lambda_at(WarmupSchedule(10, 2.0), 5) == pytest.approx(1.0)

    def test_zero_warmup_is_constant(self):
        assert lambda_at(WarmupSchedule(0, 1.5), 0) == 1.5

    def test_non_decreasing(self):
        sched = WarmupSchedule(7, 3.0)
        vals = [lambda_at(sched, e) for e in range(20)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
