import math

import numpy as np
import pytest

from transducer_workbench.errors import ContractViolation, OracleFailure
from transducer_workbench.numerics import (
    NEG_INF,
    RandomStream,
    finite_difference_gradient,
    log_softmax,
    log_sum_exp,
    pack_arrays,
    relative_error,
    softmax,
    unpack_arrays,
)


class TestLogSumExp:
    def test_two_halves(self):
        assert log_sum_exp([math.log(0.5), math.log(0.5)]) == pytest.approx(0.0, abs=1e-15)

    def test_single_element_identity(self):
        assert log_sum_exp([-3.7]) == -3.7

    def test_neg_inf_contributes_nothing(self):
        assert log_sum_exp([NEG_INF, -1.0]) == pytest.approx(-1.0, abs=1e-15)

    def test_all_neg_inf(self):
        assert log_sum_exp([NEG_INF, NEG_INF]) == NEG_INF

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            log_sum_exp([])

    def test_permutation_invariance_and_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v = rng.normal(0, 5, size=rng.integers(2, 12))
            direct = log_sum_exp(v)
            assert log_sum_exp(v[::-1]) == pytest.approx(direct, abs=1e-12)
            k = rng.integers(1, v.size)
            split = log_sum_exp([log_sum_exp(v[:k]), log_sum_exp(v[k:])])
            assert split == pytest.approx(direct, abs=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_shift_invariance(self):
        for c in (-100.0, 0.0, 3.25, 1e5):
            np.testing.assert_allclose(softmax([c] * 4), [0.25] * 4, atol=1e-15)

    def test_exact_ratio(self):
        np.testing.assert_allclose(
            softmax([math.log(1.0), math.log(3.0)]), [0.25, 0.75], atol=1e-14
        )

    def test_nan_rejected(self):
        with pytest.raises(ContractViolation):
            softmax([0.0, float("nan")])

    def test_probability_vector_property(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            z = rng.normal(0, 10, size=rng.integers(2, 9))
            p = softmax(z)
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_log_softmax_consistent(self):
        rng = np.random.default_rng(3)
        z = rng.normal(0, 4, size=(5, 7))
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)


class TestFiniteDifference:
    def test_quadratic(self):
        g = finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-3)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        g = finite_difference_gradient(lambda x: 1.25, np.ones(4), eps=1e-4)
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_nonfinite_names_coordinate(self):
        def f(x):
            return float("inf") if x[1] > 0.5 else 0.0

        with pytest.raises(OracleFailure, match="coordinate 1"):
            finite_difference_gradient(f, np.array([0.0, 0.5, 0.0]), eps=1e-2)


class TestRandomStream:
    def test_repeatable_draws(self):
        a = RandomStream(123, 5).random(10)
        b = RandomStream(123, 5).random(10)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RandomStream(123, 5).random(10)
        b = RandomStream(123, 6).random(10)
        assert not np.array_equal(a, b)

    def test_child_streams_deterministic_and_distinct(self):
        base = RandomStream(9)
        c1 = base.child(4, 2)
        c2 = base.child(4, 3)
        again = RandomStream(9).child(4, 2)
        np.testing.assert_array_equal(c1.random(5), again.random(5))
        assert not np.array_equal(RandomStream(9).child(4, 2).random(5), c2.random(5))

    def test_choice_weighted_distribution(self):
        rs = RandomStream(77)
        counts = np.zeros(3)
        for _ in range(30_000):
            counts[rs.choice_weighted([1.0, 2.0, 1.0])] += 1
        np.testing.assert_allclose(counts / counts.sum(), [0.25, 0.5, 0.25], atol=0.01)


def test_pack_unpack_roundtrip():
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1.5, -2.0])}
    vec = pack_arrays(arrays)
    back = unpack_arrays(vec, arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_relative_error_scalarizes():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
