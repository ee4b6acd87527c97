import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latticewaves.lattice import (HeavisideCutoff, LatticeState, WeightedNorm, apply_cutoff, constant_state,
                                  delta_state, evaluate_site, format_state, parse_state, read_state, shift,
                                  sup_norm, weighted_norm, write_state)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def states(draw, n=None, zero_left=False, zero_right=False):
    n = n or draw(st.integers(1, 2))
    w = draw(st.integers(1, 25))
    lo = draw(st.integers(-30, 30))
    vals = np.array(draw(st.lists(finite, min_size=w * n, max_size=w * n))).reshape(w, n)
    tl = np.zeros(n) if zero_left else np.array(draw(st.lists(finite, min_size=n, max_size=n)))
    tr = np.zeros(n) if zero_right else np.array(draw(st.lists(finite, min_size=n, max_size=n)))
    return LatticeState(lo, vals, tl, tr)


@pytest.fixture
def example_state():
    return LatticeState(0, [1.0, 2.0, 3.0], 0.0, 9.0)


class TestEvaluateSite:
    def test_window(self, example_state):
        assert evaluate_site(example_state, 1)[0] == 2.0

    def test_left_tail(self, example_state):
        assert evaluate_site(example_state, -5)[0] == 0.0

    def test_right_tail(self, example_state):
        assert evaluate_site(example_state, 100)[0] == 9.0


class TestShift:
    def test_identity(self, example_state):
        assert shift(example_state, 0).allclose(example_state)

    def test_delta_moves_right(self):
        s = shift(delta_state(0), 1)
        assert evaluate_site(s, 1)[0] == 1.0 and evaluate_site(s, 0)[0] == 0.0

    @given(states(), st.integers(-10, 10))
    def test_group_law(self, x, k):
        assert shift(shift(x, k), -k).allclose(x)


class TestWeightedNorm:
    def test_delta_at_origin(self):
        for b in (-1.0, 0.0, 0.7):
            assert weighted_norm(b, delta_state(0)) == pytest.approx(2.0, rel=1e-15)

    def test_delta_at_one(self):
        assert weighted_norm(WeightedNorm(math.log(2.0)), delta_state(1)) == pytest.approx(3.0, rel=1e-14)

    def test_unbounded_tail(self):
        x = LatticeState(0, [0.0], 0.0, 1.0)
        assert weighted_norm(0.5, x) == math.inf
        assert weighted_norm(-0.5, x) < math.inf

    def test_no_overflow_far_out(self):
        # e^{600} overflows nothing here: the product is formed in the log domain
        x = delta_state(2000, 1e-300)
        assert weighted_norm(0.3, x) == pytest.approx(math.exp(math.log(1e-300) + 600.0), rel=1e-12)
        assert weighted_norm(0.5, delta_state(2000, 1.0)) == math.inf
        assert weighted_norm(-0.3, x) == pytest.approx(1e-300, rel=1e-12)

    @settings(max_examples=200)
    @given(states(zero_right=True), states(), st.floats(0.01, 2.0))
    def test_product_bound(self, u, v, b):
        if v.n != u.n:
            v = LatticeState(v.window_lo, np.repeat(v.values[:, :1], u.n, axis=1), v.tail_left[0], v.tail_right[0])
        lhs = weighted_norm(b, u * v)
        rhs = weighted_norm(b, u) * sup_norm(v)
        assert lhs <= rhs * (1 + 1e-12)

    @settings(max_examples=200)
    @given(states(n=1, zero_right=True), st.floats(0.0, 1.0), st.floats(0.01, 2.0))
    def test_monotone(self, x, s, b):
        assert weighted_norm(b, s * x) <= weighted_norm(b, x) * (1 + 1e-14)


class TestCutoff:
    def test_right_mask_at_zero(self):
        one = constant_state(1.0, -3, 3)
        r = apply_cutoff(HeavisideCutoff(0.0, "right", 0.0), one)
        assert [evaluate_site(r, j)[0] for j in range(-3, 4)] == [0, 0, 0, 0, 1, 1, 1]
        assert evaluate_site(r, -100)[0] == 0 and evaluate_site(r, 100)[0] == 1

    def test_left_is_complement(self):
        one = constant_state(1.0, -3, 3)
        left = apply_cutoff(HeavisideCutoff(0.0, "left", 0.0), one)
        assert [evaluate_site(left, j)[0] for j in range(-3, 4)] == [1, 1, 1, 1, 0, 0, 0]

    @given(states(), st.floats(-2, 2), st.floats(0, 50))
    def test_partition_and_idempotence(self, x, c_bar, t):
        left = apply_cutoff(HeavisideCutoff(c_bar, "left", t), x)
        right = apply_cutoff(HeavisideCutoff(c_bar, "right", t), x)
        assert (left + right).max_abs_diff(x) == 0.0
        assert apply_cutoff(HeavisideCutoff(c_bar, "left", t), left).max_abs_diff(left) == 0.0
        assert apply_cutoff(HeavisideCutoff(c_bar, "right", t), right).max_abs_diff(right) == 0.0

    @given(states(n=1), states(n=1), st.floats(-1, 1), st.floats(0, 20))
    def test_product_rule(self, x, y, c_bar, t):
        cut = HeavisideCutoff(c_bar, "left", t)
        assert apply_cutoff(cut, x * y).max_abs_diff(apply_cutoff(cut, x) * apply_cutoff(cut, y)) == 0.0

    def test_bad_side(self):
        with pytest.raises(ValueError):
            HeavisideCutoff(0.0, "up")


class TestSerialisation:
    @given(states())
    def test_round_trip_exact(self, x):
        y = parse_state(format_state(x))
        assert y.window_lo == x.window_lo
        assert np.array_equal(y.values, x.values)
        assert np.array_equal(y.tail_left, x.tail_left) and np.array_equal(y.tail_right, x.tail_right)

    def test_file_round_trip(self, tmp_path, example_state):
        write_state(tmp_path / "x.txt", example_state)
        assert read_state(tmp_path / "x.txt").max_abs_diff(example_state) == 0.0

    def test_format_lines(self, example_state):
        lines = format_state(example_state).splitlines()
        assert lines[-1].split() == ["2", "3.0"]


def test_state_validation():
    with pytest.raises(ValueError):
        LatticeState(0, np.empty((0, 1)), 0.0, 0.0)
    with pytest.raises(ValueError):
        LatticeState(0, [1.0], 0.0, 0.0) + LatticeState(0, [[1.0, 2.0]], 0.0, 0.0)
