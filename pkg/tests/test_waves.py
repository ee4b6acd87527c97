import math

import numpy as np
import pytest

from latticewaves.lattice import LatticeState
from latticewaves.model import ModelError, ModelSpec, PolynomialReaction
from latticewaves.waves import (ContinuationRun, DecayError, PhaseCondition, PinnedFront, WaveProfile,
                                certify_decay, continue_branch, front_seed, level_crossing, measure_speed,
                                parse_profile, format_profile, profile_grid, profile_residual, pulse_seed,
                                read_profile, reflect, solve_profile, write_profile)
from latticewaves.zoo import fhn, nagumo, tristable


def aligned_difference(p, q):
    """sup |p(xi) - q(xi + d)| after aligning the mid-level crossings of component 0."""
    mid = 0.5 * (p.alpha[0] + p.omega[0])
    xp = level_crossing(LatticeState(0, p.phi[:, 0], p.alpha, p.omega), mid) / p.m + p.xi[0]
    xq = level_crossing(LatticeState(0, q.phi[:, 0], q.alpha, q.omega), mid) / q.m + q.xi[0]
    x = np.linspace(-20, 20, 801)
    return float(np.abs(p.evaluate(x + xp) - q.evaluate(x + xq)).max())


class TestResidual:
    def test_equilibria_have_zero_residual(self):
        m = nagumo(1.0, 0.3)
        xi = profile_grid(10, 8)
        phi = np.zeros((xi.size, 1))
        assert np.all(profile_residual(m, xi, phi, 0.7, alpha=0.0, omega=0.0) == 0.0)
        # the other roots of the monomial-form cubic vanish only to round-off
        bound = 8 * np.finfo(float).eps * np.abs(m.nonlinearity.coeffs).sum()
        for e in (0.3, 1.0):
            phi = np.full((xi.size, 1), e)
            assert np.abs(profile_residual(m, xi, phi, 0.7, alpha=e, omega=e)).max() <= bound

    def test_incompatible_grid(self):
        m = nagumo(1.0, 0.3)
        xi = np.linspace(-10, 10, 77)
        with pytest.raises(ModelError):
            profile_residual(m, xi, np.zeros((77, 1)), 0.1, 0.0, 0.0)

    def test_converged_front(self, nagumo_front):
        assert np.abs(nagumo_front.residual_vector()).max() < 1e-10


class TestSolve:
    def test_front_speed_positive(self, nagumo_front):
        p = nagumo_front
        assert isinstance(p, WaveProfile) and p.c > 0
        assert p.c == pytest.approx(0.2795904050, abs=1e-9)

    def test_newton_quadratic(self, nagumo_front):
        h = nagumo_front.newton_history
        tail = [x for x in h if x < 1e-2 and x > 1e-14]
        ratios = [math.log(b) / math.log(a) for a, b in zip(tail, tail[1:]) if a < 1]
        assert max(ratios) > 1.6

    def test_pinned_at_half(self):
        m = nagumo(1.0, 0.5)
        out = solve_profile(m, front_seed(m, 1.0, 0.0, c0=0.1))
        assert isinstance(out, PinnedFront) and abs(out.c) < 1e-3

    def test_grid_halving(self, nagumo_front):
        m = nagumo(1.0, 0.3)
        fine = solve_profile(m, front_seed(m, 1.0, 0.0, Xi=40, m=64, c0=0.2))
        assert abs(fine.c - nagumo_front.c) < 1e-8

    def test_translation_gauge(self, nagumo_front):
        m = nagumo(1.0, 0.3)
        other = solve_profile(m, front_seed(m, 1.0, 0.0, c0=0.2), PhaseCondition(level=0.8))
        assert abs(other.c - nagumo_front.c) < 1e-10
        assert aligned_difference(nagumo_front, other) < 1e-7

    def test_tristable_fronts(self):
        m = tristable(1.0, -0.2, 0.2)
        left = solve_profile(m, front_seed(m, -1.0, 0.0, c0=0.1))
        right = solve_profile(m, front_seed(m, 0.0, 1.0, c0=0.1))
        for p in (left, right):
            assert isinstance(p, WaveProfile) and p.residual < 1e-10
        assert left.phi[0, 0] == pytest.approx(-1.0, abs=1e-6) and left.phi[-1, 0] == pytest.approx(0.0, abs=1e-6)
        assert right.phi[0, 0] == pytest.approx(0.0, abs=1e-6) and right.phi[-1, 0] == pytest.approx(1.0, abs=1e-6)

    def test_bad_limits(self):
        m = nagumo(1.0, 0.3)
        with pytest.raises(ModelError):
            solve_profile(m, front_seed(m, 1.0, 0.5))

    def test_phase_condition_validation(self):
        with pytest.raises(ValueError):
            PhaseCondition(kind="other")


class TestReflect:
    def test_involution_exact(self, nagumo_front):
        p = nagumo_front
        q = reflect(reflect(p))
        assert np.array_equal(q.phi, p.phi) and np.array_equal(q.xi, p.xi) and q.c == p.c
        assert q.decay_rate == p.decay_rate

    def test_front_to_back(self, nagumo_front):
        p = nagumo_front
        q = reflect(p)
        assert q.c == -p.c
        assert np.array_equal(q.alpha, p.omega) and np.array_equal(q.omega, p.alpha)
        assert q.decay_rate == (p.decay_rate[1], p.decay_rate[0])
        assert np.allclose(q.evaluate(np.array([1.3, -4.2])), p.evaluate(np.array([-1.3, 4.2])), atol=1e-14)
        r0 = np.abs(p.residual_vector()).max()
        assert np.abs(q.residual_vector()).max() <= 2 * r0 + 1e-14

    def test_asymmetric_stencil_rejected(self, nagumo_front):
        g = PolynomialReaction.from_roots([0.0, 1.0, 0.3], scale=-1.0)
        m = ModelSpec("adv", 1, {-1: 1.5, 0: -2.0, 1: 0.5}, ({0: 1.0},), g, (0.0, 0.3, 1.0))
        p = solve_profile(m, front_seed(m, 1.0, 0.0, c0=0.2))
        with pytest.raises(ValueError):
            reflect(p)


class TestDecay:
    def synthetic(self, fn, Xi=40.0, m=16):
        xi = profile_grid(Xi, m)
        phi = np.where(xi < 0, 1.0 - fn(-xi), fn(xi))[:, None]
        return WaveProfile(xi, phi, 0.5, 1.0, 0.0, nagumo(1.0, 0.3))

    def test_exponential_exact(self):
        kappa = 0.6
        p = self.synthetic(lambda x: 0.5 * np.exp(-kappa * x))
        bl, br = certify_decay(p)
        assert abs(bl - kappa) < 1e-6 and abs(br - kappa) < 1e-6

    def test_algebraic_rejected(self):
        p = self.synthetic(lambda x: 0.5 / (1.0 + np.abs(x)) ** 2)
        with pytest.raises(DecayError):
            certify_decay(p)

    def test_nagumo_certified(self, nagumo_front):
        p = nagumo_front
        assert p.certified and min(p.decay_rate) > 0
        assert p.model.default_b == pytest.approx(min(p.decay_rate) / 2)
        assert p.tail_margin < 1e-10


class TestContinuation:
    def test_to_pinning(self, nagumo_front):
        run = continue_branch(lambda a: nagumo(1.0, a), nagumo_front, (0.3, 0.5), h0=0.02, h_max=0.02)
        cs = run.speeds()
        assert np.all(np.diff(cs) < 0)
        assert run.branch[-1].pinned and run.pinned_from == pytest.approx(0.5)
        assert np.all(np.diff(run.params()) <= 0.02 + 1e-12)
        assert all(pt.profile.certified for pt in run.branch if not pt.pinned)

    def test_length_one(self, nagumo_front):
        run = continue_branch(lambda a: nagumo(1.0, a), nagumo_front, (0.3, 0.3))
        assert len(run.branch) == 1 and run.branch[0].profile is nagumo_front

    def test_branch_symmetry(self, nagumo_front):
        up = continue_branch(lambda a: nagumo(1.0, a), nagumo_front, (0.3, 0.45), h0=0.05, h_max=0.05)
        m7 = nagumo(1.0, 0.7)
        start = solve_profile(m7, front_seed(m7, 1.0, 0.0, c0=-0.2))
        down = continue_branch(lambda a: nagumo(1.0, a), start, (0.7, 0.55), h0=0.05, h_max=0.05)
        assert np.allclose(up.params(), 1.0 - down.params(), atol=1e-12)
        assert np.abs(up.speeds() + down.speeds()).max() < 1e-8

    def test_csv_rows(self, nagumo_front):
        run = continue_branch(lambda a: nagumo(1.0, a), nagumo_front, (0.3, 0.35), h0=0.05, h_max=0.05)
        assert isinstance(run, ContinuationRun)
        assert [r[0] for r in run.csv_rows()] == [0.3, 0.35]


class TestMeasureSpeed:
    def test_exact_profile(self, nagumo_front):
        p = nagumo_front
        x0 = p.lattice_state(-50, 60)
        c = measure_speed(p.model, x0, 0.5, (0.0, 60.0))
        assert abs(c / p.c - 1) < 1e-4

    def test_pinned_step(self):
        m = nagumo(1.0, 0.5)
        j = np.arange(-30, 31)
        x0 = LatticeState(-30, (j <= 0).astype(float), 1.0, 0.0)
        assert abs(measure_speed(m, x0, 0.5, (0.0, 60.0))) < 1e-6

    def test_reflected_data(self, nagumo_front):
        p = nagumo_front
        x0 = p.lattice_state(-50, 60)
        xr = LatticeState(-60, x0.values[::-1], p.omega, p.alpha)
        c = measure_speed(p.model, x0, 0.5, (0.0, 60.0))
        cr = measure_speed(p.model, xr, 0.5, (0.0, 60.0))
        assert abs(cr + c) < 1e-6 * abs(c)

    def test_edge_error(self, nagumo_front):
        p = nagumo_front
        with pytest.raises(Exception):
            measure_speed(p.model, p.lattice_state(-20, 10), 0.5, (0.0, 60.0))


@pytest.fixture(scope="module")
def pulse():
    m = fhn()
    seed = pulse_seed(m)
    return seed, solve_profile(m, seed, PhaseCondition("integral"))


class TestPulse:
    def test_converges_to_simulated_speed(self, pulse):
        seed, p = pulse
        assert isinstance(p, WaveProfile)
        assert p.residual < 1e-10
        assert abs(p.c / seed.c - 1) < 1e-3
        assert np.allclose(p.alpha, 0.0) and np.allclose(p.omega, 0.0)

    def test_no_pulse_below_threshold(self):
        with pytest.raises(Exception):
            pulse_seed(fhn(), kick=0.01)


class TestProfileFiles:
    def test_round_trip_exact(self, nagumo_front, tmp_path):
        write_profile(tmp_path / "p.txt", nagumo_front)
        q = read_profile(tmp_path / "p.txt")
        p = nagumo_front
        assert np.array_equal(p.phi, q.phi) and np.array_equal(p.xi, q.xi)
        assert p.c == q.c and p.decay_rate == q.decay_rate and p.tail_margin == q.tail_margin
        assert q.model.default_b == p.model.default_b
        assert format_profile(q) == format_profile(p)

    def test_header(self, nagumo_front):
        text = format_profile(nagumo_front)
        keys = [ln.split()[1] for ln in text.splitlines() if ln.startswith("#")]
        assert keys[:3] == ["wave-profile", "model", "c"]
        assert {"Xi", "m", "decay_rate"} <= set(keys)

    def test_malformed(self):
        with pytest.raises(ValueError):
            parse_profile("# wave-profile 1\n0.0 1.0\n")
