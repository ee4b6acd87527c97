import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latticewaves.lattice import LatticeState, constant_state, delta_state, evaluate_site, shift
from latticewaves.model import (BlowUpError, ModelError, ModelSpec, PolynomialReaction, apply_linear,
                                apply_nonlinearity, crossterm, rhs_embedded, rhs_full)
from latticewaves.zoo import (build_family, builtin_models, convolution, decoupled_copies, fhn, gaussian_kernel,
                              load_model, model_from_dict, model_to_dict, nagumo, tristable)

MODELS = builtin_models()
IDS = [m.name for m in MODELS]


def random_state(rng, n, lo=-8, width=17, scale=1.0):
    return LatticeState(lo, scale * rng.standard_normal((width, n)), scale * rng.standard_normal(n),
                        scale * rng.standard_normal(n))


def values(state, lo, hi):
    return state.on_range(lo, hi)[:, 0]


class TestLinear:
    def test_constant_annihilated(self):
        m = nagumo(1.0, 0.3)
        out = apply_linear(m, constant_state(5.0, -4, 4))
        assert np.all(out.values == 0) and out.tail_left[0] == 0 and out.tail_right[0] == 0

    def test_delta_stencil(self):
        out = apply_linear(nagumo(1.0, 0.3), delta_state(0))
        assert list(values(out, -1, 1)) == [1.0, -2.0, 1.0]
        assert out.window_lo == -1 and out.window_hi == 1

    def test_scaled_stencil(self):
        out = apply_linear(nagumo(0.5, 0.3), delta_state(0))
        assert list(values(out, -1, 1)) == [4.0, -8.0, 4.0]

    @pytest.mark.parametrize("model", MODELS, ids=IDS)
    def test_constant_annihilation_all_models(self, model, rng):
        for _ in range(5):
            c = rng.standard_normal(model.n) * 3
            out = apply_linear(model, constant_state(c, -3, 3))
            assert np.all(out.values == 0.0) and np.all(out.tail_left == 0) and np.all(out.tail_right == 0)

    def test_component_mismatch(self):
        with pytest.raises(ValueError):
            apply_linear(fhn(), delta_state(0))


class TestNonlinearity:
    def test_zero(self):
        out = apply_nonlinearity(nagumo(1.0, 0.25), constant_state(0.0, -2, 2))
        assert np.all(out.values == 0)

    def test_root(self):
        out = apply_nonlinearity(nagumo(1.0, 0.25), delta_state(0, 1.0))
        assert evaluate_site(out, 0)[0] == 0.0

    def test_value(self):
        out = apply_nonlinearity(nagumo(1.0, 0.25), delta_state(0, 0.5))
        assert evaluate_site(out, 0)[0] == pytest.approx(0.0625, abs=1e-16)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_blowup(self):
        with pytest.raises(BlowUpError):
            rhs_full(nagumo(1.0, 0.3), delta_state(0, 1e200))


class TestRhs:
    @pytest.mark.parametrize("model", MODELS, ids=IDS)
    def test_equilibria(self, model):
        for e in model.equilibria:
            out = rhs_full(model, constant_state(e, -3, 3))
            assert np.abs(out.values).max() <= 1e-15

    def test_middle_root(self):
        out = rhs_full(nagumo(1.0, 0.3), constant_state(0.3, -3, 3))
        assert np.abs(out.values).max() <= 1e-16

    def test_matches_profile_time_derivative(self, nagumo_front):
        p = nagumo_front
        lo, hi = -15, 15
        j = np.arange(lo, hi + 1, dtype=float)
        jw = np.arange(-60, 61, dtype=float)  # wide window: tails are at round-off distance
        t, dt = 0.7, 1e-6
        x = LatticeState(-60, p.evaluate(jw - p.c * t), p.alpha, p.omega)
        fd = (p.evaluate(j - p.c * (t + dt)) - p.evaluate(j - p.c * (t - dt))) / (2 * dt)
        f = rhs_full(p.model, x).on_range(lo, hi)
        assert np.abs(fd - f).max() < 1e-7

    @pytest.mark.parametrize("model", MODELS, ids=IDS)
    def test_shift_equivariance(self, model, rng):
        for k in range(-5, 6):
            x = random_state(rng, model.n)
            for op in (apply_linear, apply_nonlinearity, rhs_full):
                assert op(model, shift(x, k)).max_abs_diff(shift(op(model, x), k)) == 0.0


class TestEmbedded:
    def test_zero_plus(self, rng):
        m = nagumo(1.0, 0.3)
        x = random_state(rng, 1, scale=0.5)
        zero = LatticeState(0, [0.0], 0.0, 0.0)
        fm, fp = rhs_embedded(m, x, zero, 1.3, 0.2)
        assert fm.max_abs_diff(rhs_full(m, x)) == 0.0
        assert np.all(fp.values == 0)

    @pytest.mark.parametrize("model", MODELS, ids=IDS)
    def test_sum_identity(self, model, rng):
        for _ in range(10):
            xm, xp = random_state(rng, model.n), random_state(rng, model.n, lo=-3)
            t, cb = rng.uniform(0, 20), rng.uniform(-1, 1)
            fm, fp = rhs_embedded(model, xm, xp, t, cb)
            ref = rhs_full(model, xm + xp)
            scale = max(1.0, np.abs(ref.values).max())
            assert (fm + fp).max_abs_diff(ref) <= 1e-13 * scale

    def test_disjoint_supports(self):
        m = nagumo(1.0, 0.3)
        xm, xp = delta_state(-10, 0.3), delta_state(10, 0.3)
        assert np.all(crossterm(m, xm, xp).values == 0.0)
        fm, fp = rhs_embedded(m, xm, xp, 0.0, 0.0)
        assert fm.max_abs_diff(rhs_full(m, xm)) == 0.0
        assert fp.max_abs_diff(rhs_full(m, xp)) == 0.0

    def test_crossterm_cancellation_free(self):
        # tiny overlaps give a cross term of the size of the product, not of round-off in g
        m = nagumo(1.0, 0.3)
        xm, xp = delta_state(0, 1.0 - 1e-9), delta_state(0, 1e-9)
        c = evaluate_site(crossterm(m, xm, xp), 0)[0]
        u, v = 1.0 - 1e-9, 1e-9
        # g(u) = -(u^3 - 1.3 u^2 + 0.3 u): the cross term expanded by hand
        exact = -(3 * u * v * (u + v) - 1.3 * 2 * u * v)
        assert c == pytest.approx(exact, rel=1e-12)


class TestZoo:
    def test_at_least_four(self):
        names = {m.name for m in builtin_models()}
        assert {"nagumo", "tristable", "convolution", "fhn"} <= names

    def test_nagumo_equilibria(self):
        assert sorted(float(e[0]) for e in nagumo(1, 0.25).equilibria) == [0.0, 0.25, 1.0]

    def test_tristable_equilibria(self):
        eq = {float(e[0]) for e in tristable(1, -0.2, 0.2).equilibria}
        assert {-1.0, 0.0, 1.0} <= eq

    def test_fhn_rest(self):
        m = fhn(0.1, 1.0, 0.1, 0.5)
        assert m.is_equilibrium(np.zeros(2))
        assert m.n == 2

    @pytest.mark.parametrize("kw", [dict(a=1.2), dict(a=0.0)])
    def test_nagumo_invalid(self, kw):
        with pytest.raises(ModelError):
            nagumo(1.0, **kw)

    def test_fhn_invalid(self):
        with pytest.raises(ModelError):
            fhn(eps=0.0)

    def test_convolution_kernel(self):
        m = convolution(gaussian_kernel(1.0), a=0.3)
        assert m.is_symmetric and 0 < m.radius <= 64
        with pytest.raises(ModelError):
            convolution(lambda k: 1.0 / (1.0 + abs(k)), a=0.3)

    def test_tristable_ordering(self):
        with pytest.raises(ModelError):
            tristable(1.0, 0.2, -0.2)

    def test_decoupled_copies(self):
        m = decoupled_copies(nagumo(1.0, 0.3))
        assert m.n == 2 and len(m.equilibria) == 9

    def test_model_validation(self):
        with pytest.raises(ModelError):
            ModelSpec("bad", 1, {0: 1.0}, ({0: 1.0},), PolynomialReaction.from_roots([0.0, 1.0]))

    def test_unknown_family(self):
        with pytest.raises(ModelError):
            build_family("nope")


class TestModelFiles:
    @pytest.mark.parametrize("model", MODELS + [decoupled_copies(nagumo(1.0, 0.3))],
                             ids=IDS + ["copies"])
    def test_round_trip(self, model, rng, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(model_to_dict(model)))
        back = load_model(path)
        x = random_state(rng, model.n, scale=0.5)
        assert rhs_full(back, x).max_abs_diff(rhs_full(model, x)) <= 1e-14
        assert back.n == model.n and len(back.equilibria) == len(model.equilibria)

    def test_family_reference(self):
        m = model_from_dict({"name": "nagumo", "params": {"a": 0.4}})
        assert m.params["a"] == 0.4

    def test_translated(self, rng):
        m = nagumo(1.0, 0.3)
        t = model_from_dict({"name": "nagumo", "params": {"a": 0.3}, "translate_to": [1.0]})
        x = random_state(rng, 1, scale=0.5)
        assert rhs_full(t, x).max_abs_diff(rhs_full(m, x + 1.0)) <= 1e-13
