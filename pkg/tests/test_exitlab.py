import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latticewaves.exitlab import (ExitConfig, adjoint_mode, build_initial, projection_shifts, fit_objective, fit_shifts, grid_scan,
                                  is_monotone, log_fit, manifold_distance, measure_crossterm, perturbation,
                                  plateau_width, predicted_rates, scaling_checks, split_initial, stacking_run,
                                  superposition, sweep, sweep_csv, write_outputs)
from latticewaves.lattice import LatticeState, constant_state, shift
from latticewaves.model import ModelError


def state_at(cfg, gm, gp, t=0.0):
    lo, hi = cfg.resolved_window()
    sm, sp = cfg.positions(t, gm, gp)
    return LatticeState(lo, superposition(cfg, lo, hi, sm, sp), cfg.profile_minus.alpha, cfg.profile_plus.omega)


class TestConfig:
    def test_ordering_and_separation(self, bench_cfg):
        cfg = bench_cfg
        with pytest.raises(ValueError):
            replace(cfg, profile_minus=cfg.profile_plus, profile_plus=cfg.profile_minus)
        with pytest.raises(ValueError):
            replace(cfg, tau_minus=-20.0, tau_plus=20.0)
        with pytest.raises(ValueError):
            replace(cfg, delta=-1.0)
        with pytest.raises(ValueError):
            replace(cfg, perturbation="wobble")
        with pytest.raises(ValueError):
            replace(cfg, t_end=0.0)

    def test_unnormalised_pair_rejected(self, nagumo_front):
        from latticewaves.waves import reflect

        with pytest.raises(ValueError):
            ExitConfig(nagumo_front.model, reflect(nagumo_front), nagumo_front)

    def test_incompatible_pair(self, nagumo_front):
        from latticewaves.exitlab import normalize_pair

        with pytest.raises(ModelError):
            normalize_pair(nagumo_front, nagumo_front)

    def test_window_contains_waves(self, bench_cfg):
        lo, hi = bench_cfg.resolved_window()
        assert lo < bench_cfg.tau_minus + bench_cfg.c_minus * bench_cfg.t_end - 30
        assert hi > bench_cfg.tau_plus + bench_cfg.c_plus * bench_cfg.t_end + 30
        with pytest.raises(ValueError):
            replace(bench_cfg, window=(-50, 50)).resolved_window()

    def test_weight_is_smaller_b(self, bench_cfg):
        assert bench_cfg.weight == bench_cfg.model.default_b
        assert replace(bench_cfg, b=0.1).weight == 0.1

    def test_predicted_rates(self, bench_cfg):
        p = predicted_rates(bench_cfg)
        dc = bench_cfg.c_plus - bench_cfg.c_minus
        assert p["b_star"] == pytest.approx(0.25 * p["b"] * dc)
        assert p["crossterm_rate_pred"] == pytest.approx(0.5 * p["b"] * dc)
        assert p["a_pred"] == min(bench_cfg.lam / 4, p["b_star"])


class TestInitialData:
    @pytest.mark.parametrize("kind", ["site", "bump", "random"])
    def test_perturbation_sup_is_delta(self, bench_cfg, kind):
        cfg = replace(bench_cfg, perturbation=kind, delta=3e-3)
        assert np.abs(perturbation(cfg, -50, 50)).max() == pytest.approx(3e-3, rel=1e-15)

    def test_zero_delta(self, bench_cfg):
        cfg = replace(bench_cfg, delta=0.0)
        assert np.all(perturbation(cfg, -50, 50) == 0.0)
        x0 = build_initial(cfg)
        assert fit_shifts(x0, cfg, 0.0)[2] < 1e-9
        assert manifold_distance(x0, cfg, 0.0) < 1e-9

    def test_random_seeded(self, bench_cfg):
        a = perturbation(replace(bench_cfg, perturbation="random", seed=4), -10, 10)
        b = perturbation(replace(bench_cfg, perturbation="random", seed=4), -10, 10)
        c = perturbation(replace(bench_cfg, perturbation="random", seed=5), -10, 10)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_split_sums_to_state(self, bench_cfg):
        x0 = build_initial(bench_cfg)
        xm, xp = split_initial(bench_cfg, x0)
        assert (xm + xp).max_abs_diff(x0) == 0.0


class TestFit:
    def test_recovers_synthetic_shifts(self, bench_cfg, rng):
        cfg = replace(bench_cfg, delta=0.0)
        for _ in range(5):
            gm, gp = rng.uniform(-0.45, 0.45, size=2)
            t = float(rng.uniform(0, 10))
            s = state_at(cfg, gm, gp, t)
            fm, fp, r = fit_shifts(s, cfg, t)
            assert abs(fm - gm) < 1e-6 and abs(fp - gp) < 1e-6 and r < 1e-8
            qm, qp, _ = grid_scan(s, cfg, t)
            assert abs(qm - fm) <= 0.025 + 1e-12 and abs(qp - fp) <= 0.025 + 1e-12

    def test_perturbation_bounds_residual(self, bench_cfg):
        x0 = build_initial(bench_cfg)
        _, _, r = fit_shifts(x0, bench_cfg, 0.0)
        assert r <= bench_cfg.delta * (1 + 1e-9)

    def test_shift_covariance(self, bench_cfg):
        cfg = replace(bench_cfg, delta=0.0)
        s = state_at(cfg, 0.1, -0.2)
        fm, fp, _ = fit_shifts(shift(s, 1), cfg, 0.0)
        assert fm == pytest.approx(1.1, abs=1e-6) and fp == pytest.approx(0.8, abs=1e-6)

    def test_objective_zero_at_truth(self, bench_cfg):
        cfg = replace(bench_cfg, delta=0.0)
        s = state_at(cfg, 0.2, 0.3)
        assert fit_objective(cfg, s, 0.0, 0.2, 0.3) < 1e-12
        assert fit_objective(cfg, s, 0.0, 0.0, 0.0) > 1e-3

    def test_trust_region(self, bench_cfg):
        from latticewaves.exitlab import FitError

        cfg = replace(bench_cfg, delta=0.0, eps_max=0.5)
        s = state_at(cfg, 1.5, 0.0)
        with pytest.raises(FitError):
            fit_shifts(s, cfg, 0.0)

    def test_distance_below_residual(self, bench_cfg):
        x0 = build_initial(replace(bench_cfg, delta=1e-2, perturbation="bump"))
        gm, gp, r = fit_shifts(x0, bench_cfg, 0.0)
        assert manifold_distance(x0, bench_cfg, 0.0, (gm, gp)) <= r


class TestProjection:
    def test_mode_normalised(self, bench_pair, bench_modes):
        _, pm, pp, _ = bench_pair
        for prof, mode in zip((pm, pp), bench_modes):
            sites = np.arange(mode.lo, mode.lo + mode.psi.shape[0], dtype=float)
            assert np.sum(mode.psi * prof.derivative(sites).reshape(mode.psi.shape)) == pytest.approx(1.0, abs=1e-12)

    def test_exact_superposition_is_fixed(self, bench_cfg, bench_modes):
        cfg = replace(bench_cfg, delta=0.0)
        s = state_at(cfg, 0.3, -0.3, 2.0)
        assert projection_shifts(s, cfg, 2.0, 0.3, -0.3, bench_modes) == (0.3, -0.3)

    @pytest.mark.parametrize("eps", [1e-2, 1e-3])
    def test_linear_step_is_second_order(self, bench_cfg, bench_modes, eps):
        cfg = replace(bench_cfg, delta=0.0)
        s = state_at(cfg, 0.2, -0.1)
        gm, gp = projection_shifts(s, cfg, 0.0, 0.2 + eps, -0.1 - eps, bench_modes)
        assert abs(gm - 0.2) < 0.1 * eps ** 2 and abs(gp + 0.1) < 0.1 * eps ** 2

    def test_gap_bounded_by_residual(self, bench_report, bench_modes):
        # |<psi, R>| <= ||psi||_1 ||R||_inf, with <psi, phi'> = 1 up to the sub-site phase
        rep = bench_report
        l1 = max(np.abs(m.psi).sum() for m in bench_modes)
        for proj, fit in ((rep.gamma_proj_minus, rep.gamma_minus), (rep.gamma_proj_plus, rep.gamma_plus)):
            assert np.all(np.abs(proj - fit) <= 1.1 * l1 * rep.residual)
        assert rep.projection_gap < 1e-3


class TestCrossterm:
    def test_zero_when_one_part_vanishes(self, bench_cfg):
        x0 = build_initial(bench_cfg)
        z = constant_state(0.0, x0.window_lo, x0.window_hi)
        assert measure_crossterm(x0, z, bench_cfg.model, 0.0, 0.0, 0.3) == (0.0, 0.0)
        assert measure_crossterm(z, x0, bench_cfg.model, 0.0, 0.0, 0.3) == (0.0, 0.0)

    def test_split_has_no_interaction(self, bench_cfg):
        # the Heaviside split leaves disjoint supports, so the cross term vanishes exactly
        xm, xp = split_initial(bench_cfg, build_initial(bench_cfg))
        assert measure_crossterm(xm, xp, bench_cfg.model, 0.0, bench_cfg.c_bar, bench_cfg.weight) == (0.0, 0.0)

    def test_small_along_benchmark(self, bench_report):
        cl, cr = bench_report.crossterm_left, bench_report.crossterm_right
        assert cl[0] == 0.0 and cr[0] == 0.0
        assert np.all(cl[1:] > 0) and cl.max() < 1e-3 and cr.max() < 1e-3


class TestLogFit:
    def test_exact_exponential(self):
        t = np.linspace(0, 10, 41)
        slope, r2 = log_fit(t, 3.0 * np.exp(-0.7 * t))
        assert slope == pytest.approx(-0.7, abs=1e-12) and r2 == pytest.approx(1.0, abs=1e-12)

    def test_uses_final_fraction(self):
        t = np.linspace(0, 9, 10)
        v = np.where(t < 3, 1.0, np.exp(-(t - 3)))
        assert log_fit(t, v)[0] == pytest.approx(-1.0, abs=1e-12)

    def test_non_positive(self):
        assert math.isnan(log_fit([0, 1, 2], [0.0, 0.0, 0.0])[0])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.1, 10))
    def test_scale_invariant(self, rate, scale):
        t = np.linspace(0, 5, 16)
        v = np.exp(rate * t)
        assert log_fit(t, scale * v)[0] == pytest.approx(log_fit(t, v)[0], abs=1e-9)


class TestStacking:
    def test_glued_monotone(self, tristable_pair):
        model, pm, pp = tristable_pair
        cfg = ExitConfig(model, pm, pp, tau_minus=-20.0, tau_plus=20.0, t_end=30.0)
        assert is_monotone(build_initial(cfg))
        run = stacking_run(cfg, sample_every=2.0)
        assert run.monotone.all()
        assert np.all(np.diff(run.widths) > 0)
        assert run.relative_error < 0.05
        assert run.rows()[0][0] == 0.0

    def test_is_monotone(self):
        assert is_monotone(LatticeState(0, [0.0, 0.5, 1.0], 0.0, 1.0))
        assert not is_monotone(LatticeState(0, [0.0, 0.5, 0.4], 0.0, 1.0))
        assert not is_monotone(LatticeState(0, [0.0, 0.5, 1.0], 0.0, 0.9))
        assert is_monotone(LatticeState(0, [0.0, 1.0 - 1e-16, 1.0], 0.0, 1.0))

    def test_plateau_width(self):
        s = LatticeState(-5, np.array([-1, -1, -1, 0, 0, 0, 0, 1, 1, 1, 1], float), -1.0, 1.0)
        assert plateau_width(s) == pytest.approx(4.0)


class TestSweep:
    def test_empty(self, bench_cfg):
        assert sweep(bench_cfg, taus=[], deltas=[0.0]) == []
        assert sweep_csv([]).strip() == "tau_star,delta,seed,fitted_rate_a,fit_r2,peak_residual," \
                                         "gamma_minus_star,gamma_plus_star,status"

    def test_error_cells_recorded(self, bench_cfg):
        rows = sweep(replace(bench_cfg, window=(-80, 80)), taus=[60.0], deltas=[0.0])
        assert rows[0]["status"].startswith("error") and math.isnan(rows[0]["peak_residual"])

    def test_scaling_checks(self):
        def row(t, d, p):
            return {"tau_star": t, "delta": d, "seed": 0, "peak_residual": p, "status": "ok"}

        rows = [row(30, 0.0, 1e-3), row(30, 1e-2, 5e-3), row(60, 0.0, 1e-5), row(60, 1e-2, 2e-3)]
        out = scaling_checks(rows)
        assert out["monotone_in_delta"] == {30: True, 60: True}
        assert out["monotone_in_tau"] == {0.0: True, 1e-2: True}
        assert out["sqrt_delta_constant"][30] == pytest.approx(4e-3 / 0.1)
        rows.append(row(60, 1e-4, 1e-6))
        assert scaling_checks(rows)["monotone_in_delta"][60] is False


class TestBenchmark:
    def test_verdicts(self, bench_report):
        v = bench_report.verdicts()
        assert all(v.values()), v

    def test_distance_envelope(self, bench_report, bench_cfg):
        # distance(t) <= C exp(-a (t - t0)) from the first post-transient sample, up to the
        # integration error budget of the run (the distance bottoms out near 1e-10)
        rep = bench_report
        t = rep.times
        post = t >= t[0] + bench_cfg.transient_fraction * (t[-1] - t[0])
        i0 = int(np.argmax(post))
        env = rep.manifold_distance[i0] * np.exp(-rep.fitted_rate_a * (t[post] - t[i0]))
        assert np.all(rep.manifold_distance[post] <= env + rep.embed_bound)

    def test_weighted_deviations_finite(self, bench_report):
        assert np.all(np.isfinite(bench_report.dev_minus)) and np.all(np.isfinite(bench_report.dev_plus))

    def test_outputs(self, bench_report, tmp_path):
        paths = write_outputs(tmp_path, bench_report)
        lines = (tmp_path / "exit_report.csv").read_text().splitlines()
        assert lines[0].split(",")[:4] == ["t", "gamma_minus", "gamma_plus", "residual"]
        assert len(lines) == bench_report.times.size + 1
        doc = json.loads((tmp_path / "exit_summary.json").read_text())
        assert doc["fitted_rate_a"] == bench_report.fitted_rate_a
        assert doc["projection_gap"] == bench_report.projection_gap
        gp = (tmp_path / "plot_residual.gp").read_text()
        assert "exit_report.csv" in gp and "a_pred" in gp
        assert set(paths) == {"report", "summary", "plot"}
