"""Two counter-propagating waves: initial data, fits and decay measurements.

A left wave ``phi^-`` (speed ``c_-``) and a right wave ``phi^+`` (speed
``c_+ > c_-``) share the middle state, which is translated to zero. Starting
near the superposition ``phi^-(. - tau_-) + phi^+(. - tau_+)``, the solution
is tracked by fitting the shifts ``gamma^\\pm(t)`` in

    X(t) ~ phi^-(. - c_- t - tau_- - gamma^-) + phi^+(. - c_+ t - tau_+ - gamma^+).

The embedded pair ``(X^-, X^+)``, split by the Heaviside mask at ``c_bar t``,
is integrated alongside and compared to the direct solution.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from ._io import atomic_write_json, atomic_write_text, csv_text
from .lattice import HeavisideCutoff, LatticeState, apply_cutoff, sup_norm, weighted_norm
from .model import ModelError, ModelSpec, crossterm
from .stepper import IntegratorConfig, Trajectory, WindowError, integrate, integrate_embedded
from .floquet import build_monodromy, spectrum
from .waves import WaveProfile, reflect

__all__ = [
    "ExitConfig",
    "ExitRunReport",
    "FitError",
    "normalize_pair",
    "translate_profile",
    "front_back_pair",
    "build_initial",
    "perturbation",
    "fit_shifts",
    "fit_objective",
    "grid_scan",
    "manifold_distance",
    "AdjointMode",
    "adjoint_mode",
    "projection_shifts",
    "measure_crossterm",
    "run_direct",
    "run_embedded",
    "run_exit",
    "predicted_rates",
    "log_fit",
    "sweep",
    "is_monotone",
    "plateau_width",
    "stacking_run",
    "StackingRun",
    "scaling_checks",
    "report_csv",
    "summary_text",
    "plot_script",
    "write_outputs",
    "sweep_csv",
    "split_initial",
    "summary_dict",
]


class FitError(RuntimeError):
    """Shift fit failed or wandered beyond its trust region."""


# --- normalisation --------------------------------------------------------------


def translate_profile(profile: WaveProfile, e, model: ModelSpec | None = None) -> WaveProfile:
    """The same wave in the frame ``X - E`` of ``model.translated(E)``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    model = model or profile.model.translated(e)
    out = replace(profile, phi=profile.phi - e, alpha=profile.alpha - e, omega=profile.omega - e, model=model)
    return out


def normalize_pair(profile_minus: WaveProfile, profile_plus: WaveProfile, tol: float = 1e-9):
    """Translate so the shared middle state is zero.

    Returns ``(model, phi_minus, phi_plus)`` in the translated frame. The
    weight exponent of the returned model is the smaller of the two
    certified ``default_b`` values.
    """
    e = profile_minus.omega
    if np.abs(e - profile_plus.alpha).max() > tol:
        raise ModelError(f"incompatible pair: omega_- = {e.tolist()} but alpha_+ = {profile_plus.alpha.tolist()}")
    bs = [p.model.default_b for p in (profile_minus, profile_plus) if p.model.default_b]
    base = profile_plus.model
    model = base.translated(e) if np.any(e != 0) else base
    if bs:
        model = model.with_default_b(min(bs))
    return model, translate_profile(profile_minus, e, model), translate_profile(profile_plus, e, model)


def front_back_pair(front: WaveProfile):
    """Front ``phi^+`` and its mirror image ``phi^-(xi) = phi^+(-xi)``, normalised.

    The front must move right (``c > 0``) into the state it leaves behind on
    the left, so the two waves separate.
    """
    if front.c <= 0:
        raise ModelError("front_back_pair needs a right-moving front (c > 0)")
    back = reflect(front)
    return normalize_pair(back, front)


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class ExitConfig:
    """One exit experiment.

    ``window=None`` picks a window that holds both waves over ``[0, t_end]``
    with tails below 1e-13 at the edges.
    """

    model: ModelSpec
    profile_minus: WaveProfile
    profile_plus: WaveProfile
    tau_minus: float = -30.0
    tau_plus: float = 30.0
    delta: float = 0.0
    perturbation: str = "site"
    seed: int = 0
    pert_site: int | None = None
    t_end: float = 20.0
    sample_every: float | None = None
    b: float | None = None
    tau_star: float = 0.0
    window: tuple[int, int] | None = None
    rtol: float = 1e-9
    atol: float = 1e-11
    eps_max: float = 2.0
    lam: float | None = None
    transient_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        pm, pp = self.profile_minus, self.profile_plus
        if not pm.c < pp.c:
            raise ValueError(f"need c_- < c_+ (got {pm.c}, {pp.c})")
        if self.tau_plus - self.tau_minus < self.tau_star:
            raise ValueError(f"separation {self.tau_plus - self.tau_minus} below tau_star {self.tau_star}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if np.abs(pm.omega).max() > 1e-9 or np.abs(pp.alpha).max() > 1e-9:
            raise ValueError("profiles must share the middle state 0 (normalise the pair first)")
        if self.perturbation not in ("none", "site", "bump", "random"):
            raise ValueError(f"unknown perturbation {self.perturbation!r}")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")

    @property
    def c_minus(self) -> float:
        return self.profile_minus.c

    @property
    def c_plus(self) -> float:
        return self.profile_plus.c

    @property
    def c_bar(self) -> float:
        return 0.5 * (self.c_minus + self.c_plus)

    @property
    def weight(self) -> float:
        if self.b is not None:
            return float(self.b)
        bs = [p.model.default_b for p in (self.profile_minus, self.profile_plus) if p.model.default_b]
        if not bs:
            raise ValueError("no weight b given and profiles are not certified")
        return min(bs)

    @property
    def cadence(self) -> float:
        return self.sample_every or 0.25 / abs(self.c_plus - self.c_minus)

    def positions(self, t: float, gm: float = 0.0, gp: float = 0.0) -> tuple[float, float]:
        return self.c_minus * t + self.tau_minus + gm, self.c_plus * t + self.tau_plus + gp

    def resolved_window(self) -> tuple[int, int]:
        pm, pp = self.profile_minus, self.profile_plus
        rates = [r for p in (pm, pp) for r in (p.decay_rate or (0.3, 0.3))]
        margin = int(math.ceil(math.log(1e13) / min(rates))) + self.model.radius + 6
        left = min(self.tau_minus, self.tau_minus + self.c_minus * self.t_end)
        right = max(self.tau_plus, self.tau_plus + self.c_plus * self.t_end)
        need = (int(math.floor(left)) - margin, int(math.ceil(right)) + margin)
        if self.window is None:
            return need
        lo, hi = self.window
        if lo > need[0] or hi < need[1]:
            raise WindowError(f"window [{lo}, {hi}] too small; need at least [{need[0]}, {need[1]}]")
        return lo, hi

    def describe(self) -> dict:
        return {
            "model": self.model.name, "params": self.model.params,
            "c_minus": self.c_minus, "c_plus": self.c_plus, "c_bar": self.c_bar,
            "tau_minus": self.tau_minus, "tau_plus": self.tau_plus, "tau_star": self.tau_star,
            "delta": self.delta, "perturbation": self.perturbation, "seed": self.seed,
            "pert_site": self.pert_site, "t_end": self.t_end, "sample_every": self.cadence,
            "b": self.weight, "window": list(self.resolved_window()), "rtol": self.rtol, "atol": self.atol,
            "eps_max": self.eps_max, "lambda": self.lam, "transient_fraction": self.transient_fraction,
        }


def perturbation(cfg: ExitConfig, lo: int, hi: int) -> np.ndarray:
    """Perturbation shape on sites ``lo..hi`` with sup-norm exactly ``delta``."""
    n = cfg.model.n
    W = hi - lo + 1
    j = np.arange(lo, hi + 1)
    j0 = cfg.pert_site if cfg.pert_site is not None else int(round(0.5 * (cfg.tau_minus + cfg.tau_plus)))
    if cfg.delta == 0 or cfg.perturbation == "none":
        return np.zeros((W, n))
    if cfg.perturbation == "site":
        p = np.zeros((W, n))
        p[j == j0] = 1.0
    elif cfg.perturbation == "bump":
        p = np.repeat(np.exp(-0.5 * ((j - j0) / 2.0) ** 2)[:, None], n, axis=1)
    else:
        p = np.random.default_rng(cfg.seed).uniform(-1.0, 1.0, size=(W, n))
    return cfg.delta * p / np.abs(p).max()


def superposition(cfg: ExitConfig, lo: int, hi: int, s_minus: float, s_plus: float) -> np.ndarray:
    j = np.arange(lo, hi + 1, dtype=float)
    return cfg.profile_minus.evaluate(j - s_minus) + cfg.profile_plus.evaluate(j - s_plus)


def build_initial(cfg: ExitConfig) -> LatticeState:
    """``phi^-(. - tau_-) + phi^+(. - tau_+) + delta * perturbation``."""
    lo, hi = cfg.resolved_window()
    vals = superposition(cfg, lo, hi, cfg.tau_minus, cfg.tau_plus) + perturbation(cfg, lo, hi)
    return LatticeState(lo, vals, cfg.profile_minus.alpha, cfg.profile_plus.omega)


# --- shift fitting --------------------------------------------------------------


class _Objective:
    """Half-lattice sup-norm errors of the two-wave ansatz at absolute positions."""

    def __init__(self, cfg: ExitConfig, state: LatticeState, split: float):
        self.cfg = cfg
        self.j = state.sites().astype(float)
        self.X = state.values
        self.left = self.j <= split
        self.right = ~self.left
        self.nevals = 0

    def halves(self, s_minus: float, s_plus: float) -> tuple[float, float]:
        self.nevals += 1
        u = self.cfg.profile_minus.evaluate(self.j - s_minus) + self.cfg.profile_plus.evaluate(self.j - s_plus)
        err = np.abs(self.X - u).max(axis=1)
        rl = float(err[self.left].max()) if self.left.any() else 0.0
        rr = float(err[self.right].max()) if self.right.any() else 0.0
        return rl, rr

    def total(self, s_minus, s_plus) -> float:
        rl, rr = self.halves(s_minus, s_plus)
        return rl + rr

    def sup(self, s_minus, s_plus) -> float:
        return max(self.halves(s_minus, s_plus))


def _line_search(f, x0: float, radius: float, xtol: float, max_expand: int = 8,
                 limits: tuple[float, float] = (-math.inf, math.inf)) -> float:
    """Golden-section minimisation on ``[x0 - radius, x0 + radius]``, recentred if the minimum hits an end.

    The interval is clipped to ``limits``; a minimum on a limit is accepted.
    """
    centre = x0
    for _ in range(max_expand):
        lo, hi = max(centre - radius, limits[0]), min(centre + radius, limits[1])
        if hi - lo <= xtol:
            return float(min(max(centre, limits[0]), limits[1]))
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": xtol, "maxiter": 500})
        x = float(res.x)
        at_lo, at_hi = x - lo < 1e-3 * radius, hi - x < 1e-3 * radius
        if not (at_lo or at_hi) or (at_lo and lo > centre - radius) or (at_hi and hi < centre + radius):
            return x
        centre = x
    return x


def fit_objective(cfg: ExitConfig, state: LatticeState, t: float, gm: float, gp: float) -> float:
    """Sum of the left- and right-half sup-norm errors at shifts ``(gm, gp)``."""
    sm, sp_ = cfg.positions(t, gm, gp)
    return _Objective(cfg, state, 0.5 * (sm + sp_)).total(sm, sp_)


def fit_shifts(state: LatticeState, cfg: ExitConfig, t: float, warm_start=(0.0, 0.0),
               xtol: float = 1e-10, radius: float = 0.5, max_sweeps: int = 30):
    """Fit ``(gamma^-, gamma^+)`` at time ``t``.

    Coordinate descent alternates golden-section line searches in each
    shift, minimising the sum of the sup-norm errors on the two halves of the
    lattice (split at the midpoint between the waves). Returns
    ``(gamma^-, gamma^+, residual)`` with the full sup-norm residual.
    """
    gm, gp = (float(g) for g in warm_start)
    sm0, sp0 = cfg.positions(t)
    obj = _Objective(cfg, state, 0.5 * (sm0 + sp0 + gm + gp))
    for sweep_no in range(max_sweeps):
        gm_new = _line_search(lambda g: obj.total(sm0 + g, sp0 + gp), gm, radius, xtol)
        gp_new = _line_search(lambda g: obj.total(sm0 + gm_new, sp0 + g), gp, radius, xtol)
        change = max(abs(gm_new - gm), abs(gp_new - gp))
        gm, gp = gm_new, gp_new
        if max(abs(gm), abs(gp)) > cfg.eps_max:
            raise FitError(f"fitted shifts ({gm:.3f}, {gp:.3f}) left the trust region +-{cfg.eps_max} at t={t}")
        if change < 10 * xtol:
            break
        radius = max(min(radius, 4 * change), 1e-6)
    else:
        raise FitError(f"shift fit did not converge in {max_sweeps} sweeps at t={t}")
    return gm, gp, obj.sup(sm0 + gm, sp0 + gp)


def grid_scan(state: LatticeState, cfg: ExitConfig, t: float, centre=(0.0, 0.0), half_width: float = 0.6,
              step: float = 0.05) -> tuple[float, float, float]:
    """Brute-force minimum of the fit objective on a square grid of shifts.

    Evaluates the same half-lattice objective as :func:`fit_shifts` at every
    node of ``centre + [-half_width, half_width]^2`` with spacing ``step``
    and returns ``(gamma^-, gamma^+, objective)`` at the best node.
    """
    k = int(round(half_width / step))
    offs = step * np.arange(-k, k + 1)
    sm0, sp0 = cfg.positions(t)
    obj = _Objective(cfg, state, 0.5 * (sm0 + sp0 + centre[0] + centre[1]))
    vals = np.array([[obj.total(sm0 + centre[0] + a, sp0 + centre[1] + b) for b in offs] for a in offs])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return float(centre[0] + offs[i]), float(centre[1] + offs[j]), float(vals[i, j])


def manifold_distance(state: LatticeState, cfg: ExitConfig, t: float, seed_shifts=(0.0, 0.0),
                      xtol: float = 1e-10, max_sweeps: int = 30) -> float:
    """Sup-norm distance to the two-wave superpositions, minimised over both positions.

    Positions are constrained to ``s_+ - s_- >= tau_star``. The descent starts
    from ``seed_shifts`` and only accepts improvements, so the value never
    exceeds the residual at the seed.
    """
    s = list(cfg.positions(t, *seed_shifts))
    obj = _Objective(cfg, state, 0.5 * (s[0] + s[1]))
    best = obj.sup(*s)
    radius = 0.25
    for _ in range(max_sweeps):
        improved = 0.0
        for k in (0, 1):
            def f(x, k=k):
                trial = list(s)
                trial[k] = x
                return obj.sup(*trial)

            limits = (-math.inf, s[1] - cfg.tau_star) if k == 0 else (s[0] + cfg.tau_star, math.inf)
            x = _line_search(f, s[k], radius, xtol, max_expand=1, limits=limits)
            v = f(x)
            if v < best:
                improved = max(improved, best - v)
                s[k], best = x, v
        if improved <= 1e-15 * max(best, 1e-300):
            break
        radius = max(radius * 0.5, 1e-6)
    return best


# --- projection onto the translation mode -------------------------------------------


@dataclass(frozen=True)
class AdjointMode:
    """Left eigenvector of the unit Floquet eigenvalue, scaled so that ``<psi, phi'> = 1``.

    ``psi`` has shape ``(W, n)`` on sites ``lo .. lo + W - 1`` relative to the
    wave position.
    """

    lo: int
    psi: np.ndarray


def adjoint_mode(profile: WaveProfile, window=None, cfg: IntegratorConfig | None = None) -> AdjointMode:
    """Adjoint translation mode of ``profile`` from its (unweighted) monodromy matrix."""
    M = build_monodromy(profile.model, profile, window, cfg)
    rep = spectrum(M)
    d = profile.derivative(np.arange(M.lo, M.hi + 1, dtype=float)).reshape(-1)
    v = rep.leading_left
    s = np.vdot(v, d)
    if abs(s) < 1e-12 * np.linalg.norm(v) * np.linalg.norm(d):
        raise ValueError("left unit eigenvector is orthogonal to phi'; the translation mode is degenerate")
    psi = (v / np.conj(s)).real
    return AdjointMode(M.lo, psi.reshape(M.width, M.n))


def projection_shifts(state: LatticeState, cfg: ExitConfig, t: float, gm: float, gp: float,
                      modes: tuple[AdjointMode, AdjointMode]) -> tuple[float, float]:
    """Shifts from projecting the fit residual onto each wave's adjoint translation mode.

    One linearised step from the fitted shifts: ``gamma + <psi, R> / <psi, -phi'>``
    with ``psi`` placed at the nearest lattice site of the wave. This is an
    independent extraction of ``gamma^\\pm`` to compare with the sup-norm fit;
    it ignores the sub-site phase of the wave and weighs the residual
    differently from the sup-norm, so the two agree in proportion to the
    residual, not to fit precision.
    """
    lo = state.window_lo
    j = state.sites()
    sm, sp_ = cfg.positions(t, gm, gp)
    R = state.values - superposition(cfg, lo, state.window_hi, sm, sp_)
    out = []
    for s, g, mode, prof in ((sm, gm, modes[0], cfg.profile_minus), (sp_, gp, modes[1], cfg.profile_plus)):
        sites = np.arange(mode.lo, mode.lo + mode.psi.shape[0]) + int(round(s))
        inside = (sites >= j[0]) & (sites <= j[-1])
        psi = mode.psi[inside]
        dphi = prof.derivative(sites[inside] - s).reshape(psi.shape)
        denom = float(np.sum(psi * dphi))
        out.append(g - float(np.sum(psi * R[sites[inside] - lo])) / denom)
    return out[0], out[1]


# --- interaction term -----------------------------------------------------------


def measure_crossterm(x_minus: LatticeState, x_plus: LatticeState, model: ModelSpec, t: float,
                      c_bar: float, b: float) -> tuple[float, float]:
    """``(||H^-(t) C||_b, ||H^+(t) C||_{-b})`` with ``C = G(X^- + X^+) - G(X^-) - G(X^+)``."""
    C = crossterm(model, x_minus, x_plus)
    left = apply_cutoff(HeavisideCutoff(c_bar, "left", t), C)
    right = apply_cutoff(HeavisideCutoff(c_bar, "right", t), C)
    return weighted_norm(b, left), weighted_norm(-b, right)


# --- runs -----------------------------------------------------------------------


def log_fit(times, values, fraction: float = 2.0 / 3.0) -> tuple[float, float]:
    """Least-squares slope and ``R^2`` of ``log values`` over the final ``fraction`` of samples."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    k = max(3, int(math.ceil(fraction * t.size)))
    t, v = t[-k:], v[-k:]
    ok = v > 0
    if ok.sum() < 3:
        return math.nan, math.nan
    t, y = t[ok], np.log(v[ok])
    slope, icpt = np.polyfit(t, y, 1)
    ss_res = float(np.sum((y - (slope * t + icpt)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def predicted_rates(cfg: ExitConfig) -> dict:
    """``b* = (b/4)(c_+ - c_-)`` and ``a_pred = min(lambda/4, b*)``."""
    b = cfg.weight
    b_star = 0.25 * b * (cfg.c_plus - cfg.c_minus)
    out = {"b": b, "b_star": b_star, "lambda": cfg.lam,
           "crossterm_rate_pred": 0.5 * b * (cfg.c_plus - cfg.c_minus)}
    out["a_pred"] = min(cfg.lam / 4.0, b_star) if cfg.lam is not None else b_star
    return out


@dataclass
class ExitRunReport:
    times: np.ndarray
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    residual: np.ndarray
    manifold_distance: np.ndarray
    fitted_rate_a: float = math.nan
    fit_r2: float = math.nan
    gamma_limits: tuple[float, float] = (math.nan, math.nan)
    gamma_convergence_error: tuple[float, float] = (math.nan, math.nan)
    crossterm_left: np.ndarray | None = None
    crossterm_right: np.ndarray | None = None
    crossterm_rate: float = math.nan
    crossterm_r2: float = math.nan
    dev_minus: np.ndarray | None = None
    dev_plus: np.ndarray | None = None
    embed_series: np.ndarray | None = None
    embed_consistency: float = math.nan
    embed_bound: float = math.nan
    gamma_proj_minus: np.ndarray | None = None
    gamma_proj_plus: np.ndarray | None = None
    projection_gap: float = math.nan
    predicted: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step_stats: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def peak_residual(self, transient_fraction: float = 1.0 / 3.0) -> float:
        t = self.times
        sel = t >= t[0] + transient_fraction * (t[-1] - t[0])
        return float(self.residual[sel].max())

    def verdicts(self) -> dict:
        p = self.predicted
        v = {
            "residual_decays": bool(self.fitted_rate_a > 0),
            "fit_r2_above_0.98": bool(self.fit_r2 > 0.98),
            "distance_below_residual": bool(np.all(self.manifold_distance <= self.residual)),
            "gamma_converged_1e-4": bool(max(self.gamma_convergence_error) < 1e-4),
        }
        if "a_pred" in p:
            v["rate_at_least_half_predicted"] = bool(self.fitted_rate_a >= 0.5 * p["a_pred"])
        if self.crossterm_left is not None and "crossterm_rate_pred" in p:
            v["crossterm_slope_ok"] = bool(self.crossterm_rate <= -0.8 * p["crossterm_rate_pred"])
        if self.embed_series is not None:
            v["embedding_consistent"] = bool(self.embed_consistency <= self.embed_bound)
        return v


def _direct_trajectory(cfg: ExitConfig, x0: LatticeState) -> Trajectory:
    icfg = IntegratorConfig(rtol=cfg.rtol, atol=cfg.atol, t_span=(0.0, cfg.t_end), sample_every=cfg.cadence)
    return integrate(cfg.model, x0, icfg)


def run_direct(cfg: ExitConfig, traj: Trajectory | None = None,
               modes: tuple[AdjointMode, AdjointMode] | None = None) -> tuple[ExitRunReport, Trajectory]:
    """Integrate the original system and fit the shifts at every sample.

    With adjoint ``modes`` the shifts are also extracted by projection and
    the largest post-transient disagreement with the fit is reported as
    ``projection_gap``.
    """
    x0 = build_initial(cfg)
    traj = traj or _direct_trajectory(cfg, x0)
    gms, gps, res, dist = [], [], [], []
    warm = (0.0, 0.0)
    for t, s in zip(traj.times, traj.states):
        gm, gp, r = fit_shifts(s, cfg, t, warm)
        d = manifold_distance(s, cfg, t, (gm, gp))
        gms.append(gm)
        gps.append(gp)
        res.append(r)
        dist.append(d)
        warm = (gm, gp)
    times = traj.times
    rep = ExitRunReport(times, np.array(gms), np.array(gps), np.array(res), np.array(dist))
    slope, r2 = log_fit(times, rep.residual, 1.0 - cfg.transient_fraction)
    rep.fitted_rate_a, rep.fit_r2 = -slope, r2
    k = max(2, int(math.ceil(0.1 * times.size)))
    rep.gamma_limits = (float(rep.gamma_minus[-1]), float(rep.gamma_plus[-1]))
    rep.gamma_convergence_error = (float(np.ptp(rep.gamma_minus[-k:])), float(np.ptp(rep.gamma_plus[-k:])))
    if modes is not None:
        proj = np.array([projection_shifts(s, cfg, t, gm, gp, modes)
                         for t, s, gm, gp in zip(times, traj.states, rep.gamma_minus, rep.gamma_plus)])
        rep.gamma_proj_minus, rep.gamma_proj_plus = proj[:, 0], proj[:, 1]
        post = times >= times[0] + cfg.transient_fraction * (times[-1] - times[0])
        rep.projection_gap = float(max(np.abs(proj[post, 0] - rep.gamma_minus[post]).max(),
                                       np.abs(proj[post, 1] - rep.gamma_plus[post]).max()))
    rep.predicted = predicted_rates(cfg)
    rep.config = cfg.describe()
    rep.step_stats = {"direct": traj.step_stats.as_dict()}
    return rep, traj


def split_initial(cfg: ExitConfig, x0: LatticeState, t0: float = 0.0):
    """``X^\\pm(t_0) = H^\\pm(t_0) X(t_0)``."""
    xm = apply_cutoff(HeavisideCutoff(cfg.c_bar, "left", t0), x0)
    xp = apply_cutoff(HeavisideCutoff(cfg.c_bar, "right", t0), x0)
    return xm, xp


def run_embedded(cfg: ExitConfig, direct: ExitRunReport | None = None,
                 direct_traj: Trajectory | None = None) -> ExitRunReport:
    """Integrate the embedded pair and compare it with the direct run.

    The direct run (computed if not supplied) provides the shifts used for
    the weighted per-component deviations and the reference for the
    embedding consistency.
    """
    if direct is None or direct_traj is None:
        direct, direct_traj = run_direct(cfg)
    x0 = build_initial(cfg)
    xm, xp = split_initial(cfg, x0)
    icfg = IntegratorConfig(rtol=cfg.rtol, atol=cfg.atol, t_span=(0.0, cfg.t_end), sample_every=cfg.cadence)
    traj = integrate_embedded(cfg.model, xm, xp, cfg.c_bar, icfg)
    if not np.allclose(traj.times, direct_traj.times, rtol=0, atol=1e-12):
        raise RuntimeError("embedded and direct sample times differ")
    b = cfg.weight
    cl, cr, dm, dp, emb = [], [], [], [], []
    xnorm = 0.0
    for k, (t, (a, bb)) in enumerate(zip(traj.times, traj.states)):
        left, right = measure_crossterm(a, bb, cfg.model, t, cfg.c_bar, b)
        cl.append(left)
        cr.append(right)
        sm, sp_ = cfg.positions(t, direct.gamma_minus[k], direct.gamma_plus[k])
        dm.append(weighted_norm(b, a - cfg.profile_minus.lattice_state(a.window_lo, a.window_hi, sm)))
        dp.append(weighted_norm(-b, bb - cfg.profile_plus.lattice_state(bb.window_lo, bb.window_hi, sp_)))
        X = direct_traj.states[k]
        emb.append(sup_norm((a + bb) - X))
        xnorm = max(xnorm, sup_norm(X))
    rep = replace(direct)
    rep.crossterm_left = np.array(cl)
    rep.crossterm_right = np.array(cr)
    slope, r2 = log_fit(traj.times, rep.crossterm_left, 1.0 - cfg.transient_fraction)
    rep.crossterm_rate, rep.crossterm_r2 = slope, r2
    rep.dev_minus = np.array(dm)
    rep.dev_plus = np.array(dp)
    rep.embed_series = np.array(emb)
    rep.embed_consistency = float(np.max(emb))
    rep.embed_bound = 10.0 * (cfg.rtol * xnorm + cfg.atol)
    rep.step_stats = dict(direct.step_stats, embedded=traj.step_stats.as_dict())
    return rep


def run_exit(cfg: ExitConfig, embedded: bool = True,
             modes: tuple[AdjointMode, AdjointMode] | None = None) -> ExitRunReport:
    """Direct run plus (optionally) the embedded run, merged into one report."""
    rep, traj = run_direct(cfg, modes=modes)
    if embedded:
        rep = run_embedded(cfg, rep, traj)
    return rep


# --- front stacking ----------------------------------------------------------


def is_monotone(state: LatticeState, component: int = 0, ulps: float = 4.0) -> bool:
    """Non-decreasing in ``j`` up to a few units of round-off of the state scale.

    Tail deviations below machine resolution round to the limit value from
    either side, so exact comparisons would flag one-ulp wiggles.
    """
    v = np.concatenate(([state.tail_left[component]], state.values[:, component], [state.tail_right[component]]))
    tol = ulps * np.finfo(float).eps * max(1.0, float(np.max(np.abs(v))))
    return bool(np.all(np.diff(v) >= -tol))


def plateau_width(state: LatticeState, levels=(-0.5, 0.5), component: int = 0) -> float:
    """Distance between the crossings of ``levels[1]`` and ``levels[0]``."""
    from .waves import level_crossing

    return float(level_crossing(state, levels[1], component) - level_crossing(state, levels[0], component))


@dataclass
class StackingRun:
    """Plateau between two monotone fronts sharing a middle equilibrium."""

    times: np.ndarray
    widths: np.ndarray
    monotone: np.ndarray
    rate: float
    predicted_rate: float

    @property
    def relative_error(self) -> float:
        return abs(self.rate / self.predicted_rate - 1.0)

    def rows(self):
        return [(t, w, int(m)) for t, w, m in zip(self.times, self.widths, self.monotone)]


def stacking_run(cfg: ExitConfig, levels=(-0.5, 0.5), sample_every: float = 1.0,
                 middle: float = 0.0) -> StackingRun:
    """Integrate the glued configuration and track the plateau width.

    The rate is the least-squares slope of the width over the last two
    thirds of the run; the prediction is ``c_+ - c_-``. Levels are given in
    the original coordinates of the model; ``middle`` is the (first
    component of the) shared state that was translated to zero.
    """
    shift = middle
    x0 = build_initial(cfg)
    icfg = IntegratorConfig(rtol=cfg.rtol, atol=cfg.atol, t_span=(0.0, cfg.t_end), sample_every=sample_every)
    traj = integrate(cfg.model, x0, icfg)
    lv = (levels[0] - shift, levels[1] - shift)
    widths = np.array([plateau_width(s, lv) for s in traj.states])
    mono = np.array([is_monotone(s) for s in traj.states])
    k = traj.times.size // 3
    rate = float(np.polyfit(traj.times[k:], widths[k:], 1)[0])
    return StackingRun(traj.times, widths, mono, rate, cfg.profile_plus.c - cfg.profile_minus.c)


# --- sweeps ---------------------------------------------------------------------


SWEEP_COLUMNS = ["tau_star", "delta", "seed", "fitted_rate_a", "fit_r2", "peak_residual",
                 "gamma_minus_star", "gamma_plus_star", "status"]


def _sweep_cell(args):
    template, tau, delta, seed = args
    cfg = replace(template, tau_minus=-0.5 * tau, tau_plus=0.5 * tau, tau_star=min(template.tau_star, tau),
                  delta=delta, seed=seed)
    try:
        rep, _ = run_direct(cfg)
        return {"tau_star": tau, "delta": delta, "seed": seed, "fitted_rate_a": rep.fitted_rate_a,
                "fit_r2": rep.fit_r2, "peak_residual": rep.peak_residual(cfg.transient_fraction),
                "gamma_minus_star": rep.gamma_limits[0], "gamma_plus_star": rep.gamma_limits[1], "status": "ok"}
    except Exception as exc:  # per-cell failures are recorded, the sweep continues
        return {"tau_star": tau, "delta": delta, "seed": seed, "fitted_rate_a": math.nan, "fit_r2": math.nan,
                "peak_residual": math.nan, "gamma_minus_star": math.nan, "gamma_plus_star": math.nan,
                "status": f"error: {type(exc).__name__}: {exc}".replace(",", ";")}


def sweep(template: ExitConfig, taus=(), deltas=(), seeds=(0,), jobs: int = 1) -> list[dict]:
    """Run the direct experiment on every ``(tau_star, delta, seed)`` cell.

    Waves start symmetrically at ``-+tau/2``. Rows come back in the
    iteration order of the grid regardless of ``jobs``.
    """
    cells = [(template, float(t), float(d), int(s)) for t in taus for d in deltas for s in seeds]
    if not cells:
        return []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def scaling_checks(rows: list[dict]) -> dict:
    """Monotonicity of the peak residual in ``delta`` (increasing) and ``tau`` (decreasing).

    Also reports, per ``tau``, the smallest ``K`` with
    ``peak(delta) <= peak(0) + K sqrt(delta)``.
    """
    ok = [r for r in rows if r["status"] == "ok"]
    out: dict = {"monotone_in_delta": {}, "monotone_in_tau": {}, "sqrt_delta_constant": {}}
    taus = sorted({r["tau_star"] for r in ok})
    deltas = sorted({r["delta"] for r in ok})

    def peak(t, d):
        v = [r["peak_residual"] for r in ok if r["tau_star"] == t and r["delta"] == d]
        return max(v) if v else math.nan

    for t in taus:
        seq = [peak(t, d) for d in deltas if not math.isnan(peak(t, d))]
        if len(seq) > 1:
            out["monotone_in_delta"][t] = bool(all(a < b for a, b in zip(seq, seq[1:])))
        if 0.0 in deltas:
            p0 = peak(t, 0.0)
            ks = [(peak(t, d) - p0) / math.sqrt(d) for d in deltas if d > 0]
            out["sqrt_delta_constant"][t] = max(ks) if ks else math.nan
    for d in deltas:
        seq = [peak(t, d) for t in taus if not math.isnan(peak(t, d))]
        if len(seq) > 1:
            out["monotone_in_tau"][d] = bool(all(a > b for a, b in zip(seq, seq[1:])))
    return out


# --- outputs --------------------------------------------------------------------


REPORT_COLUMNS = ["t", "gamma_minus", "gamma_plus", "residual", "crossterm_left", "crossterm_right",
                  "manifold_distance", "embed_consistency"]


def report_csv(rep: ExitRunReport) -> str:
    nan = np.full(rep.times.shape, math.nan)
    cols = [rep.times, rep.gamma_minus, rep.gamma_plus, rep.residual,
            rep.crossterm_left if rep.crossterm_left is not None else nan,
            rep.crossterm_right if rep.crossterm_right is not None else nan,
            rep.manifold_distance,
            rep.embed_series if rep.embed_series is not None else nan]
    return csv_text(REPORT_COLUMNS, np.column_stack(cols).tolist())


def summary_dict(rep: ExitRunReport) -> dict:
    return {
        "fitted_rate_a": rep.fitted_rate_a,
        "fit_r2": rep.fit_r2,
        "gamma_limits": list(rep.gamma_limits),
        "gamma_convergence_error": list(rep.gamma_convergence_error),
        "crossterm_rate": rep.crossterm_rate,
        "crossterm_r2": rep.crossterm_r2,
        "embed_consistency": rep.embed_consistency,
        "embed_bound": rep.embed_bound,
        "projection_gap": rep.projection_gap,
        "projection_gap_final": None if rep.gamma_proj_minus is None else float(max(
            abs(rep.gamma_proj_minus[-1] - rep.gamma_minus[-1]), abs(rep.gamma_proj_plus[-1] - rep.gamma_plus[-1]))),
        "peak_residual": rep.peak_residual(rep.config.get("transient_fraction", 1 / 3)),
        "max_weighted_dev_minus": None if rep.dev_minus is None else float(np.max(rep.dev_minus)),
        "max_weighted_dev_plus": None if rep.dev_plus is None else float(np.max(rep.dev_plus)),
        "predicted": rep.predicted,
        "verdicts": rep.verdicts(),
        "config": rep.config,
        "step_stats": rep.step_stats,
        "notes": rep.notes,
    }


def summary_text(rep: ExitRunReport) -> str:
    import json

    return json.dumps(summary_dict(rep), indent=2, sort_keys=True, default=float) + "\n"


def plot_script(csv_name: str, rep: ExitRunReport) -> str:
    """gnuplot script: log residual against t with the predicted-rate reference line."""
    a = rep.predicted.get("a_pred", math.nan)
    t = rep.times
    sel = t >= t[0] + (t[-1] - t[0]) / 3.0
    r0 = float(rep.residual[sel][0]) if sel.any() else 1.0
    t0 = float(t[sel][0]) if sel.any() else 0.0
    return "\n".join([
        "# gnuplot script: residual decay of the exit experiment",
        "set datafile separator ','",
        "set key top right",
        "set logscale y",
        "set xlabel 't'",
        "set ylabel 'sup-norm residual'",
        f"a_pred = {a!r}",
        f"a_fit = {rep.fitted_rate_a!r}",
        f"r0 = {r0!r}",
        f"t0 = {t0!r}",
        f"plot '{csv_name}' using 1:4 skip 1 with lines title 'residual', \\",
        f"     '{csv_name}' using 1:7 skip 1 with lines title 'manifold distance', \\",
        "     r0*exp(-a_pred*(x-t0)) with lines dashtype 2 title 'predicted rate', \\",
        "     r0*exp(-a_fit*(x-t0)) with lines dashtype 3 title 'fitted rate'",
        "",
    ])


def write_outputs(outdir, rep: ExitRunReport) -> dict:
    outdir = Path(outdir)
    paths = {
        "report": atomic_write_text(outdir / "exit_report.csv", report_csv(rep)),
        "summary": atomic_write_json(outdir / "exit_summary.json", summary_dict(rep)),
        "plot": atomic_write_text(outdir / "plot_residual.gp", plot_script("exit_report.csv", rep)),
    }
    return {k: str(v) for k, v in paths.items()}


def sweep_csv(rows: list[dict]) -> str:
    return csv_text(SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
