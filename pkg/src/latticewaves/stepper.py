"""Explicit Runge-Kutta integration of truncated lattice systems.

Two schemes are available: classical fixed-step RK4 and the adaptive
Dormand-Prince 5(4) pair. Steps never cross a breakpoint; breakpoints are
the output sample times plus any discontinuity times of the right-hand side
(the Heaviside mask switches of the embedded system).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._io import atomic_write_text, csv_text
from .lattice import LatticeState, format_state, right_mask
from .model import (
    BlowUpError,
    ModelSpec,
    functionals_on_padded,
    linear_on_padded,
    pad_values,
    window_rhs,
    window_rhs_embedded,
)

__all__ = [
    "IntegratorConfig",
    "StepStats",
    "Trajectory",
    "StepSizeUnderflow",
    "WindowError",
    "integrate",
    "integrate_embedded",
    "integrate_variational",
    "variational_flow",
    "solve_arrays",
    "export_trajectory",
]


class StepSizeUnderflow(RuntimeError):
    """Adaptive step size fell below ``h_min``."""


class WindowError(ValueError):
    """The computational window is too small for the requested run."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Integration settings.

    ``method`` is ``"rk4"`` (fixed step ``dt``) or ``"dopri5"`` (adaptive,
    controlled by ``rtol``/``atol`` in the max norm). ``sample_every=None``
    stores only the end points.
    """

    method: str = "dopri5"
    dt: float = 0.01
    rtol: float = 1e-9
    atol: float = 1e-11
    t_span: tuple[float, float] = (0.0, 1.0)
    sample_every: float | None = None
    h_min: float = 1e-12
    max_steps: int = 5_000_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        t0, t1 = self.t_span
        if not t1 > t0:
            raise ValueError("t_span must satisfy t1 > t0")
        if self.sample_every is not None and not self.sample_every > 0:
            raise ValueError("sample_every must be positive")
        object.__setattr__(self, "t_span", (float(t0), float(t1)))

    def with_span(self, t0: float, t1: float) -> "IntegratorConfig":
        from dataclasses import replace

        return replace(self, t_span=(float(t0), float(t1)))

    def sample_times(self) -> np.ndarray:
        t0, t1 = self.t_span
        if self.sample_every is None:
            return np.array([t0, t1])
        k = int(math.floor((t1 - t0) / self.sample_every + 1e-9))
        ts = t0 + self.sample_every * np.arange(k + 1)
        if t1 - ts[-1] > 1e-9 * max(1.0, abs(t1)):
            ts = np.append(ts, t1)
        else:
            ts[-1] = t1
        return ts


@dataclass
class StepStats:
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0
    max_error: float = 0.0

    def as_dict(self) -> dict:
        return {"accepted": self.accepted, "rejected": self.rejected, "nfev": self.nfev,
                "max_error": self.max_error}


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution; ``states`` holds states or ``(X-, X+)`` pairs."""

    times: np.ndarray
    states: list
    step_stats: StepStats = field(default_factory=StepStats)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def final(self):
        return self.states[-1]


# --- Butcher tableaux ---------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
# fifth-order weights minus embedded fourth-order weights
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _dp_step(f, t, y, h, k1):
    ks = [k1]
    for i in range(1, 7):
        acc = y.copy()
        for j, a in enumerate(_DP_A[i]):
            if a != 0.0:
                acc += (h * a) * ks[j]
        if i == 6:
            y_new = acc
        ks.append(f(t + _DP_C[i] * h, acc))
    err = h * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
    return y_new, ks[6], err


def _initial_step(f, t, y, f0, rtol, atol, span):
    scale = atol + rtol * np.abs(y)
    d0 = np.max(np.abs(y) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y + h0 * f0
    d2 = np.max(np.abs(f(t + h0, y1) - f0) / scale) / h0
    h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def solve_arrays(
    make_rhs: Callable[[float, float], Callable],
    y0: np.ndarray,
    cfg: IntegratorConfig,
    breakpoints=(),
    on_sample: Callable[[float, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, list[np.ndarray], StepStats]:
    """Integrate ``y' = f(t, y)`` segment by segment.

    ``make_rhs(a, b)`` returns the right-hand side valid on the open interval
    ``(a, b)`` between consecutive breakpoints.
    """
    t0, t1 = cfg.t_span
    samples = cfg.sample_times()
    bps = sorted(set(samples.tolist()) | {float(b) for b in breakpoints if t0 < b < t1})
    sample_set = set(samples.tolist())
    stats = StepStats()
    y = np.array(y0, dtype=float)
    out_t, out_y = [t0], [y.copy()]
    if on_sample is not None:
        on_sample(t0, y)
    h_nat = None
    for a, b in zip(bps[:-1], bps[1:]):
        raw = make_rhs(a, b)

        def f(t, yy, raw=raw):
            stats.nfev += 1
            return raw(t, yy)

        if cfg.method == "rk4":
            nsteps = max(1, int(math.ceil((b - a) / cfg.dt - 1e-9)))
            h = (b - a) / nsteps
            for i in range(nsteps):
                y = _rk4_step(f, a + i * h, y, h)
                stats.accepted += 1
            if not np.all(np.isfinite(y)):
                raise BlowUpError(f"non-finite state at t={b}")
        else:
            y, h_nat = _adaptive_segment(f, a, b, y, cfg, stats, h_nat)
        if b in sample_set:
            out_t.append(b)
            out_y.append(y.copy())
            if on_sample is not None:
                on_sample(b, y)
        if stats.accepted + stats.rejected > cfg.max_steps:
            raise StepSizeUnderflow("maximum number of steps exceeded")
    return np.array(out_t), out_y, stats


def _adaptive_segment(f, a, b, y, cfg, stats, h_nat):
    t = a
    k1 = f(t, y)
    if h_nat is None:
        h_nat = _initial_step(f, t, y, k1, cfg.rtol, cfg.atol, b - a)
    while t < b:
        last = t + h_nat >= b - 1e-14 * max(1.0, abs(b))
        h = b - t if last else h_nat
        y_new, k_last, err = _dp_step(f, t, y, h, k1)
        if not np.all(np.isfinite(y_new)):
            if h <= cfg.h_min:
                raise BlowUpError(f"non-finite state near t={t}")
            stats.rejected += 1
            h_nat = 0.25 * h
            continue
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = float(np.max(np.abs(err) / scale))
        if en <= 1.0:
            stats.accepted += 1
            stats.max_error = max(stats.max_error, float(np.max(np.abs(err))))
            t = b if last else t + h
            y, k1 = y_new, k_last
            fac = 5.0 if en == 0.0 else min(5.0, max(0.2, 0.9 * en ** -0.2))
            if not last or fac < 1.0:
                h_nat = h * fac
        else:
            stats.rejected += 1
            h_nat = h * max(0.2, 0.9 * en ** -0.2)
        if h_nat < cfg.h_min:
            raise StepSizeUnderflow(f"step size {h_nat:.3e} below h_min at t={t}")
        if stats.accepted + stats.rejected > cfg.max_steps:
            raise StepSizeUnderflow("maximum number of steps exceeded")
    return y, h_nat


# --- lattice systems ----------------------------------------------------------


def _check_tails(model: ModelSpec, state: LatticeState, tol: float = 1e-9):
    for tail in (state.tail_left, state.tail_right):
        if not model.is_equilibrium(tail, tol):
            raise ValueError(f"tail {tail.tolist()} is not an equilibrium of {model.name}")


def integrate(model: ModelSpec, x0: LatticeState, cfg: IntegratorConfig) -> Trajectory:
    """Integrate the truncated system on the window of ``x0``; tails stay fixed."""
    if x0.n != model.n:
        raise ValueError("component mismatch")
    _check_tails(model, x0)
    tl, tr = x0.tail_left, x0.tail_right

    def make_rhs(a, b):
        return lambda t, y: window_rhs(model, y, tl, tr)

    times, ys, stats = solve_arrays(make_rhs, x0.values, cfg)
    states = [LatticeState(x0.window_lo, y, tl, tr) for y in ys]
    return Trajectory(times, states, stats)


def mask_events(lo: int, hi: int, c_bar: float, t0: float, t1: float) -> list[float]:
    """Times in ``(t0, t1)`` at which ``j - c_bar t`` changes sign for a window site."""
    if c_bar == 0.0:
        return []
    js = np.arange(lo, hi + 1)
    ts = js / c_bar
    return sorted(float(t) for t in ts if t0 < t < t1)


def integrate_embedded(model: ModelSpec, x_minus0: LatticeState, x_plus0: LatticeState, c_bar: float,
                       cfg: IntegratorConfig, margin: int = 5) -> Trajectory:
    """Integrate the embedded pair; both components share one window.

    Within each step the mask is the one valid on the open interval between
    consecutive switch times, so steps never straddle a switch.
    """
    for x in (x_minus0, x_plus0):
        if x.n != model.n:
            raise ValueError("component mismatch")
        _check_tails(model, x)
    lo = min(x_minus0.window_lo, x_plus0.window_lo)
    hi = max(x_minus0.window_hi, x_plus0.window_hi)
    xm, xp = x_minus0.extended(lo, hi), x_plus0.extended(lo, hi)
    t0, t1 = cfg.t_span
    need = model.radius + margin
    for t in (t0, t1):
        pos = c_bar * t
        if pos < lo + need or pos > hi - need:
            raise WindowError(f"mask boundary {pos:.3f} at t={t} within {need} sites of window [{lo}, {hi}]")
    sites = np.arange(lo, hi + 1)
    tm = (xm.tail_left, xm.tail_right)
    tp = (xp.tail_left, xp.tail_right)

    def make_rhs(a, b):
        hplus = right_mask(sites, 0.5 * (a + b), c_bar)

        def f(t, y):
            fm, fp = window_rhs_embedded(model, y[0], y[1], tm, tp, hplus)
            return np.stack([fm, fp])

        return f

    y0 = np.stack([xm.values, xp.values])
    times, ys, stats = solve_arrays(make_rhs, y0, cfg, mask_events(lo, hi, c_bar, t0, t1))
    states = [(LatticeState(lo, y[0], *tm), LatticeState(lo, y[1], *tp)) for y in ys]
    return Trajectory(times, states, stats)


def _variational_rhs(model: ModelSpec, profile, lo: int, hi: int):
    R = model.radius
    W = hi - lo + 1
    n = model.n
    sites = np.arange(lo - R, hi + R + 1, dtype=float)
    zeros = np.zeros(n)

    def f(t, Y):
        phi = profile.evaluate(sites - profile.c * t)
        z = functionals_on_padded(model, phi, R, W)
        dg = model.g_jacobian(z)
        Yp = pad_values(Y, zeros, zeros, R)
        out = linear_on_padded(model.L_stencil, Yp, R, W)
        NY = functionals_on_padded(model, Yp, R, W)
        if dg.shape[1:] == (1, 1):
            out += dg[:, 0, 0].reshape((W,) + (1,) * (Y.ndim - 1)) * NY
        else:
            out += np.einsum("wab,wb...->wa...", dg, NY)
        return out

    return f


def variational_flow(model: ModelSpec, profile, lo: int, hi: int, Y0: np.ndarray,
                     cfg: IntegratorConfig) -> tuple[np.ndarray, StepStats]:
    """Final value of ``Y' = (L + G'(phi(. - c t))) Y`` on sites ``lo..hi``.

    ``Y0`` has shape ``(W, n)`` or ``(W, n, m)`` for ``m`` simultaneous
    columns; perturbations vanish outside the window.
    """
    f = _variational_rhs(model, profile, lo, hi)
    _, ys, stats = solve_arrays(lambda a, b: f, Y0, cfg)
    return ys[-1], stats


def integrate_variational(model: ModelSpec, profile, y0: LatticeState, t_span,
                          cfg: IntegratorConfig | None = None) -> Trajectory:
    """Linearised flow about the travelling wave ``phi(j - c t)``."""
    if np.any(y0.tail_left != 0) or np.any(y0.tail_right != 0):
        raise ValueError("variational initial data must have zero tails")
    if not np.all(np.isfinite(y0.values)):
        raise ValueError("variational initial data must be finite")
    cfg = (cfg or IntegratorConfig(rtol=1e-10, atol=1e-13)).with_span(*t_span)
    lo, hi = y0.window_lo, y0.window_hi
    f = _variational_rhs(model, profile, lo, hi)
    times, ys, stats = solve_arrays(lambda a, b: f, y0.values, cfg)
    zero = np.zeros(model.n)
    return Trajectory(times, [LatticeState(lo, y, zero, zero) for y in ys], stats)


def export_trajectory(path, traj: Trajectory, norms: dict[str, Callable] | None = None,
                      snapshot_dir=None) -> Path:
    """CSV of ``t`` and the requested norms; optional per-sample state files."""
    norms = norms or {}
    rows = []
    for i, (t, s) in enumerate(zip(traj.times, traj.states)):
        rows.append([t] + [fn(s) for fn in norms.values()])
        if snapshot_dir is not None:
            parts = s if isinstance(s, tuple) else (s,)
            for k, part in enumerate(parts):
                name = f"state_{i:05d}" + (f"_{k}" if len(parts) > 1 else "") + ".txt"
                atomic_write_text(Path(snapshot_dir) / name, f"# t {t!r}\n" + format_state(part))
    return atomic_write_text(path, csv_text(["t"] + list(norms), rows))
