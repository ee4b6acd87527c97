"""Travelling-wave profiles of lattice equations.

A wave ``X_j(t) = phi(j - c t)`` solves the advance-delay equation

    -c phi'(xi) = (L phi)(xi) + g(N_1 phi(xi), ..., N_J phi(xi)),

where the stencils now act on the continuous variable ``xi`` through integer
shifts. The equation is discretised by collocation on a uniform grid with
spacing ``1/m`` (so every lattice offset is a whole number of grid points),
``phi'`` by fourth-order centred differences, and values beyond ``[-Xi, Xi]``
are clamped to the limits. Newton's method on ``(phi, c)`` plus a phase
condition then solves the whole profile at once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import make_interp_spline

from ._io import atomic_write_text
from .lattice import LatticeState
from .model import ModelError, ModelSpec
from .stepper import IntegratorConfig, WindowError, integrate

__all__ = [
    "C_MIN",
    "SolverError",
    "NewtonDivergence",
    "SingularJacobian",
    "DecayError",
    "PhaseCondition",
    "WaveProfile",
    "PinnedFront",
    "BranchPoint",
    "ContinuationRun",
    "profile_grid",
    "profile_residual",
    "front_seed",
    "solve_profile",
    "reflect",
    "certify_decay",
    "continue_branch",
    "measure_speed",
    "pulse_seed",
    "level_crossing",
    "format_profile",
    "parse_profile",
    "write_profile",
    "read_profile",
]

C_MIN = 1e-3


class SolverError(RuntimeError):
    """Profile solver failure."""


class NewtonDivergence(SolverError):
    def __init__(self, msg: str, history=(), c_last: float = math.nan):
        super().__init__(msg)
        self.history = tuple(history)
        self.c_last = c_last


class SingularJacobian(SolverError):
    def __init__(self, msg: str, condition: float = math.inf):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


class DecayError(ValueError):
    """Tail is not exponential; the profile cannot be certified."""


@dataclass(frozen=True)
class PhaseCondition:
    """Fixes the translation freedom of the profile.

    ``kind="value"``: ``phi[component](xi0) = level`` (``xi0`` on the grid;
    ``level=None`` means the midpoint of the limits). ``kind="integral"``:
    ``sum (phi - ref) . ref' dxi = 0`` against the seed profile ``ref``.
    """

    kind: str = "value"
    xi0: float = 0.0
    level: float | None = None
    component: int = 0

    def __post_init__(self):
        if self.kind not in ("value", "integral"):
            raise ValueError(f"unknown phase condition {self.kind!r}")


# --- grids and the discretised profile equation --------------------------------


def profile_grid(Xi: float, m: int) -> np.ndarray:
    """Uniform grid ``k/m`` on ``[-Xi, Xi]``; ``Xi * m`` must be an integer."""
    if int(m) != m or m < 1:
        raise ModelError("points per lattice unit m must be a positive integer")
    K = Xi * m
    if abs(K - round(K)) > 1e-9:
        raise ModelError("Xi * m must be an integer")
    K = int(round(K))
    return np.arange(-K, K + 1) / m


def _grid_density(xi: np.ndarray) -> int:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or xi.size < 5:
        raise ModelError("profile grid needs at least 5 points")
    d = np.diff(xi)
    if np.any(d <= 0) or np.ptp(d) > 1e-9 * d.mean():
        raise ModelError("profile grid must be uniform and increasing")
    m = 1.0 / d.mean()
    if abs(m - round(m)) > 1e-6:
        raise ModelError(f"grid spacing {d.mean():.6g} is not 1/m: lattice offsets would miss grid points")
    return int(round(m))


def _pad(phi, alpha, omega, P):
    n = phi.shape[1]
    return np.concatenate([np.tile(alpha, (P, 1)), phi, np.tile(omega, (P, 1))]).reshape(-1, n)


def _apply_grid_stencil(stencil, pp, P, N, m):
    out = np.zeros((N, pp.shape[1]))
    for k, a in stencil:
        seg = pp[P + k * m:P + k * m + N]
        out += seg * a[0, 0] if a.shape == (1, 1) else seg @ a.T
    return out


def _derivative(pp, P, N, m):
    return (m / 12.0) * (-pp[P + 2:P + 2 + N] + 8.0 * pp[P + 1:P + 1 + N]
                         - 8.0 * pp[P - 1:P - 1 + N] + pp[P - 2:P - 2 + N])


def _residual_parts(model, phi, c, m, alpha, omega):
    N = phi.shape[0]
    P = model.radius * m + 2
    pp = _pad(phi, alpha, omega, P)
    d = _derivative(pp, P, N, m)
    Lphi = _apply_grid_stencil(model.L_stencil, pp, P, N, m)
    z = np.concatenate([_apply_grid_stencil(s, pp, P, N, m) for s in model.functionals], axis=1)
    return -c * d - Lphi - model.g(z), d, z


def profile_residual(model: ModelSpec, xi, phi, c: float, alpha=None, omega=None) -> np.ndarray:
    """``-c phi' - L phi - g(N phi)`` at every grid point.

    Values beyond the grid are clamped to ``alpha``/``omega`` (default: the
    end values of ``phi``).
    """
    m = _grid_density(xi)
    phi = np.asarray(phi, dtype=float).reshape(len(xi), -1)
    if phi.shape[1] != model.n:
        raise ModelError("profile has the wrong number of components")
    alpha = phi[0] if alpha is None else np.broadcast_to(np.asarray(alpha, float), (model.n,))
    omega = phi[-1] if omega is None else np.broadcast_to(np.asarray(omega, float), (model.n,))
    return _residual_parts(model, phi, float(c), m, alpha, omega)[0]


def _shift_matrix(N, s):
    # (S v)_i = v_{i+s}, dropping indices outside the grid
    return sp.eye(N, N, k=s, format="csr")


class _Operators:
    """Sparse matrices of the linear parts, built once per grid."""

    def __init__(self, model: ModelSpec, N: int, m: int):
        n = model.n
        self.N, self.n = N, n
        eye = sp.identity(n, format="csr")
        D = (_shift_matrix(N, -2) - 8.0 * _shift_matrix(N, -1) + 8.0 * _shift_matrix(N, 1)
             - _shift_matrix(N, 2)) * (m / 12.0)
        self.D = sp.kron(D, eye, format="csr")

        def op(stencil):
            return sum((sp.kron(_shift_matrix(N, k * m), sp.csr_matrix(a), format="csr") for k, a in stencil),
                       sp.csr_matrix((N * n, N * n)))

        self.L = op(model.L_stencil)
        self.Nf = [op(s) for s in model.functionals]

    def jacobian_phi(self, model, c, z):
        N, n = self.N, self.n
        dg = model.g_jacobian(z)  # (N, n, nJ)
        J = -c * self.D - self.L
        idx = np.arange(N)
        ptr = np.arange(N + 1)
        for f, Nf in enumerate(self.Nf):
            blocks = np.ascontiguousarray(dg[:, :, f * n:(f + 1) * n])
            B = sp.bsr_matrix((blocks, idx, ptr), shape=(N * n, N * n))
            J = J - B @ Nf
        return J


# --- profiles -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WaveProfile:
    """Profile ``phi`` on a uniform grid together with its speed.

    ``decay_rate`` holds the certified exponential rates ``(b_left, b_right)``
    of both tails (``None`` until certified). The carried ``model`` has its
    ``default_b`` set once the profile is certified.
    """

    xi: np.ndarray
    phi: np.ndarray
    c: float
    alpha: np.ndarray
    omega: np.ndarray
    model: ModelSpec
    decay_rate: tuple[float, float] | None = None
    residual: float = math.nan
    newton_history: tuple = ()
    tail_margin: float = math.nan

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float)
        phi = np.array(self.phi, dtype=float).reshape(len(xi), -1)
        for name, v in (("xi", xi), ("phi", phi)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        n = phi.shape[1]
        object.__setattr__(self, "alpha", np.broadcast_to(np.asarray(self.alpha, float), (n,)).copy())
        object.__setattr__(self, "omega", np.broadcast_to(np.asarray(self.omega, float), (n,)).copy())
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "_spline", None)

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def m(self) -> int:
        return _grid_density(self.xi)

    @property
    def Xi(self) -> float:
        return float(self.xi[-1])

    @property
    def certified(self) -> bool:
        return (self.decay_rate is not None and min(self.decay_rate) > 0
                and self.tail_margin < 1e-10)

    def _get_spline(self):
        if self._spline is None:
            spl = make_interp_spline(self.xi, self.phi, k=5)
            object.__setattr__(self, "_spline", (spl, spl.derivative()))
        return self._spline

    def evaluate(self, x) -> np.ndarray:
        """``phi(x)`` by quintic interpolation; limits outside ``[-Xi, Xi]``."""
        x = np.asarray(x, dtype=float)
        spl, _ = self._get_spline()
        out = spl(np.clip(x, self.xi[0], self.xi[-1]))
        out = out.reshape(x.shape + (self.n,))
        out[x < self.xi[0]] = self.alpha
        out[x > self.xi[-1]] = self.omega
        return out

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _, dspl = self._get_spline()
        out = dspl(np.clip(x, self.xi[0], self.xi[-1])).reshape(x.shape + (self.n,))
        out[(x < self.xi[0]) | (x > self.xi[-1])] = 0.0
        return out

    def lattice_state(self, lo: int, hi: int, offset: float = 0.0) -> LatticeState:
        """Sites ``lo..hi`` of ``j -> phi(j - offset)`` with the limits as tails."""
        j = np.arange(lo, hi + 1, dtype=float)
        return LatticeState(lo, self.evaluate(j - offset), self.alpha, self.omega)

    def derivative_state(self, lo: int, hi: int, offset: float = 0.0) -> LatticeState:
        j = np.arange(lo, hi + 1, dtype=float)
        return LatticeState(lo, self.derivative(j - offset), np.zeros(self.n), np.zeros(self.n))

    def grid_derivative(self) -> np.ndarray:
        m = self.m
        pp = _pad(self.phi, self.alpha, self.omega, 2)
        return _derivative(pp, 2, len(self.xi), m)

    def residual_vector(self) -> np.ndarray:
        return profile_residual(self.model, self.xi, self.phi, self.c, self.alpha, self.omega)

    def describe(self) -> dict:
        return {"c": self.c, "Xi": self.Xi, "m": self.m, "alpha": self.alpha.tolist(),
                "omega": self.omega.tolist(),
                "decay_rate": None if self.decay_rate is None else list(self.decay_rate),
                "residual": self.residual, "model": self.model.name, "params": self.model.params}


@dataclass(frozen=True, eq=False)
class PinnedFront:
    """Outcome of a solve whose speed fell below the pinning threshold."""

    c: float
    model: ModelSpec
    reason: str
    converged: bool
    xi: np.ndarray | None = None
    phi: np.ndarray | None = None
    newton_history: tuple = ()


def front_seed(model: ModelSpec, alpha, omega, Xi: float = 40.0, m: int = 32,
               width: float = 2.0, c0: float = 0.1) -> WaveProfile:
    """``tanh`` interpolation between two equilibria; a Newton starting point."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    xi = profile_grid(Xi, m)
    s = 0.5 * (1.0 + np.tanh(xi / width))
    phi = alpha[None, :] + s[:, None] * (omega - alpha)[None, :]
    return WaveProfile(xi, phi, c0, alpha, omega, model)


def _condition_estimate(J) -> float:
    if J.shape[0] > 4000:
        return math.inf
    with np.errstate(all="ignore"):
        return float(np.linalg.cond(J.toarray()))


def solve_profile(model: ModelSpec, seed: WaveProfile, phase: PhaseCondition | None = None,
                  tol: float = 1e-11, max_iter: int = 40, c_min: float = C_MIN,
                  certify: bool = True):
    """Newton solve of the profile equation from ``seed``.

    Returns a :class:`WaveProfile` (certified when the tails pass
    :func:`certify_decay`) or a :class:`PinnedFront` when ``|c| < c_min``.
    Raises :class:`NewtonDivergence` or :class:`SingularJacobian`.
    """
    phase = phase or PhaseCondition()
    xi = seed.xi
    m = _grid_density(xi)
    N, n = seed.phi.shape
    if n != model.n:
        raise ModelError("seed has the wrong number of components")
    alpha, omega = seed.alpha, seed.omega
    for e in (alpha, omega):
        if not model.is_equilibrium(e):
            raise ModelError(f"profile limit {e.tolist()} is not an equilibrium")
    ops = _Operators(model, N, m)

    # phase condition row
    if phase.kind == "value":
        i0 = int(round((phase.xi0 - xi[0]) * m))
        if not 0 <= i0 < N or abs(xi[i0] - phase.xi0) > 1e-9:
            raise ModelError("phase point xi0 must lie on the grid")
        level = 0.5 * (alpha[phase.component] + omega[phase.component]) if phase.level is None else phase.level
        prow = sp.csr_matrix(([1.0], ([0], [i0 * n + phase.component])), shape=(1, N * n))

        def pres(phi):
            return phi[i0, phase.component] - level
    else:
        ref = seed.phi.copy()
        dref = seed.grid_derivative()
        w = (dref / m).ravel()
        prow = sp.csr_matrix(w[None, :])

        def pres(phi):
            return float(np.sum((phi - ref) * dref) / m)

    phi = seed.phi.copy()
    c = seed.c
    history = []
    F, d, z = _residual_parts(model, phi, c, m, alpha, omega)
    fnorm = max(float(np.abs(F).max()), abs(pres(phi)))
    history.append(fnorm)
    for it in range(max_iter):
        if fnorm < tol:
            break
        Jphi = ops.jacobian_phi(model, c, z)
        J = sp.bmat([[Jphi, sp.csr_matrix(-d.reshape(-1, 1))], [prow, None]], format="csc")
        rhs = -np.concatenate([F.ravel(), [pres(phi)]])
        try:
            with np.errstate(all="ignore"):
                lu = spla.splu(J)
            step = lu.solve(rhs)
        except RuntimeError:
            raise SingularJacobian("profile Jacobian is singular", _condition_estimate(J)) from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("profile Jacobian is numerically singular", _condition_estimate(J))
        # damped update: backtrack until the residual decreases
        lam = 1.0
        while True:
            phi_t = phi + lam * step[:-1].reshape(N, n)
            c_t = c + lam * step[-1]
            with np.errstate(all="ignore"):
                F_t, d_t, z_t = _residual_parts(model, phi_t, c_t, m, alpha, omega)
            f_t = max(float(np.abs(F_t).max()), abs(pres(phi_t)))
            if np.isfinite(f_t) and (f_t < fnorm or lam < 1e-3 or fnorm < 1e3 * tol):
                break
            lam *= 0.5
        phi, c, F, d, z, fnorm = phi_t, c_t, F_t, d_t, z_t, f_t
        history.append(fnorm)
        if not np.isfinite(fnorm) or fnorm > 1e8:
            break
    if not fnorm < tol:
        if abs(c) < c_min:
            return PinnedFront(c, model, f"Newton stalled with |c| = {abs(c):.2e} below {c_min}", False,
                               xi, phi, tuple(history))
        raise NewtonDivergence(f"Newton did not converge: residual {fnorm:.3e} after {len(history) - 1} "
                               f"iterations", history, c)
    if abs(c) < c_min:
        return PinnedFront(c, model, f"speed |c| = {abs(c):.2e} below pinning threshold {c_min}", True,
                           xi, phi, tuple(history))
    prof = WaveProfile(xi, phi, c, alpha, omega, model, residual=float(np.abs(F).max()),
                       newton_history=tuple(history))
    if certify:
        try:
            prof = with_certification(prof)
        except DecayError:
            pass
    return prof


def reflect(profile: WaveProfile, check: bool = True) -> WaveProfile:
    """``(c, phi(xi)) -> (-c, phi(-xi))``; valid for symmetric stencils only."""
    model = profile.model
    if not model.is_symmetric:
        raise ModelError("reflection requires symmetric stencils")
    dr = None if profile.decay_rate is None else (profile.decay_rate[1], profile.decay_rate[0])
    out = WaveProfile(-profile.xi[::-1], profile.phi[::-1], -profile.c, profile.omega, profile.alpha,
                      model, dr, profile.residual, profile.newton_history, profile.tail_margin)
    if check:
        r = float(np.abs(out.residual_vector()).max())
        r0 = float(np.abs(profile.residual_vector()).max())
        if r > 2.0 * r0 + 1e-14:
            raise SolverError(f"reflected profile residual {r:.3e} exceeds twice the original {r0:.3e}")
        out = replace(out, residual=r)
        object.__setattr__(out, "_spline", None)
    return out


# --- tail certification -------------------------------------------------------


def _fit_rate(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), float(np.sqrt(np.mean(res ** 2)))


def _tail_rate(x, dev, floor, start, consistency):
    """Exponential rate of ``dev`` for ``|x| >= start``; ``x`` ordered outward."""
    above = dev > floor
    sel = above & (np.abs(x) >= start)
    if sel.sum() < 8:
        # tail reaches the round-off floor early: use the outer third of what is left
        xa = np.abs(x[above])
        if xa.size < 8:
            raise DecayError("tail too short above the round-off floor")
        sel = above & (np.abs(x) >= xa.max() - (xa.max() - xa.min()) / 3.0)
    xo, yo = np.abs(x[sel]), np.log(dev[sel])
    rate, rms = _fit_rate(xo, yo)
    rate = -rate
    h = xo.size // 2
    r1 = -_fit_rate(xo[:h], yo[:h])[0]
    r2 = -_fit_rate(xo[h:], yo[h:])[0]
    if not rate > 0:
        raise DecayError(f"tail does not decay (fitted rate {rate:.3e})")
    if abs(r1 - r2) > consistency * rate or rms > 0.05 * max(1.0, rate * np.ptp(xo)):
        raise DecayError(f"tail is not exponential: local rates {r1:.4g} vs {r2:.4g}")
    return rate


def certify_decay(profile: WaveProfile, frac: float = 1.0 / 3.0, consistency: float = 0.05,
                  floor: float = 1e-13, edge: float | None = None) -> tuple[float, float]:
    """Exponential tail rates ``(b_left, b_right)`` of ``phi`` and ``phi'``.

    ``log |phi - limit|`` and ``log |phi'|`` are fitted against ``xi`` over
    the outer ``frac`` of each tail (points at the round-off floor are
    dropped); each side reports the smaller of the two rates. A tail whose
    local rate changes by more than ``consistency`` across the fitting range
    is rejected with :class:`DecayError`. The outermost ``edge`` lattice
    units (default: stencil radius + 1), where the clamped boundary values
    distort the profile, are excluded.
    """
    xi, phi = profile.xi, profile.phi
    if edge is None:
        edge = profile.model.radius + 1.0
    dphi = profile.grid_derivative()
    scale = max(1.0, float(np.abs(profile.alpha).max()), float(np.abs(profile.omega).max()))
    fl = floor * scale
    inner = np.abs(xi) <= profile.Xi - edge
    left = (xi <= 0) & inner
    right = (xi >= 0) & inner
    rates = []
    for mask, lim, rev in ((left, profile.alpha, True), (right, profile.omega, False)):
        x = xi[mask]
        dev = np.abs(phi[mask] - lim).max(axis=1)
        ddev = np.abs(dphi[mask]).max(axis=1)
        if rev:
            x, dev, ddev = x[::-1], dev[::-1], ddev[::-1]
        start = (1.0 - frac) * profile.Xi
        r_phi = _tail_rate(x, dev, fl, start, consistency)
        r_der = _tail_rate(x, ddev, fl, start, consistency)
        rates.append(min(r_phi, r_der))
    return rates[0], rates[1]


def with_certification(profile: WaveProfile, **kw) -> WaveProfile:
    """Copy of ``profile`` with tail rates, margin, and the model's ``default_b`` set."""
    bl, br = certify_decay(profile, **kw)
    b = min(bl, br)
    margin = math.exp(-b * profile.Xi)
    out = replace(profile, decay_rate=(bl, br), tail_margin=margin, model=profile.model.with_default_b(b / 2))
    object.__setattr__(out, "_spline", None)
    return out


# --- continuation -------------------------------------------------------------


@dataclass(frozen=True)
class BranchPoint:
    param: float
    c: float
    profile: WaveProfile | None
    pinned: bool = False


@dataclass
class ContinuationRun:
    """Natural-parameter continuation record."""

    param_name: str
    param_range: tuple[float, float]
    h0: float
    h_min: float
    h_max: float
    branch: list[BranchPoint] = field(default_factory=list)
    pinned_from: float | None = None
    failures: int = 0

    def params(self) -> np.ndarray:
        return np.array([p.param for p in self.branch])

    def speeds(self) -> np.ndarray:
        return np.array([p.c for p in self.branch])

    def csv_rows(self):
        return [[p.param, p.c, 1.0 if p.pinned else 0.0] for p in self.branch]


def continue_branch(family: Callable[[float], ModelSpec], start: WaveProfile, param_range,
                    param_name: str = "a", h0: float = 0.05, h_min: float = 1e-4, h_max: float = 0.05,
                    phase: PhaseCondition | None = None, c_min: float = C_MIN, tol: float = 1e-11,
                    on_point: Callable[[BranchPoint], None] | None = None) -> ContinuationRun:
    """Continue ``start`` in the parameter from ``param_range[0]`` to ``param_range[1]``.

    ``family(p)`` builds the model at parameter ``p``. Each step is seeded by
    the secant predictor through the last two points; a failed step is
    retried with half the step. Continuation stops at the first pinned point,
    which is recorded with ``pinned=True`` and sets ``pinned_from``.
    """
    p0, p1 = (float(v) for v in param_range)
    run = ContinuationRun(param_name, (p0, p1), h0, h_min, h_max)
    pt = BranchPoint(p0, start.c, start)
    run.branch.append(pt)
    if on_point:
        on_point(pt)
    if p1 == p0:
        return run
    sgn = 1.0 if p1 > p0 else -1.0
    h = min(abs(h0), h_max)
    prev = None
    cur = pt
    while sgn * (p1 - cur.param) > 1e-12:
        hh = min(h, abs(p1 - cur.param))
        p = round(cur.param + sgn * hh, 12)  # keep decimal grids free of drift
        if abs(p1 - p) < 1e-12:
            p = p1
        if prev is None:
            phi_pred, c_pred = cur.profile.phi, cur.c
        else:
            r = (p - cur.param) / (cur.param - prev.param)
            phi_pred = cur.profile.phi + r * (cur.profile.phi - prev.profile.phi)
            c_pred = cur.c + r * (cur.c - prev.c)
        model = family(p)
        seed = WaveProfile(cur.profile.xi, phi_pred, c_pred, cur.profile.alpha, cur.profile.omega, model)
        try:
            out = solve_profile(model, seed, phase, tol=tol, c_min=c_min)
        except (SolverError, ModelError):
            out = None
        if out is None:
            run.failures += 1
            h *= 0.5
            if h < h_min:
                raise SolverError(f"continuation step fell below {h_min} at {param_name} = {cur.param}")
            continue
        if isinstance(out, PinnedFront):
            pt = BranchPoint(p, out.c, None, pinned=True)
            run.branch.append(pt)
            run.pinned_from = p
            if on_point:
                on_point(pt)
            break
        pt = BranchPoint(p, out.c, out)
        run.branch.append(pt)
        if on_point:
            on_point(pt)
        prev, cur = cur, pt
        if len(out.newton_history) <= 5:
            h = min(1.5 * h, h_max)
    return run


# --- direct-simulation speed oracle ---------------------------------------------


def level_crossing(state: LatticeState, level: float, component: int = 0, near: float | None = None) -> float:
    """Position where the component crosses ``level``, by linear interpolation between sites.

    With several crossings the one closest to ``near`` (default: the first) is
    returned; ``nan`` when there is none.
    """
    v = state.values[:, component] - level
    s = np.sign(v)
    idx = np.nonzero(s[:-1] * s[1:] <= 0)[0]
    idx = idx[(v[idx] != 0) | (v[idx + 1] != 0)]
    if idx.size == 0:
        return math.nan
    pos = state.window_lo + idx + np.where(v[idx] == v[idx + 1], 0.0, v[idx] / (v[idx] - v[idx + 1]))
    if near is None:
        return float(pos[0])
    return float(pos[np.argmin(np.abs(pos - near))])


def measure_speed(model: ModelSpec, x0: LatticeState, level: float, t_span,
                  cfg: IntegratorConfig | None = None, component: int = 0, samples: int = 400) -> float:
    """Speed of the level crossing of ``x0``'s evolution.

    The crossing position is least-squares fitted against time over the
    final half of ``t_span``.
    """
    t0, t1 = (float(t) for t in t_span)
    cfg = cfg or IntegratorConfig()
    cfg = replace(cfg, t_span=(t0, t1), sample_every=(t1 - t0) / samples)
    traj = integrate(model, x0, cfg)
    edge = model.radius + 2
    pos = []
    near = None
    for s in traj.states:
        p = level_crossing(s, level, component, near)
        if math.isnan(p):
            raise ValueError("no level crossing in the window")
        if p < s.window_lo + edge or p > s.window_hi - edge:
            raise WindowError("level crossing reached the window edge")
        pos.append(p)
        near = p
    t = traj.times
    sel = t >= 0.5 * (t0 + t1)
    slope, _ = np.polyfit(t[sel], np.array(pos)[sel], 1)
    return float(slope)


# --- pulse seeds from direct simulation ---------------------------------------------


def _front_edge(state: LatticeState, level: float, component: int) -> float:
    """Rightmost downward crossing of ``level`` (the leading edge of a right-moving pulse)."""
    v = state.values[:, component] - level
    above = np.nonzero(v >= 0)[0]
    if above.size == 0 or above[-1] + 1 >= v.size:
        return math.nan
    i = above[-1]
    return float(state.window_lo + i + v[i] / (v[i] - v[i + 1]))


def pulse_seed(model: ModelSpec, rest=None, Xi: float = 100.0, m: int = 16, kick: float = 1.0,
               kick_width: int = 20, t_launch: float = 2.0, lead: float | None = None, level: float = 0.5,
               component: int = 0, window: int = 600, cfg: IntegratorConfig | None = None) -> WaveProfile:
    """Seed profile for a right-moving pulse, taken from a launched pulse.

    Sites ``-kick_width..0`` are raised to ``kick`` on top of the rest state;
    after ``t_launch`` the leading edge (crossing of ``level``) is tracked
    over a further ``t_launch / 2`` to estimate ``c``. Then ``m`` snapshots
    over one shift period ``1/c`` are merged: the snapshot at ``t_k = T +
    k / (m c)`` provides the profile at ``xi = j - x(T) - k/m``, so together
    they fill the grid of spacing ``1/m``. The leading edge sits at
    ``xi = lead`` (default ``Xi / 2``, leaving most of the grid for the slowly
    recovering wake). Solve with ``PhaseCondition("integral")``.
    """
    rest = np.atleast_1d(np.asarray(model.equilibria[0] if rest is None else rest, dtype=float))
    lo = -kick_width - model.radius - 5
    j = np.arange(lo, window + 1)
    vals = np.tile(rest, (j.size, 1))
    vals[(j >= -kick_width) & (j <= 0), component] = rest[component] + kick
    x0 = LatticeState(lo, vals, rest, rest)
    cfg = cfg or IntegratorConfig()
    traj = integrate(model, x0, replace(cfg, t_span=(0.0, 1.5 * t_launch), sample_every=t_launch / 40))
    sel = traj.times >= t_launch
    pos = np.array([_front_edge(s, level, component) for s in np.array(traj.states, dtype=object)[sel]])
    if np.any(np.isnan(pos)):
        raise SolverError("no pulse: the launched excitation did not propagate")
    if pos.max() > window - model.radius - 5:
        raise WindowError("pulse reached the end of the launch window; enlarge window or shorten t_launch")
    c = float(np.polyfit(traj.times[sel], pos, 1)[0])
    if not c > 0:
        raise SolverError(f"launched pulse does not move right (c = {c:.3g})")
    T = float(traj.times[-1])
    xT = pos[-1]
    lead = 0.5 * Xi if lead is None else lead
    xi = profile_grid(Xi, m)
    snaps = integrate(model, traj.final, replace(cfg, t_span=(T, T + 1.0 / c), sample_every=1.0 / (m * c)))
    pts, vals = [], []
    for k, st in enumerate(snaps.states[:m]):
        pts.append(st.sites() - xT - k / m + lead)
        vals.append(st.values)
    pts, vals = np.concatenate(pts), np.concatenate(vals)
    order = np.argsort(pts)
    pts, vals = pts[order], vals[order]
    phi = np.column_stack([np.interp(xi, pts, vals[:, i], left=rest[i], right=rest[i]) for i in range(model.n)])
    return WaveProfile(xi, phi, c, rest, rest, model)


# --- profile files ------------------------------------------------------------


def format_profile(profile: WaveProfile) -> str:
    from .zoo import model_to_dict

    r = repr
    lines = [
        f"# wave-profile n {profile.n}",
        "# model " + json.dumps(model_to_dict(profile.model), sort_keys=True),
        f"# c {r(profile.c)}",
        f"# Xi {r(profile.Xi)}",
        f"# m {profile.m}",
        "# alpha " + " ".join(r(float(v)) for v in profile.alpha),
        "# omega " + " ".join(r(float(v)) for v in profile.omega),
        "# decay_rate " + ("none" if profile.decay_rate is None else " ".join(r(float(v)) for v in profile.decay_rate)),
        f"# tail_margin {r(float(profile.tail_margin))}",
        f"# residual {r(float(profile.residual))}",
    ]
    for x, row in zip(profile.xi, profile.phi):
        lines.append(r(float(x)) + " " + " ".join(r(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> WaveProfile:
    from .zoo import model_from_dict

    header: dict[str, str] = {}
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, rest = line[1:].strip().partition(" ")
            header[key] = rest
        else:
            rows.append([float(v) for v in line.split()])
    try:
        model = model_from_dict(json.loads(header["model"]))
        c = float(header["c"])
        m = int(header["m"])
        alpha = [float(v) for v in header["alpha"].split()]
        omega = [float(v) for v in header["omega"].split()]
        dr = header.get("decay_rate", "none")
    except KeyError as exc:
        raise ValueError(f"profile file lacks header field {exc}") from None
    data = np.array(rows)
    xi = data[:, 0]
    if _grid_density(xi) != m:
        raise ValueError("grid spacing does not match the declared m")
    decay = None if dr == "none" else tuple(float(v) for v in dr.split())
    return WaveProfile(xi, data[:, 1:], c, alpha, omega, model, decay,
                       float(header.get("residual", "nan")), (),
                       float(header.get("tail_margin", "nan")))


def write_profile(path, profile: WaveProfile):
    return atomic_write_text(path, format_profile(profile))


def read_profile(path) -> WaveProfile:
    with open(path, encoding="utf-8") as fh:
        return parse_profile(fh.read())
