"""Lattice differential equations ``dX/dt = L X + G(X)`` and their embedded split.

``L`` and the functionals ``N_i`` are finite stencils of ``n x n`` matrices;
``G(X)_j = g(N_1(X)_j, ..., N_J(X)_j)`` with ``g`` evaluated pointwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .lattice import HeavisideCutoff, LatticeState

__all__ = [
    "Stencil",
    "make_stencil",
    "Nonlinearity",
    "PolynomialReaction",
    "FHNReaction",
    "CallableNonlinearity",
    "TranslatedNonlinearity",
    "ModelSpec",
    "ModelError",
    "BlowUpError",
    "apply_linear",
    "apply_functionals",
    "apply_nonlinearity",
    "rhs_full",
    "rhs_embedded",
    "crossterm",
]


class ModelError(ValueError):
    """Invalid model definition or incompatible operands."""


class BlowUpError(ArithmeticError):
    """A non-finite value was produced."""


Stencil = tuple  # tuple[tuple[int, np.ndarray], ...]


def make_stencil(entries, n: int = 1) -> Stencil:
    """Normalise ``{offset: matrix-or-scalar}`` (or pairs) into a sorted stencil.

    Scalars are promoted to ``scalar * I_n``.
    """
    items = entries.items() if isinstance(entries, dict) else entries
    acc: dict[int, np.ndarray] = {}
    for k, m in items:
        a = np.asarray(m, dtype=float)
        if a.ndim == 0:
            a = float(a) * np.eye(n)
        if a.shape != (n, n):
            raise ModelError(f"stencil matrix at offset {k} has shape {a.shape}, expected {(n, n)}")
        acc[int(k)] = acc.get(int(k), np.zeros((n, n))) + a
    out = []
    for k in sorted(acc):
        a = acc[k].copy()
        a.setflags(write=False)
        out.append((k, a))
    return tuple(out)


def stencil_radius(stencil: Stencil) -> int:
    return max((abs(k) for k, _ in stencil), default=0)


def stencil_sum(stencil: Stencil, n: int) -> np.ndarray:
    return sum((a for _, a in stencil), np.zeros((n, n)))


def scale_stencil(stencil: Stencil, s: float) -> Stencil:
    return tuple((k, s * a) for k, a in stencil)


# --- pointwise nonlinearities -------------------------------------------------


class Nonlinearity:
    """Pointwise map ``g: R^{nJ} -> R^n`` with ``g(0) = 0``.

    Subclasses implement ``__call__`` and ``jacobian`` on arrays whose last
    axis has length ``n J``. ``cross`` may be overridden with a formula that
    avoids cancellation when one argument is tiny.
    """

    n: int = 1
    J: int = 1

    def __call__(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cross(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``g(x + y) - g(x) - g(y)``."""
        return self(x + y) - self(x) - self(y)

    def translated(self, z0: np.ndarray) -> "Nonlinearity":
        """``z -> g(z + z0)`` (requires ``g(z0) = 0``)."""
        return TranslatedNonlinearity(self, z0)

    def describe(self) -> dict:
        return {"family": type(self).__name__}


class PolynomialReaction(Nonlinearity):
    """Scalar polynomial ``g(u) = sum_k coeffs[k] u^k`` with ``coeffs[0] = 0``."""

    def __init__(self, coeffs: Sequence[float]):
        c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
        if c.size == 0:
            c = np.zeros(1)
        if c[0] != 0.0:
            raise ModelError("g(0) must vanish: constant coefficient is nonzero")
        self.coeffs = c
        self._dcoeffs = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)
        self.n = 1
        self.J = 1

    @classmethod
    def from_roots(cls, roots, scale: float = 1.0) -> "PolynomialReaction":
        """``scale * prod (u - r)``; one root must be zero."""
        return cls(scale * np.polynomial.polynomial.polyfromroots(roots))

    def __call__(self, z):
        return np.polynomial.polynomial.polyval(z, self.coeffs)

    def jacobian(self, z):
        return np.polynomial.polynomial.polyval(z, self._dcoeffs)[..., None]

    def cross(self, x, y):
        # every monomial of (x+y)^k - x^k - y^k carries a factor x*y
        out = np.zeros(np.broadcast(x, y).shape)
        xp = [np.ones_like(x), x]
        yp = [np.ones_like(y), y]
        for k in range(2, self.coeffs.size):
            xp.append(xp[-1] * x)
            yp.append(yp[-1] * y)
        for k in range(2, self.coeffs.size):
            ck = self.coeffs[k]
            if ck == 0.0:
                continue
            for i in range(1, k):
                out = out + ck * math.comb(k, i) * xp[i] * yp[k - i]
        return out

    def translated(self, z0):
        u0 = float(np.asarray(z0).ravel()[0])
        p = Polynomial(self.coeffs)(Polynomial([u0, 1.0]))
        c = np.array(p.coef, dtype=float)
        if abs(c[0]) > 1e-10 * max(1.0, np.abs(c).max()):
            raise ModelError(f"translation by {u0} is not to a zero of g (g = {c[0]:.3e})")
        c[0] = 0.0
        return PolynomialReaction(c)

    def describe(self):
        return {"family": "polynomial", "coeffs": self.coeffs.tolist()}


class FHNReaction(Nonlinearity):
    """FitzHugh-Nagumo kinetics divided through by ``eps``.

    ``g(u, v) = ((-u (u - 1)(u - a) - v) / eps, u - b v)``.
    """

    def __init__(self, eps: float, a: float, b: float):
        self.eps, self.a, self.b = float(eps), float(a), float(b)
        self._cubic = PolynomialReaction.from_roots([0.0, 1.0, self.a], scale=-1.0)
        self.n = 2
        self.J = 1

    def __call__(self, z):
        u, v = z[..., 0], z[..., 1]
        return np.stack([(self._cubic(u) - v) / self.eps, u - self.b * v], axis=-1)

    def jacobian(self, z):
        u = z[..., 0]
        out = np.zeros(z.shape[:-1] + (2, 2))
        out[..., 0, 0] = self._cubic.jacobian(u)[..., 0] / self.eps
        out[..., 0, 1] = -1.0 / self.eps
        out[..., 1, 0] = 1.0
        out[..., 1, 1] = -self.b
        return out

    def cross(self, x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        out[..., 0] = self._cubic.cross(x[..., 0], y[..., 0]) / self.eps
        return out

    def describe(self):
        return {"family": "fhn", "eps": self.eps, "a": self.a, "b": self.b}


class CallableNonlinearity(Nonlinearity):
    """Wrap plain functions ``g(z)`` and ``jac(z)`` acting on ``(..., nJ)`` arrays."""

    def __init__(self, g, jac, n: int = 1, J: int = 1, cross=None, label: str = "callable"):
        self._g, self._jac, self._cross = g, jac, cross
        self.n, self.J, self.label = n, J, label

    def __call__(self, z):
        return self._g(z)

    def jacobian(self, z):
        return self._jac(z)

    def cross(self, x, y):
        if self._cross is not None:
            return self._cross(x, y)
        return super().cross(x, y)

    def describe(self):
        return {"family": self.label}


class TranslatedNonlinearity(Nonlinearity):
    def __init__(self, base: Nonlinearity, z0):
        self.base = base
        self.z0 = np.asarray(z0, dtype=float)
        self.n, self.J = base.n, base.J
        g0 = base(self.z0)
        if np.abs(g0).max() > 1e-10:
            raise ModelError("translation point is not a zero of g")
        self._g0 = g0

    def __call__(self, z):
        return self.base(z + self.z0) - self._g0

    def jacobian(self, z):
        return self.base.jacobian(z + self.z0)

    def cross(self, x, y):
        z0 = self.z0
        return self.base(x + y + z0) - self.base(x + z0) - self.base(y + z0) + self._g0

    def describe(self):
        return {"family": "translated", "base": self.base.describe(), "z0": self.z0.tolist()}


# --- the model ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """An LDE instance: linear stencil, functionals, nonlinearity, equilibria.

    ``default_b`` is the weight exponent used for this model's weighted norms;
    it is ``None`` until a wave profile has been certified.
    """

    name: str
    n: int
    L_stencil: Stencil
    functionals: tuple
    nonlinearity: Nonlinearity
    equilibria: tuple = ()
    default_b: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        object.__setattr__(self, "L_stencil", make_stencil(self.L_stencil, n))
        object.__setattr__(self, "functionals", tuple(make_stencil(s, n) for s in self.functionals))
        if not self.functionals:
            raise ModelError("at least one functional N_i is required")
        g = self.nonlinearity
        if g.n != n or g.J != len(self.functionals):
            raise ModelError(f"nonlinearity has (n, J) = ({g.n}, {g.J}); model needs ({n}, {len(self.functionals)})")
        rowsum = stencil_sum(self.L_stencil, n)
        scale = max(1.0, max((np.abs(a).max() for _, a in self.L_stencil), default=1.0))
        if np.abs(rowsum).max() > 1e-12 * scale:
            raise ModelError("L must annihilate constants (stencil matrices must sum to zero)")
        if np.abs(g(np.zeros(n * g.J))).max() != 0.0:
            raise ModelError("g(0) must vanish")
        eqs = tuple(np.atleast_1d(np.asarray(e, dtype=float)) for e in self.equilibria)
        for e in eqs:
            if e.shape != (n,):
                raise ModelError(f"equilibrium {e} does not have {n} components")
            if np.abs(self.g(self.functional_constants(e))).max() > 1e-9:
                raise ModelError(f"{e.tolist()} is not an equilibrium")
        object.__setattr__(self, "equilibria", eqs)

    @property
    def J(self) -> int:
        return len(self.functionals)

    @property
    def radius(self) -> int:
        return max([stencil_radius(self.L_stencil)] + [stencil_radius(s) for s in self.functionals])

    @property
    def is_symmetric(self) -> bool:
        """Stencils invariant under ``k -> -k`` (needed for reflection of profiles)."""
        for st in (self.L_stencil,) + self.functionals:
            d = dict(st)
            for k, a in st:
                if -k not in d or not np.array_equal(d[-k], a):
                    return False
        return True

    def g(self, z: np.ndarray) -> np.ndarray:
        return self.nonlinearity(z)

    def g_jacobian(self, z: np.ndarray) -> np.ndarray:
        return self.nonlinearity.jacobian(z)

    def functional_constants(self, e) -> np.ndarray:
        """``(N_1 E, ..., N_J E)`` for a constant state ``E``."""
        e = np.asarray(e, dtype=float)
        return np.concatenate([stencil_sum(s, self.n) @ e for s in self.functionals])

    def rhs_constant(self, e) -> np.ndarray:
        """``F(E)`` for a constant state."""
        e = np.asarray(e, dtype=float)
        return stencil_sum(self.L_stencil, self.n) @ e + self.g(self.functional_constants(e))

    def is_equilibrium(self, e, tol: float = 1e-9) -> bool:
        return bool(np.abs(self.rhs_constant(e)).max() <= tol)

    def with_default_b(self, b: float) -> "ModelSpec":
        return replace(self, default_b=float(b))

    def translated(self, e) -> "ModelSpec":
        """Model for ``X - E``: ``g~(z) = g(z + N E)``; equilibria shift by ``-E``."""
        e = np.atleast_1d(np.asarray(e, dtype=float))
        if not self.is_equilibrium(e):
            raise ModelError(f"{e.tolist()} is not an equilibrium of {self.name}")
        g = self.nonlinearity.translated(self.functional_constants(e))
        params = dict(self.params, translated_by=e.tolist())
        return replace(self, nonlinearity=g, equilibria=tuple(q - e for q in self.equilibria), params=params)

    def describe(self) -> dict:
        def st(s):
            return {str(k): a.tolist() for k, a in s}

        return {
            "name": self.name,
            "n": self.n,
            "L": st(self.L_stencil),
            "functionals": [st(s) for s in self.functionals],
            "g": self.nonlinearity.describe(),
            "equilibria": [e.tolist() for e in self.equilibria],
            "default_b": self.default_b,
            "params": self.params,
        }


# --- window kernels (fixed window, constant tails) ----------------------------


def pad_values(vals: np.ndarray, tail_left, tail_right, pad: int) -> np.ndarray:
    """Stack ``pad`` ghost sites of each tail around ``vals`` (first axis = sites)."""
    if pad == 0:
        return vals
    extra = (1,) * (vals.ndim - 2)
    shape = (pad,) + vals.shape[1:]
    left = np.broadcast_to(np.reshape(tail_left, (1, -1) + extra), shape)
    right = np.broadcast_to(np.reshape(tail_right, (1, -1) + extra), shape)
    return np.concatenate([left, vals, right], axis=0)


def stencil_on_padded(stencil: Stencil, padded: np.ndarray, pad: int, width: int) -> np.ndarray:
    """``sum_k A_k X_{j+k}`` for the ``width`` central sites of ``padded``.

    ``padded`` has shape ``(width + 2 pad, n, ...)``; trailing axes are carried.
    """
    n = padded.shape[1]
    out = np.zeros((width,) + padded.shape[1:])
    for k, a in stencil:
        block = padded[pad + k:pad + k + width]
        if n == 1:
            out += a[0, 0] * block
        else:
            out += np.einsum("ab,wb...->wa...", a, block)
    return out


def linear_on_padded(stencil: Stencil, padded: np.ndarray, pad: int, width: int) -> np.ndarray:
    """``(L X)_j`` in difference form ``sum_{k != 0} A_k (X_{j+k} - X_j)``.

    Equal to ``sum_k A_k X_{j+k}`` because the matrices sum to zero, but it
    returns exactly zero on constant states even when the stored
    coefficients only sum to zero up to round-off (truncated kernels).
    """
    n = padded.shape[1]
    centre = padded[pad:pad + width]
    out = np.zeros((width,) + padded.shape[1:])
    for k, a in stencil:
        if k == 0:
            continue
        block = padded[pad + k:pad + k + width] - centre
        if n == 1:
            out += a[0, 0] * block
        else:
            out += np.einsum("ab,wb...->wa...", a, block)
    return out


def functionals_on_padded(model: ModelSpec, padded: np.ndarray, pad: int, width: int) -> np.ndarray:
    """Stack ``N_1 X, ..., N_J X`` along axis 1 -> ``(width, n J, ...)``."""
    parts = [stencil_on_padded(s, padded, pad, width) for s in model.functionals]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)


def window_rhs(model: ModelSpec, vals: np.ndarray, tail_left, tail_right) -> np.ndarray:
    """Truncated ``F`` on a fixed window; sites outside read the tails."""
    R = model.radius
    p = pad_values(vals, tail_left, tail_right, R)
    W = vals.shape[0]
    return linear_on_padded(model.L_stencil, p, R, W) + model.g(functionals_on_padded(model, p, R, W))


def window_rhs_embedded(model: ModelSpec, xm, xp, tails_m, tails_p, hplus: np.ndarray):
    """Truncated embedded right-hand side; ``hplus`` is the right mask on the window."""
    R = model.radius
    W = xm.shape[0]
    pm = pad_values(xm, tails_m[0], tails_m[1], R)
    pp = pad_values(xp, tails_p[0], tails_p[1], R)
    zm = functionals_on_padded(model, pm, R, W)
    zp = functionals_on_padded(model, pp, R, W)
    cross = model.nonlinearity.cross(zm, zp)
    hp = hplus[:, None]
    fm = linear_on_padded(model.L_stencil, pm, R, W) + model.g(zm) + (1.0 - hp) * cross
    fp = linear_on_padded(model.L_stencil, pp, R, W) + model.g(zp) + hp * cross
    return fm, fp


# --- operations on LatticeState -----------------------------------------------


def _check_n(model: ModelSpec, state: LatticeState):
    if state.n != model.n:
        raise ModelError(f"component mismatch: model n={model.n}, state n={state.n}")


def _finite(state: LatticeState) -> LatticeState:
    if not (np.isfinite(state.values).all() and np.isfinite(state.tail_left).all()
            and np.isfinite(state.tail_right).all()):
        raise BlowUpError("non-finite value produced")
    return state


def _stencil_state(stencil: Stencil, state: LatticeState, n: int, out_radius: int) -> LatticeState:
    r = stencil_radius(stencil)
    lo, hi = state.window_lo - out_radius, state.window_hi + out_radius
    padded = state.on_range(lo - r, hi + r)
    vals = stencil_on_padded(stencil, padded, r, hi - lo + 1)
    s = stencil_sum(stencil, n)
    return LatticeState(lo, vals, s @ state.tail_left, s @ state.tail_right)


def apply_linear(model: ModelSpec, state: LatticeState) -> LatticeState:
    """``(L X)_j = sum_k A_k X_{j+k}``; window grows by the stencil radius.

    Evaluated in difference form, so constants (and the constant tails) map
    to exactly zero.
    """
    _check_n(model, state)
    r = stencil_radius(model.L_stencil)
    lo, hi = state.window_lo - r, state.window_hi + r
    vals = linear_on_padded(model.L_stencil, state.on_range(lo - r, hi + r), r, hi - lo + 1)
    zero = np.zeros(model.n)
    return LatticeState(lo, vals, zero, zero)


def apply_functionals(model: ModelSpec, state: LatticeState, radius: int | None = None):
    """Functional values ``(N_1 X, ..., N_J X)`` as a state with ``n J`` components."""
    _check_n(model, state)
    r = max(stencil_radius(s) for s in model.functionals) if radius is None else radius
    parts = [_stencil_state(s, state, model.n, r) for s in model.functionals]
    if len(parts) == 1:
        return parts[0]
    return LatticeState(
        parts[0].window_lo,
        np.concatenate([p.values for p in parts], axis=1),
        np.concatenate([p.tail_left for p in parts]),
        np.concatenate([p.tail_right for p in parts]),
    )


def apply_nonlinearity(model: ModelSpec, state: LatticeState) -> LatticeState:
    """``G(X)_j = g(N_1(X)_j, ..., N_J(X)_j)``."""
    z = apply_functionals(model, state)
    return _finite(LatticeState(z.window_lo, model.g(z.values), model.g(z.tail_left), model.g(z.tail_right)))


def rhs_full(model: ModelSpec, state: LatticeState) -> LatticeState:
    """``F(X) = L X + G(X)``."""
    return _finite(apply_linear(model, state) + apply_nonlinearity(model, state))


def crossterm(model: ModelSpec, x_minus: LatticeState, x_plus: LatticeState) -> LatticeState:
    """Unmasked interaction ``G(X^- + X^+) - G(X^-) - G(X^+)``."""
    _check_n(model, x_minus)
    _check_n(model, x_plus)
    lo = min(x_minus.window_lo, x_plus.window_lo)
    hi = max(x_minus.window_hi, x_plus.window_hi)
    zm = apply_functionals(model, x_minus.extended(lo, hi))
    zp = apply_functionals(model, x_plus.extended(lo, hi))
    cr = model.nonlinearity.cross
    return LatticeState(zm.window_lo, cr(zm.values, zp.values), cr(zm.tail_left, zp.tail_left),
                        cr(zm.tail_right, zp.tail_right))


def rhs_embedded(model: ModelSpec, x_minus: LatticeState, x_plus: LatticeState, t: float,
                 c_bar: float) -> tuple[LatticeState, LatticeState]:
    """Right-hand sides ``(F_-, F_+)`` of the embedded pair.

    Each component gets ``L X^± + G(X^±)``; the interaction term goes to
    ``F_-`` on sites with ``j - c_bar t <= 0`` and to ``F_+`` elsewhere.
    """
    from .lattice import apply_cutoff

    cross = crossterm(model, x_minus, x_plus)
    fm = rhs_full(model, x_minus) + apply_cutoff(HeavisideCutoff(c_bar, "left", t), cross)
    fp = rhs_full(model, x_plus) + apply_cutoff(HeavisideCutoff(c_bar, "right", t), cross)
    return _finite(fm), _finite(fp)
