"""Lattice states on Z with constant tails, weighted sup-norms and Heaviside masks.

A :class:`LatticeState` stores a finite window of n-vectors together with the
constant values it takes to the left and right of the window, which makes
reads at any integer site total.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "LatticeState",
    "WeightedNorm",
    "HeavisideCutoff",
    "evaluate_site",
    "shift",
    "apply_cutoff",
    "weighted_norm",
    "sup_norm",
    "constant_state",
    "delta_state",
    "format_state",
    "parse_state",
    "write_state",
    "read_state",
]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LatticeState:
    """Element of l^inf(Z, R^n) represented as window plus constant tails.

    Parameters
    ----------
    window_lo : int
        Index of the first site stored in ``values``.
    values : (W, n) array
        Values on sites ``window_lo .. window_lo + W - 1``.
    tail_left, tail_right : (n,) array
        Values taken at every site left (right) of the window.
    """

    window_lo: int
    values: np.ndarray
    tail_left: np.ndarray
    tail_right: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] == 0:
            raise ValueError("values must be a non-empty (W, n) array")
        n = vals.shape[1]
        tl = np.broadcast_to(np.asarray(self.tail_left, dtype=float), (n,))
        tr = np.broadcast_to(np.asarray(self.tail_right, dtype=float), (n,))
        object.__setattr__(self, "window_lo", int(self.window_lo))
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "tail_left", _frozen(tl))
        object.__setattr__(self, "tail_right", _frozen(tr))

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def window_hi(self) -> int:
        return self.window_lo + self.values.shape[0] - 1

    @property
    def width(self) -> int:
        return self.values.shape[0]

    def sites(self) -> np.ndarray:
        return np.arange(self.window_lo, self.window_hi + 1)

    def on_range(self, lo: int, hi: int) -> np.ndarray:
        """Values on sites ``lo..hi`` (inclusive), reading tails outside the window."""
        if hi < lo:
            return np.empty((0, self.n))
        out = np.empty((hi - lo + 1, self.n))
        j = np.arange(lo, hi + 1)
        out[j < self.window_lo] = self.tail_left
        out[j > self.window_hi] = self.tail_right
        a = max(lo, self.window_lo)
        b = min(hi, self.window_hi)
        if a <= b:
            out[a - lo:b - lo + 1] = self.values[a - self.window_lo:b - self.window_lo + 1]
        return out

    def extended(self, lo: int, hi: int) -> "LatticeState":
        """Same element of l^inf stored on the window ``[min(lo, window_lo), max(hi, window_hi)]``."""
        lo = min(lo, self.window_lo)
        hi = max(hi, self.window_hi)
        return LatticeState(lo, self.on_range(lo, hi), self.tail_left, self.tail_right)

    def __getitem__(self, j: int) -> np.ndarray:
        return evaluate_site(self, j)

    def _check(self, other: "LatticeState"):
        if self.n != other.n:
            raise ValueError(f"component mismatch: n={self.n} vs n={other.n}")

    def _binary(self, other, op):
        if isinstance(other, LatticeState):
            self._check(other)
            lo = min(self.window_lo, other.window_lo)
            hi = max(self.window_hi, other.window_hi)
            return LatticeState(
                lo,
                op(self.on_range(lo, hi), other.on_range(lo, hi)),
                op(self.tail_left, other.tail_left),
                op(self.tail_right, other.tail_right),
            )
        c = np.asarray(other, dtype=float)
        return LatticeState(self.window_lo, op(self.values, c), op(self.tail_left, c), op(self.tail_right, c))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        """Scalar or sitewise (componentwise) product."""
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return LatticeState(self.window_lo, -self.values, -self.tail_left, -self.tail_right)

    def allclose(self, other: "LatticeState", atol: float = 0.0, rtol: float = 0.0) -> bool:
        self._check(other)
        lo = min(self.window_lo, other.window_lo)
        hi = max(self.window_hi, other.window_hi)
        return bool(
            np.allclose(self.on_range(lo, hi), other.on_range(lo, hi), atol=atol, rtol=rtol)
            and np.allclose(self.tail_left, other.tail_left, atol=atol, rtol=rtol)
            and np.allclose(self.tail_right, other.tail_right, atol=atol, rtol=rtol)
        )

    def max_abs_diff(self, other: "LatticeState") -> float:
        """Sup-norm of ``self - other`` over Z."""
        return sup_norm(self - other)


def constant_state(value, lo: int = 0, hi: int = 0) -> LatticeState:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return LatticeState(lo, np.tile(v, (hi - lo + 1, 1)), v, v)


def delta_state(j: int, value=1.0, n: int = 1) -> LatticeState:
    v = np.broadcast_to(np.asarray(value, dtype=float), (n,))
    return LatticeState(j, v[None, :], np.zeros(n), np.zeros(n))


def evaluate_site(state: LatticeState, j: int) -> np.ndarray:
    j = int(j)
    if j < state.window_lo:
        return state.tail_left
    if j > state.window_hi:
        return state.tail_right
    return state.values[j - state.window_lo]


def shift(state: LatticeState, k: int) -> LatticeState:
    """``(S^k X)_j = X_{j-k}``: translate the window right by ``k`` sites."""
    return LatticeState(state.window_lo + int(k), state.values, state.tail_left, state.tail_right)


def sup_norm(state: LatticeState) -> float:
    return float(max(np.abs(state.values).max(), np.abs(state.tail_left).max(),
                     np.abs(state.tail_right).max()))


# --- weighted norms -----------------------------------------------------------


def log_weight(j, b: float) -> np.ndarray:
    """``log(1 + exp(b j))`` without overflow."""
    return np.logaddexp(0.0, b * np.asarray(j, dtype=float))


@dataclass(frozen=True)
class WeightedNorm:
    """``||X||_b = sup_j (1 + e^{b j}) |X_j|``; ``b`` may take either sign."""

    b: float

    def __call__(self, state: LatticeState) -> float:
        return weighted_norm(self, state)


def _weighted_sup(absvals: np.ndarray, sites: np.ndarray, b: float) -> float:
    nz = absvals > 0
    if not nz.any():
        return 0.0
    logs = np.log(absvals[nz]) + log_weight(sites[nz], b)
    m = logs.max()
    return math.inf if m > 709.0 else float(np.exp(m))


def weighted_norm(norm: WeightedNorm | float, state: LatticeState) -> float:
    """Weighted sup-norm over all of Z.

    Returns ``inf`` when a nonzero tail sits on the side where the weight is
    unbounded. A tail on the decaying side contributes through the site next
    to the window edge, where its weight is largest.
    """
    b = norm.b if isinstance(norm, WeightedNorm) else float(norm)
    tl = float(np.abs(state.tail_left).max())
    tr = float(np.abs(state.tail_right).max())
    if (b > 0 and tr > 0) or (b < 0 and tl > 0):
        return math.inf
    absvals = np.abs(state.values).max(axis=1)
    sites = state.sites()
    best = _weighted_sup(absvals, sites, b)
    if tl > 0:
        best = max(best, _weighted_sup(np.array([tl]), np.array([state.window_lo - 1]), b))
    if tr > 0:
        best = max(best, _weighted_sup(np.array([tr]), np.array([state.window_hi + 1]), b))
    return best


# --- Heaviside localisation ---------------------------------------------------


def right_mask(j, t: float, c_bar: float) -> np.ndarray:
    """``h(j - c_bar t)`` with ``h(0) = 0``."""
    return (np.asarray(j, dtype=float) - c_bar * t > 0).astype(float)


@dataclass(frozen=True)
class HeavisideCutoff:
    """Localisation ``H^+(t)`` (``side='right'``) or ``H^-(t) = Id - H^+(t)``."""

    c_bar: float
    side: str
    t: float = 0.0

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")

    def mask(self, j) -> np.ndarray:
        m = right_mask(j, self.t, self.c_bar)
        return m if self.side == "right" else 1.0 - m

    def boundary(self) -> int:
        """Largest site ``j`` with ``j - c_bar t <= 0``."""
        return int(math.floor(self.c_bar * self.t))


def apply_cutoff(cut: HeavisideCutoff, state: LatticeState) -> LatticeState:
    jb = cut.boundary()
    s = state.extended(jb - 2, jb + 2)
    m = cut.mask(s.sites())[:, None]
    if cut.side == "right":
        tl, tr = np.zeros(state.n), state.tail_right
    else:
        tl, tr = state.tail_left, np.zeros(state.n)
    return LatticeState(s.window_lo, s.values * m, tl, tr)


# --- plain-text serialisation -------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def format_state(state: LatticeState) -> str:
    buf = io.StringIO()
    buf.write(f"# lattice-state n {state.n}\n")
    buf.write(f"# window {state.window_lo} {state.window_hi}\n")
    buf.write("# tail_left " + " ".join(map(_fmt, state.tail_left)) + "\n")
    buf.write("# tail_right " + " ".join(map(_fmt, state.tail_right)) + "\n")
    for j, row in zip(state.sites(), state.values):
        buf.write(f"{j} " + " ".join(map(_fmt, row)) + "\n")
    return buf.getvalue()


def parse_state(text: str | Iterable[str]) -> LatticeState:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    header: dict[str, list[str]] = {}
    rows: list[list[float]] = []
    sites: list[int] = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts:
                header[parts[0]] = parts[1:]
            continue
        parts = line.split()
        sites.append(int(parts[0]))
        rows.append([float(p) for p in parts[1:]])
    try:
        lo, hi = (int(x) for x in header["window"])
        tl = [float(x) for x in header["tail_left"]]
        tr = [float(x) for x in header["tail_right"]]
    except KeyError as exc:
        raise ValueError(f"missing header field {exc}") from None
    if sites != list(range(lo, hi + 1)):
        raise ValueError("site lines do not match the declared window")
    return LatticeState(lo, np.array(rows), tl, tr)


def write_state(path, state: LatticeState) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, format_state(state))


def read_state(path) -> LatticeState:
    with open(path, encoding="utf-8") as fh:
        return parse_state(fh.read())
