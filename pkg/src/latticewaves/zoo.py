"""Builtin lattice models and the JSON model-definition format."""

from __future__ import annotations

import functools
import itertools
import json
import math

import numpy as np

from .model import (
    FHNReaction,
    ModelError,
    ModelSpec,
    Nonlinearity,
    PolynomialReaction,
    TranslatedNonlinearity,
)

__all__ = [
    "nagumo",
    "tristable",
    "convolution",
    "fhn",
    "gaussian_kernel",
    "decoupled_copies",
    "builtin_models",
    "MODEL_FAMILIES",
    "model_from_dict",
    "model_to_dict",
    "build_family",
    "load_model",
]


def _laplacian(h: float) -> dict:
    s = 1.0 / (h * h)
    return {-1: s, 0: -2.0 * s, 1: s}


def nagumo(h: float = 1.0, a: float = 0.25) -> ModelSpec:
    """Discrete Nagumo equation ``u' = (u_{j+1} + u_{j-1} - 2u_j)/h^2 - u(u-1)(u-a)``."""
    if not 0.0 < a < 1.0:
        raise ModelError(f"detuning a must lie in (0, 1), got {a}")
    if h <= 0:
        raise ModelError("h must be positive")
    g = PolynomialReaction.from_roots([0.0, 1.0, a], scale=-1.0)
    return ModelSpec(
        name="nagumo",
        n=1,
        L_stencil=_laplacian(h),
        functionals=({0: 1.0},),
        nonlinearity=g,
        equilibria=(0.0, a, 1.0),
        params={"h": float(h), "a": float(a)},
    )


def tristable(h: float = 1.0, a1: float = -0.7, a2: float = 0.7) -> ModelSpec:
    """Nagumo lattice with quintic reaction ``-u(u+1)(u-1)(u-a1)(u-a2)``."""
    if not -1.0 < a1 < 0.0 < a2 < 1.0:
        raise ModelError(f"need -1 < a1 < 0 < a2 < 1, got a1={a1}, a2={a2}")
    if h <= 0:
        raise ModelError("h must be positive")
    g = PolynomialReaction.from_roots([0.0, -1.0, 1.0, a1, a2], scale=-1.0)
    return ModelSpec(
        name="tristable",
        n=1,
        L_stencil=_laplacian(h),
        functionals=({0: 1.0},),
        nonlinearity=g,
        equilibria=(-1.0, a1, 0.0, a2, 1.0),
        params={"h": float(h), "a1": float(a1), "a2": float(a2)},
    )


def _gaussian(k, sigma):
    return math.exp(-0.5 * (k / sigma) ** 2)


def gaussian_kernel(sigma: float = 1.0):
    """Unnormalised Gaussian weights ``k -> exp(-k^2 / (2 sigma^2))``."""
    return functools.partial(_gaussian, sigma=float(sigma))


def _truncate_kernel(kernel, tol: float, max_radius: int, probe: int = 4096) -> tuple[dict, float]:
    if isinstance(kernel, dict):
        w = {abs(int(k)): float(v) for k, v in kernel.items()}
        w.pop(0, None)
        if not w:
            raise ModelError("kernel has no off-centre weight")
        r = max(w)
        if r > max_radius:
            raise ModelError(f"kernel radius {r} exceeds max_radius {max_radius}")
        return w, 0.0
    vals = np.array([abs(kernel(k)) for k in range(1, probe + 1)])
    if not np.all(np.isfinite(vals)):
        raise ModelError("kernel produced non-finite weights")
    total = vals.sum()
    if total == 0:
        raise ModelError("kernel has no off-centre weight")
    # partial sums must have settled over the probed range
    if vals[probe // 2:].sum() > tol * total:
        raise ModelError("kernel is not summable to the requested tolerance")
    tail = total - np.cumsum(vals)
    r = int(np.argmax(tail <= tol * total)) + 1
    if r > max_radius:
        raise ModelError(f"kernel needs radius {r} > max_radius {max_radius} for tol {tol}")
    w = {k: float(kernel(k)) for k in range(1, r + 1)}
    return w, float(tail[r - 1] / total)


def convolution(kernel=None, a: float = 0.3, tol: float = 1e-12, max_radius: int = 64) -> ModelSpec:
    """Convolution model ``u_j' = sum_k J_k u_{j-k} - u_j - u(u-1)(u-a)``.

    ``kernel`` is a symmetric weight function ``k -> J_k`` (or a ``{k: J_k}``
    map over ``k >= 1``); it is truncated where the discarded mass falls below
    ``tol`` and normalised to unit mass.
    """
    if not 0.0 < a < 1.0:
        raise ModelError(f"detuning a must lie in (0, 1), got {a}")
    if kernel is None:
        kernel = gaussian_kernel(1.0)
    w, discarded = _truncate_kernel(kernel, tol, max_radius)
    mass = 2.0 * sum(w.values())
    if mass <= 0:
        raise ModelError("kernel mass must be positive")
    L = {0: -1.0}
    for k, v in w.items():
        L[k] = L.get(k, 0.0) + v / mass
        L[-k] = L.get(-k, 0.0) + v / mass
    g = PolynomialReaction.from_roots([0.0, 1.0, a], scale=-1.0)
    return ModelSpec(
        name="convolution",
        n=1,
        L_stencil=L,
        functionals=({0: 1.0},),
        nonlinearity=g,
        equilibria=(0.0, a, 1.0),
        params={"a": float(a), "radius": max(w), "discarded_mass": discarded, "tol": tol},
    )


def fhn(eps: float = 0.01, d: float = 1.0, a: float = 0.05, b_fhn: float = 0.5) -> ModelSpec:
    """Discrete FitzHugh-Nagumo system with ``n = 2``.

    The defaults support a stable right-moving pulse (about 54 sites per
    unit time).

    ``eps u' = d (u_{j+1} + u_{j-1} - 2u_j) - u(u-1)(u-a) - v``, ``v' = u - b v``.
    """
    if eps <= 0:
        raise ModelError("eps must be positive")
    if d <= 0:
        raise ModelError("d must be positive")
    if not 0.0 < a < 1.0:
        raise ModelError(f"a must lie in (0, 1), got {a}")
    s = d / eps
    L = {-1: np.diag([s, 0.0]), 0: np.diag([-2.0 * s, 0.0]), 1: np.diag([s, 0.0])}
    return ModelSpec(
        name="fhn",
        n=2,
        L_stencil=L,
        functionals=({0: np.eye(2)},),
        nonlinearity=FHNReaction(eps, a, b_fhn),
        equilibria=((0.0, 0.0),),
        params={"eps": float(eps), "d": float(d), "a": float(a), "b_fhn": float(b_fhn)},
    )


class _BlockNonlinearity(Nonlinearity):
    def __init__(self, base: Nonlinearity, copies: int):
        if base.J != 1:
            raise ModelError("decoupled copies support J = 1 only")
        self.base, self.copies = base, copies
        self.n, self.J = base.n * copies, 1

    def _split(self, z):
        m = self.base.n
        return [z[..., i * m:(i + 1) * m] for i in range(self.copies)]

    def __call__(self, z):
        return np.concatenate([self.base(p) for p in self._split(z)], axis=-1)

    def jacobian(self, z):
        m = self.base.n
        out = np.zeros(z.shape[:-1] + (self.n, self.n))
        for i, p in enumerate(self._split(z)):
            out[..., i * m:(i + 1) * m, i * m:(i + 1) * m] = self.base.jacobian(p)
        return out

    def cross(self, x, y):
        return np.concatenate([self.base.cross(a, b) for a, b in zip(self._split(x), self._split(y))], axis=-1)

    def describe(self):
        return {"family": "copies", "copies": self.copies, "base": self.base.describe()}


def decoupled_copies(model: ModelSpec, copies: int = 2) -> ModelSpec:
    """``copies`` independent replicas of ``model`` stacked as one system.

    Every neutral mode of ``model`` appears ``copies`` times, which makes this
    a convenient degenerate test case.
    """
    n = model.n

    def blk(stencil):
        return {k: np.kron(np.eye(copies), a) for k, a in stencil}

    eqs = tuple(np.concatenate(c) for c in itertools.product(model.equilibria, repeat=copies))
    return ModelSpec(
        name=f"{model.name}x{copies}",
        n=n * copies,
        L_stencil=blk(model.L_stencil),
        functionals=tuple(blk(s) for s in model.functionals),
        nonlinearity=_BlockNonlinearity(model.nonlinearity, copies),
        equilibria=eqs,
        default_b=model.default_b,
        params={"base": model.name, "copies": copies, **model.params},
    )


# --- registry and file format -------------------------------------------------

MODEL_FAMILIES = {
    "nagumo": (nagumo, {"h": (1.0, "lattice spacing; coupling is 1/h^2"),
                        "a": (0.25, "detuning, in (0, 1)")}),
    "tristable": (tristable, {"h": (1.0, "lattice spacing"),
                              "a1": (-0.7, "unstable root in (-1, 0)"),
                              "a2": (0.7, "unstable root in (0, 1)")}),
    "convolution": (convolution, {"sigma": (1.0, "Gaussian kernel width (sites)"),
                                  "a": (0.3, "detuning, in (0, 1)"),
                                  "tol": (1e-12, "discarded kernel mass tolerance")}),
    "fhn": (fhn, {"eps": (0.01, "time-scale ratio, > 0"),
                  "d": (1.0, "coupling strength"),
                  "a": (0.05, "excitation threshold, in (0, 1)"),
                  "b_fhn": (0.5, "recovery decay")}),
}


def build_family(name: str, params: dict | None = None) -> ModelSpec:
    try:
        factory, schema = MODEL_FAMILIES[name]
    except KeyError:
        raise ModelError(f"unknown model family {name!r}; choose from {sorted(MODEL_FAMILIES)}") from None
    params = dict(params or {})
    unknown = set(params) - set(schema)
    if unknown:
        raise ModelError(f"unknown parameters for {name}: {sorted(unknown)}")
    kwargs = {k: float(params.get(k, v[0])) for k, v in schema.items()}
    if name == "convolution":
        kwargs["kernel"] = gaussian_kernel(kwargs.pop("sigma"))
    return factory(**kwargs)


def builtin_models() -> list[ModelSpec]:
    """One instance of every builtin family at its default parameters."""
    return [build_family(name) for name in MODEL_FAMILIES]


def _g_from_dict(gd: dict) -> Nonlinearity:
    family = gd.get("family")
    if family == "polynomial":
        return PolynomialReaction(gd["coeffs"])
    if family == "fhn":
        return FHNReaction(gd["eps"], gd["a"], gd["b"])
    if family == "translated":
        return TranslatedNonlinearity(_g_from_dict(gd["base"]), gd["z0"])
    if family == "copies":
        return _BlockNonlinearity(_g_from_dict(gd["base"]), int(gd["copies"]))
    raise ModelError(f"unsupported g family {family!r}")


def model_to_dict(model: ModelSpec) -> dict:
    """Self-contained JSON description that :func:`model_from_dict` rebuilds."""
    return model.describe()


def model_from_dict(d: dict) -> ModelSpec:
    """Build a model from its JSON description.

    Either ``{"name": family, "params": {...}}`` for a builtin family, or a
    full definition with ``n``, ``L``, ``functionals``, ``g`` and
    ``equilibria``; an optional ``translate_to`` equilibrium normalises it.
    """
    if "L" in d:
        n = int(d["n"])

        def st(m):
            return {int(k): v for k, v in m.items()}

        g = _g_from_dict(d["g"])
        model = ModelSpec(
            name=d.get("name", "custom"),
            n=n,
            L_stencil=st(d["L"]),
            functionals=tuple(st(f) for f in d.get("functionals", [{"0": 1.0}])),
            nonlinearity=g,
            equilibria=tuple(d.get("equilibria", ())),
            params=d.get("params", {}),
        )
    else:
        model = build_family(d["name"], d.get("params"))
    if d.get("default_b") is not None:
        model = model.with_default_b(d["default_b"])
    if d.get("translate_to") is not None:
        model = model.translated(d["translate_to"])
    return model


def load_model(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
