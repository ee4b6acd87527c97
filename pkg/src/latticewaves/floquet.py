"""Shifted monodromy operator of a travelling wave and its spectrum.

Over one period ``T = 1/|c|`` a wave moves exactly one site, so the
linearised period map composed with the opposite unit shift,
``A = S^{-sign c} Phi(T, 0)``, has ``phi'`` as a fixed point. Stability of
the wave is read off the rest of the spectrum of ``A``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._io import atomic_write_text, csv_text
from .lattice import log_weight
from .model import ModelSpec
from .stepper import IntegratorConfig, StepStats, WindowError, variational_flow
from .waves import C_MIN, WaveProfile

__all__ = [
    "MonodromyMatrix",
    "FloquetReport",
    "Tolerances",
    "build_monodromy",
    "default_window",
    "conjugate_weight",
    "spectrum",
    "verdict_h2",
    "analyse",
    "edge_fraction",
    "format_report",
    "spectrum_csv",
    "b_sweep_csv",
]


@dataclass(frozen=True, eq=False)
class MonodromyMatrix:
    """Dense ``nW x nW`` matrix on sites ``lo..hi``; row index ``(j - lo) n + component``.

    ``log_w`` is the log of the diagonal similarity already applied (``None``
    for the plain matrix) and ``b`` the weight exponent it corresponds to.
    """

    matrix: np.ndarray
    lo: int
    hi: int
    n: int
    c: float
    b: float = 0.0
    profile: WaveProfile | None = None
    stats: StepStats | None = None
    log_w: np.ndarray | None = None

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        W = self.hi - self.lo + 1
        if M.shape != (W * self.n, W * self.n):
            raise ValueError(f"matrix shape {M.shape} inconsistent with window width {W} and n={self.n}")
        if not np.all(np.isfinite(M)):
            raise ValueError("monodromy matrix has non-finite entries")

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    @property
    def period(self) -> float:
        return 1.0 / abs(self.c)

    def site_index(self) -> np.ndarray:
        """Site of every row/column."""
        return np.repeat(np.arange(self.lo, self.hi + 1), self.n)


def default_window(profile: WaveProfile, half_width: int | None = None) -> tuple[int, int]:
    """Window centred on the wave, wide enough for its tails to fall below 1e-12."""
    if half_width is None:
        rate = min(profile.decay_rate) if profile.decay_rate else 0.5
        half_width = int(math.ceil(math.log(1e12) / rate)) + profile.model.radius + 2
    return -half_width, half_width


def build_monodromy(model: ModelSpec, profile: WaveProfile, window: tuple[int, int] | None = None,
                    cfg: IntegratorConfig | None = None, margin: int = 10,
                    c_min: float = C_MIN) -> MonodromyMatrix:
    """``A = S^{-sign c} Phi(1/|c|, 0)`` restricted to ``window``.

    All ``n W`` canonical basis vectors are integrated at once through the
    variational equation about ``phi(j - c t)``; perturbations vanish outside
    the window. The row vacated by the shift is filled with zeros.
    """
    c = profile.c
    if abs(c) < c_min:
        raise ValueError(f"|c| = {abs(c):.2e} is below the pinning threshold {c_min}")
    lo, hi = window or default_window(profile)
    if lo + margin > min(0.0, -np.sign(c)) or hi - margin < max(0.0, np.sign(c)):
        raise WindowError(f"window [{lo}, {hi}] leaves less than {margin} sites around the wave")
    n = model.n
    W = hi - lo + 1
    T = 1.0 / abs(c)
    cfg = cfg or IntegratorConfig(rtol=1e-10, atol=1e-13)
    cfg = cfg.with_span(0.0, T)
    Y0 = np.eye(W * n).reshape(W, n, W * n)
    Y, stats = variational_flow(model, profile, lo, hi, Y0, cfg)
    Phi = Y.reshape(W * n, W * n)
    A = np.zeros_like(Phi)
    if c > 0:
        A[:-n] = Phi[n:]     # (S^{-1} Y)_j = Y_{j+1}
    else:
        A[n:] = Phi[:-n]     # (S Y)_j = Y_{j-1}
    return MonodromyMatrix(A, lo, hi, n, c, 0.0, profile, stats)


def conjugate_weight(M: MonodromyMatrix, b: float, inverse: bool = False) -> MonodromyMatrix:
    """``A^b = w A w^{-1}`` with ``w_j = 1 + e^{b j}`` on window sites.

    ``inverse=True`` applies ``w^{-1} A w`` instead, undoing an earlier
    conjugation with the same ``b``.
    """
    if not math.isfinite(b):
        raise ValueError("weight exponent must be finite")
    lw = log_weight(M.site_index(), b)
    if inverse:
        lw = -lw
    expo = lw[:, None] - lw[None, :]
    if expo.max() > 700.0:
        raise OverflowError(f"weight ratio exp({expo.max():.0f}) overflows; shrink b or the window")
    mat = M.matrix * np.exp(expo)
    if not np.all(np.isfinite(mat)):
        raise OverflowError("conjugated matrix has non-finite entries")
    total = lw if M.log_w is None else M.log_w + lw
    if M.log_w is None:
        nb = -b if inverse else b
    else:
        nb = 0.0 if (inverse and b == M.b) else math.nan
    return MonodromyMatrix(mat, M.lo, M.hi, M.n, M.c, nb, M.profile, M.stats, total)


@dataclass(frozen=True)
class Tolerances:
    tol_eig: float = 1e-6
    tol_vec: float = 1e-6
    gap_min: float = 1e-3
    edge_sites: int = 5
    edge_mass: float = 0.9


@dataclass
class FloquetReport:
    """Spectrum of a (weighted) monodromy matrix and the stability verdict."""

    eigenvalues: np.ndarray
    artifact: np.ndarray
    leading_index: int
    leading_right: np.ndarray
    leading_left: np.ndarray
    unit_eig_error: float
    eigvec_alignment: float
    spectral_gap: float
    lambda_decay: float
    second_modulus: float
    c: float
    b: float
    window: tuple[int, int]
    log_w: np.ndarray | None = None
    n_near_one: int = 0
    verdict: str = "unknown"
    reasons: list[str] = field(default_factory=list)
    tolerances: Tolerances = field(default_factory=Tolerances)

    @property
    def leading(self) -> complex:
        return complex(self.eigenvalues[self.leading_index])

    @property
    def artifact_count(self) -> int:
        return int(np.count_nonzero(self.artifact))

    def summary(self) -> dict:
        return {
            "verdict": self.verdict,
            "reasons": list(self.reasons),
            "leading_eigenvalue": [self.leading.real, self.leading.imag],
            "unit_eig_error": self.unit_eig_error,
            "eigvec_alignment": self.eigvec_alignment,
            "spectral_gap": self.spectral_gap,
            "second_modulus": self.second_modulus,
            "lambda_decay": self.lambda_decay,
            "eigenvalues_near_one": self.n_near_one,
            "artifact_count": self.artifact_count,
            "c": self.c,
            "b": self.b,
            "window": list(self.window),
            "tolerances": self.tolerances.__dict__,
        }


def edge_fraction(vectors: np.ndarray, sites: np.ndarray, lo: int, hi: int, k: int = 5) -> np.ndarray:
    """Fraction of each column's squared mass on the ``k`` sites next to either window edge."""
    mass = np.abs(vectors) ** 2
    tot = mass.sum(axis=0)
    edge = (sites < lo + k) | (sites > hi - k)
    return mass[edge].sum(axis=0) / np.where(tot > 0, tot, 1.0)


def _weighted_derivative(profile: WaveProfile, lo: int, hi: int, log_w) -> np.ndarray:
    ref = profile.derivative(np.arange(lo, hi + 1, dtype=float)).reshape(-1)
    if log_w is not None:
        ref = ref * np.exp(log_w - log_w.max())
    return ref


def _alignment(v: np.ndarray, ref: np.ndarray) -> float:
    nv, nr = np.linalg.norm(v), np.linalg.norm(ref)
    if nv == 0 or nr == 0:
        return 0.0
    return float(abs(np.vdot(ref, v)) / (nv * nr))


def spectrum(M: MonodromyMatrix, tol: Tolerances | None = None) -> FloquetReport:
    """Full eigendecomposition, sorted by decreasing modulus, with artifact flags.

    The leading eigenvalue is the non-artifact eigenvalue closest to 1 (the
    translation mode); its right and left eigenvectors are returned.
    """
    tol = tol or Tolerances()
    try:
        w, vl, vr = scipy.linalg.eig(M.matrix, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    order = np.lexsort((np.angle(w), -np.abs(w)))
    w, vl, vr = w[order], vl[:, order], vr[:, order]
    sites = M.site_index()
    # eigenvectors of a conjugated matrix already carry the weight
    art = edge_fraction(vr, sites, M.lo, M.hi, tol.edge_sites) > tol.edge_mass
    cand = np.nonzero(~art)[0]
    if cand.size == 0:
        cand = np.arange(w.size)
    lead = int(cand[np.argmin(np.abs(w[cand] - 1.0))])
    rest = [i for i in cand if i != lead]
    second = float(np.abs(w[rest]).max()) if rest else 0.0
    near = int(np.count_nonzero(np.abs(w[cand] - 1.0) < tol.tol_eig))
    align = math.nan
    if M.profile is not None:
        align = _alignment(vr[:, lead], _weighted_derivative(M.profile, M.lo, M.hi, M.log_w))
    lam = -abs(M.c) * math.log(second) if second > 0 else math.inf
    return FloquetReport(
        eigenvalues=w,
        artifact=art,
        leading_index=lead,
        leading_right=vr[:, lead],
        leading_left=vl[:, lead],
        unit_eig_error=float(abs(w[lead] - 1.0)),
        eigvec_alignment=align,
        spectral_gap=1.0 - second,
        lambda_decay=lam,
        second_modulus=second,
        c=M.c,
        b=M.b,
        window=(M.lo, M.hi),
        log_w=M.log_w,
        n_near_one=near,
        tolerances=tol,
    )


def verdict_h2(report: FloquetReport, profile: WaveProfile | None = None,
               tol: Tolerances | None = None) -> str:
    """``"pass"``, ``"fail"`` or ``"indeterminate"``; reasons are stored on the report.

    Pass requires a single eigenvalue within ``tol_eig`` of 1 whose
    eigenvector aligns with ``phi'``, and every other non-artifact eigenvalue
    inside the disc of radius ``1 - gap_min``. Eigenvalues sitting just
    outside the ``tol_eig`` neighbourhood of 1 make the verdict indeterminate.
    """
    tol = tol or report.tolerances
    reasons = []
    status = "pass"
    w = report.eigenvalues
    ok = ~report.artifact
    dist = np.abs(w - 1.0)
    near = int(np.count_nonzero(ok & (dist < tol.tol_eig)))
    borderline = int(np.count_nonzero(ok & (dist >= tol.tol_eig) & (dist < 10 * tol.tol_eig)))
    if near == 0:
        status = "fail"
        reasons.append(f"no eigenvalue within {tol.tol_eig:g} of 1 (closest at {report.unit_eig_error:.3e})")
    elif near > 1:
        status = "fail"
        reasons.append(f"eigenvalue 1 not simple ({near} eigenvalues within {tol.tol_eig:g})")
    align = report.eigvec_alignment
    if profile is not None:
        ref = _weighted_derivative(profile, report.window[0], report.window[1], report.log_w)
        align = _alignment(report.leading_right, ref)
        report.eigvec_alignment = align
    if not (align > 1.0 - tol.tol_vec):
        status = "fail"
        reasons.append(f"leading eigenvector alignment with phi' is {align:.9f}")
    if not (report.spectral_gap > tol.gap_min):
        status = "fail"
        reasons.append(f"spectral gap {report.spectral_gap:.3e} not above {tol.gap_min:g}")
    if status == "pass" and borderline:
        status = "indeterminate"
        reasons.append(f"{borderline} eigenvalue(s) cluster just outside the tolerance around 1")
    if status == "pass":
        reasons.append("eigenvalue 1 simple, aligned with phi', remaining spectrum inside the unit disc")
    n_art = report.artifact_count
    if n_art:
        reasons.append(f"{n_art} edge-localised eigenvalue(s) excluded as truncation artifacts")
    report.verdict = status
    report.reasons = reasons
    report.tolerances = tol
    return status


def analyse(model: ModelSpec, profile: WaveProfile, b: float | None = None, window=None,
            cfg: IntegratorConfig | None = None, tol: Tolerances | None = None):
    """Build, weight, decompose and judge; returns ``(report, monodromy)``."""
    M = build_monodromy(model, profile, window, cfg)
    if b is None:
        b = model.default_b or 0.0
    Mb = conjugate_weight(M, b) if b else M
    rep = spectrum(Mb, tol)
    verdict_h2(rep, profile, tol)
    return rep, M


# --- outputs ------------------------------------------------------------------


def format_report(report: FloquetReport, extra: dict | None = None) -> str:
    doc = report.summary()
    doc["spectrum"] = [[float(z.real), float(z.imag), float(abs(z)), bool(a)]
                       for z, a in zip(report.eigenvalues, report.artifact)]
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def spectrum_csv(report: FloquetReport) -> str:
    rows = [[float(z.real), float(z.imag), float(abs(z)), 1.0 if a else 0.0]
            for z, a in zip(report.eigenvalues, report.artifact)]
    return csv_text(["re", "im", "modulus", "artifact_flag"], rows)


def b_sweep_csv(M: MonodromyMatrix, bs, tol: Tolerances | None = None) -> str:
    rows = []
    for b in bs:
        rep = spectrum(conjugate_weight(M, b) if b else M, tol)
        for k, (z, a) in enumerate(zip(rep.eigenvalues, rep.artifact)):
            rows.append([float(b), float(k), float(z.real), float(z.imag), float(abs(z)), 1.0 if a else 0.0])
    return csv_text(["b", "index", "re", "im", "modulus", "artifact_flag"], rows)


def write_outputs(outdir, report: FloquetReport, extra: dict | None = None):
    from pathlib import Path

    outdir = Path(outdir)
    atomic_write_text(outdir / "floquet_report.json", format_report(report, extra))
    atomic_write_text(outdir / "spectrum.csv", spectrum_csv(report))
