"""Command-line entry point.

Commands
--------
``models``      list the builtin model families and their parameters.
``solve-wave``  solve for a front profile, optionally continue it in a parameter.
``floquet``     monodromy spectrum and stability verdict for a profile file.
``exit``        two-wave exit experiment (or a sweep) from a JSON run config.
``replay``      re-run the command recorded in a ``manifest.json``.

Exit codes: 0 success/pass, 2 validation error, 3 solver failure, 4 stability
verdict ``fail``, 5 pinned front, 6 stability verdict ``indeterminate``.

Every command writes ``manifest.json`` into its output directory. The output
directory is ``--out`` if given, else ``$LATTICEWAVES_OUT``, else ``./out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from ._io import atomic_write_json, atomic_write_text, csv_text, file_digest
from .exitlab import (ExitConfig, FitError, adjoint_mode, front_back_pair, normalize_pair, run_exit,
                      scaling_checks, sweep, sweep_csv, write_outputs as write_exit_outputs)
from .floquet import Tolerances, analyse, b_sweep_csv, write_outputs as write_floquet_outputs
from .model import BlowUpError, ModelError
from .stepper import StepSizeUnderflow, WindowError
from .waves import (PinnedFront, SolverError, continue_branch, front_seed, read_profile, solve_profile,
                    write_profile)
from .zoo import MODEL_FAMILIES, build_family, load_model, model_to_dict

log = logging.getLogger("latticewaves")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_H2_FAIL = 4
EXIT_PINNED = 5
EXIT_INDETERMINATE = 6

OUT_ENV = "LATTICEWAVES_OUT"

VERDICT_CODES = {"pass": EXIT_OK, "fail": EXIT_H2_FAIL, "indeterminate": EXIT_INDETERMINATE}


class ValidationError(ValueError):
    pass


# --- helpers ----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"parameter {item!r} is not of the form name=value")
        try:
            params[key.strip()] = float(val)
        except ValueError:
            raise ValidationError(f"parameter {key!r} has non-numeric value {val!r}") from None
    return params


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, inputs: list, outputs: list,
                    status: str) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "version": __version__,
        "outputs": sorted(outputs),
        "status": status,
    }
    atomic_write_json(out / "manifest.json", manifest)


def _strip_out(argv: list[str]) -> list[str]:
    """Drop ``--out DIR`` / ``--out=DIR`` so a manifest is independent of where it was written."""
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res


# --- models -------------------------------------------------------------------------


def cmd_models(args, argv) -> int:
    listing = [
        {"name": name,
         "params": {k: {"default": d, "doc": doc} for k, (d, doc) in schema.items()},
         "doc": (factory.__doc__ or "").strip().splitlines()[0]}
        for name, (factory, schema) in MODEL_FAMILIES.items()
    ]
    if args.json:
        print(json.dumps(listing, indent=2))
        return EXIT_OK
    for entry in listing:
        ps = ", ".join(f"{k}={v['default']:g}" for k, v in entry["params"].items())
        print(f"{entry['name']:<12} ({ps})  {entry['doc']}")
    return EXIT_OK


# --- solve-wave -----------------------------------------------------------------------


def _resolve_model(args):
    if args.model_file:
        if args.param:
            raise ValidationError("--param cannot be combined with --model-file")
        return load_model(args.model_file), None, {}
    params = _parse_params(args.param)
    try:
        return build_family(args.model, params), args.model, params
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def _endpoints(model, args):
    def pick(v, default):
        if v is None:
            return default
        return [float(x) for x in v.split(",")]

    eq = model.equilibria
    alpha = pick(args.alpha, eq[-1])
    omega = pick(args.omega, eq[0])
    return alpha, omega


def cmd_solve_wave(args, argv) -> int:
    model, family, params = _resolve_model(args)
    alpha, omega = _endpoints(model, args)
    config = {"model": model_to_dict(model), "alpha": alpha, "omega": omega, "Xi": args.xi, "m": args.m,
              "c0": args.c0, "width": args.width, "tol": args.tol, "continuation": None}
    out = _out_dir(args)
    inputs = [args.model_file] if args.model_file else []
    outputs = []

    seed = front_seed(model, alpha, omega, Xi=args.xi, m=args.m, width=args.width, c0=args.c0)
    result = solve_profile(model, seed, tol=args.tol)
    if isinstance(result, PinnedFront):
        print(f"pinned: |c| = {abs(result.c):.3e} below threshold ({result.reason})")
        _write_manifest(out, "solve-wave", _strip_out(argv), config, inputs, outputs, "pinned")
        return EXIT_PINNED
    write_profile(out / "profile.txt", result)
    outputs.append("profile.txt")
    cert = "certified" if result.certified else "NOT certified"
    print(f"c = {result.c:.12g}  residual = {result.residual:.2e}  decay = {result.decay_rate}  ({cert})")

    status = "ok"
    if args.continuation:
        if family is None:
            raise ValidationError("--continue needs a builtin model family (--model)")
        name, end, step = args.continuation
        if name not in MODEL_FAMILIES[family][1]:
            raise ValidationError(f"{family} has no parameter {name!r}")
        if name not in params:
            raise ValidationError(f"give the starting value with --param {name}=...")
        end, step = float(end), float(step)
        if not step > 0:
            raise ValidationError("continuation step must be positive")
        config["continuation"] = {"param": name, "start": params[name], "end": end, "step": step}

        def family_at(p):
            return build_family(family, {**params, name: p})

        run = continue_branch(family_at, result, (params[name], end), param_name=name,
                              h0=step, h_max=step, h_min=step / 64)
        atomic_write_text(out / "branch.csv", csv_text([name, "c", "pinned"], run.csv_rows()))
        outputs.append("branch.csv")
        for k, pt in enumerate(run.branch):
            if not pt.pinned:
                fname = f"branch_{k:03d}.txt"
                write_profile(out / fname, pt.profile)
                outputs.append(fname)
        print(f"branch: {len(run.branch)} points" + (f", pinned from {name} = {run.pinned_from:g}"
                                                      if run.pinned_from is not None else ""))
        if run.pinned_from is not None:
            status = "pinned"
    _write_manifest(out, "solve-wave", _strip_out(argv), config, inputs, outputs, status)
    return EXIT_PINNED if status == "pinned" else EXIT_OK


# --- floquet ------------------------------------------------------------------------------


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_floquet(args, argv) -> int:
    profile = read_profile(args.profile)
    model = profile.model
    window = (-args.window, args.window) if args.window else None
    tol = Tolerances()
    rep, M = analyse(model, profile, b=args.b, window=window, tol=tol)
    out = _out_dir(args)
    b_used = args.b if args.b is not None else (model.default_b or 0.0)
    config = {"profile": args.profile, "b": b_used, "window": [M.lo, M.hi], "tolerances": asdict(tol)}
    write_floquet_outputs(out, rep, {"profile": Path(args.profile).name})
    outputs = ["floquet_report.json", "spectrum.csv"]
    if args.b_sweep:
        bs = _parse_floats(args.b_sweep)
        config["b_sweep"] = bs
        atomic_write_text(out / "spectrum_b_sweep.csv", b_sweep_csv(M, bs, tol))
        outputs.append("spectrum_b_sweep.csv")
    print(rep.summary())
    _write_manifest(out, "floquet", _strip_out(argv), config, [args.profile], outputs, rep.verdict)
    return VERDICT_CODES[rep.verdict]


# --- exit ---------------------------------------------------------------------------------


EXIT_KEYS = {"profile_minus", "profile_plus", "front", "tau_minus", "tau_plus", "tau_star", "delta",
             "perturbation", "seed", "pert_site", "t_end", "sample_every", "b", "window", "rtol", "atol",
             "eps_max", "lam", "transient_fraction", "embedded", "sweep"}


def _load_run_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - EXIT_KEYS
    if unknown:
        raise ValidationError(f"unknown run-config keys: {sorted(unknown)}")
    base = path.parent

    def resolve(p):
        return str((base / p)) if not Path(p).is_absolute() else p

    if "front" in raw:
        if "profile_minus" in raw or "profile_plus" in raw:
            raise ValidationError("give either 'front' or 'profile_minus'/'profile_plus', not both")
        files = [resolve(raw["front"])]
    else:
        if "profile_minus" not in raw or "profile_plus" not in raw:
            raise ValidationError("run config needs 'front' or both 'profile_minus' and 'profile_plus'")
        files = [resolve(raw["profile_minus"]), resolve(raw["profile_plus"])]
    return raw, files


def _certify(profiles, b, allow: bool) -> tuple[list[dict], float | None]:
    """Decay certificate plus stability verdict for each profile; returns records and min lambda."""
    records, lams = [], []
    for name, p in profiles:
        rec = {"profile": name, "decay_certified": bool(p.certified)}
        if p.certified or allow:
            rep, _ = analyse(p.model, p, b=b)
            rec.update(verdict=rep.verdict, lambda_decay=rep.lambda_decay, spectral_gap=rep.spectral_gap)
            if math.isfinite(rep.lambda_decay):
                lams.append(rep.lambda_decay)
        else:
            rec["verdict"] = "not run"
        records.append(rec)
    return records, (min(lams) if lams else None)


def cmd_exit(args, argv) -> int:
    raw, files = _load_run_config(args.config)
    if len(files) == 1:
        model, pm, pp = front_back_pair(read_profile(files[0]))
        names = [(files[0] + " (reflected)", pm), (files[0], pp)]
    else:
        model, pm, pp = normalize_pair(read_profile(files[0]), read_profile(files[1]))
        names = [(files[0], pm), (files[1], pp)]
    fields = {k: v for k, v in raw.items() if k not in ("front", "profile_minus", "profile_plus", "embedded",
                                                        "sweep")}
    if "window" in fields and fields["window"] is not None:
        fields["window"] = tuple(int(v) for v in fields["window"])
    # validate the geometry before any integration
    cfg = ExitConfig(model, pm, pp, **fields)

    records, lam = _certify(names, cfg.b if cfg.b is not None else cfg.weight, args.allow_uncertified)
    bad = [r for r in records if not r["decay_certified"] or r["verdict"] != "pass"]
    if bad and not args.allow_uncertified:
        for r in bad:
            print(f"uncertified profile {r['profile']}: decay_certified={r['decay_certified']} "
                  f"verdict={r['verdict']}", file=sys.stderr)
        return EXIT_H2_FAIL
    if cfg.lam is None and lam is not None:
        from dataclasses import replace

        cfg = replace(cfg, lam=lam)

    out = _out_dir(args)
    config = {"run": cfg.describe(), "certification": records, "allow_uncertified": bool(args.allow_uncertified),
              "embedded": bool(raw.get("embedded", True)), "sweep": raw.get("sweep"), "jobs": args.jobs}
    outputs = []
    if raw.get("sweep"):
        sw = raw["sweep"]
        rows = sweep(cfg, taus=sw.get("taus", [cfg.tau_plus - cfg.tau_minus]), deltas=sw.get("deltas", [cfg.delta]),
                     seeds=sw.get("seeds", [cfg.seed]), jobs=args.jobs)
        atomic_write_text(out / "sweep_summary.csv", sweep_csv(rows))
        atomic_write_json(out / "sweep_checks.json", scaling_checks(rows))
        outputs += ["sweep_summary.csv", "sweep_checks.json"]
        failed = [r for r in rows if r["status"] != "ok"]
        print(f"sweep: {len(rows)} cells, {len(failed)} failed")
        status = "ok" if not failed else "partial"
    else:
        try:
            modes = (adjoint_mode(pm), adjoint_mode(pp))
        except ValueError as exc:  # only reachable for uncertified profiles
            log.warning("projection cross-check skipped: %s", exc)
            modes = None
        rep = run_exit(cfg, embedded=bool(raw.get("embedded", True)), modes=modes)
        outputs += [Path(p).name for p in write_exit_outputs(out, rep).values()]
        print(f"fitted rate a = {rep.fitted_rate_a:.4g} (R^2 = {rep.fit_r2:.4f}), "
              f"predicted a = {rep.predicted.get('a_pred', float('nan')):.4g}")
        status = "ok"
    inputs = [args.config] + files
    _write_manifest(out, "exit", _strip_out(argv), config, inputs, outputs, status)
    return EXIT_OK


# --- replay ---------------------------------------------------------------------------------


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    rerun = list(manifest["argv"])
    if args.out:
        rerun += ["--out", args.out]
    return main(rerun)


# --- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticewaves", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("models", help="list builtin model families")
    s.add_argument("--json", action="store_true", help="machine-readable listing")
    s.set_defaults(func=cmd_models)

    def add_out(sp):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")

    s = sub.add_parser("solve-wave", help="solve for a travelling front profile")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--model", default="nagumo", choices=sorted(MODEL_FAMILIES), help="builtin model family")
    g.add_argument("--model-file", help="model JSON file")
    s.add_argument("--param", action="append", metavar="NAME=VALUE", help="model parameter (repeatable)")
    s.add_argument("--alpha", help="left limit, comma-separated (default: last listed equilibrium)")
    s.add_argument("--omega", help="right limit, comma-separated (default: first listed equilibrium)")
    s.add_argument("--xi", type=float, default=40.0, help="half-length of the profile grid")
    s.add_argument("--m", type=int, default=32, help="grid points per lattice unit")
    s.add_argument("--c0", type=float, default=0.1, help="initial speed guess")
    s.add_argument("--width", type=float, default=2.0, help="width of the tanh seed")
    s.add_argument("--tol", type=float, default=1e-11, help="Newton tolerance")
    s.add_argument("--continue", dest="continuation", nargs=3, metavar=("PARAM", "END", "STEP"),
                   help="continue the branch in PARAM up to END with step STEP")
    add_out(s)
    s.set_defaults(func=cmd_solve_wave)

    s = sub.add_parser("floquet", help="monodromy spectrum and stability verdict")
    s.add_argument("profile", help="profile file")
    s.add_argument("--b", type=float, help="weight exponent (default: the profile's certified default_b)")
    s.add_argument("--window", type=int, help="half-width of the truncation window in sites")
    s.add_argument("--b-sweep", help="comma-separated weights; writes spectrum_b_sweep.csv")
    add_out(s)
    s.set_defaults(func=cmd_floquet)

    s = sub.add_parser("exit", help="two-wave exit experiment from a JSON run config")
    s.add_argument("config", help="run config JSON")
    s.add_argument("--allow-uncertified", action="store_true",
                   help="run even if a profile is not decay-certified or fails the stability check")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    add_out(s)
    s.set_defaults(func=cmd_exit)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    add_out(s)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (SolverError, FitError, BlowUpError, StepSizeUnderflow) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValidationError, ModelError, WindowError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
