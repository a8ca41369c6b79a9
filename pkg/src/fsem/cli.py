"""Command-line front end.

Subcommands::

    fsem fit       fit a model to long-format data
    fsem simulate  run a simulation study and write the MSE/CR tables
    fsem gof       pointwise and averaged goodness-of-fit indices
    fsem bands     bootstrap confidence bands for every coefficient function

A run is described by one model file (see :func:`fsem.modelspec.parse_model`)
whose ``set`` lines may carry settings; command-line flags override them.
Every artifact starts with a provenance header (tool version, hash of the
resolved configuration, seed). Outputs contain no timestamps or timings, so
repeating a command with the same seed reproduces them byte for byte.

Exit status: 0 on success, 2 on configuration or input errors, 3 on
numerical failure (a ``diagnostics.json`` is written to the output
directory).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import replace

import numpy as np

from . import __version__
from .dataset import DataError, read_long_csv
from .fit import FitConfig, fit_mcem, make_design
from .gp import GPError, ParamSet
from .inference import BootstrapError, bootstrap_covariances, confidence_band
from .modelspec import ConfigError, ModelError, parse_model

log = logging.getLogger("fsem")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_FIT_FLAGS = {
    # flag dest -> FitConfig field
    "alpha": "alpha",
    "J": "J",
    "basis": "basis_kind",
    "max_iter": "max_iter",
    "n_mc": "n_mc",
    "mc_cap": "mc_cap",
    "tol_coef": "tol_coef",
    "tol_sigma2": "tol_sigma2",
    "cv_folds": "cv_folds",
    "identification": "identification",
}


class UsageError(ValueError):
    """Inconsistent or missing run configuration."""


# ---------------------------------------------------------------------------
# parser

def _alpha_arg(text: str):
    if text == "cv":
        return "cv"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number or 'cv', got {text!r}") from None


def _fit_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("fitting")
    g.add_argument("--alpha", type=_alpha_arg, help="smoothing weight, or 'cv' for cross-validation")
    g.add_argument("--J", type=int, help="number of basis functions")
    g.add_argument("--basis", choices=("bspline", "fourier"), help="basis family")
    g.add_argument("--max-iter", type=int, help="maximum EM iterations")
    g.add_argument("--n-mc", type=int, help="initial Monte Carlo draws per subject")
    g.add_argument("--mc-cap", type=int, help="maximum Monte Carlo draws per subject")
    g.add_argument("--tol-coef", type=float, help="coefficient convergence tolerance")
    g.add_argument("--tol-sigma2", type=float, help="measurement-variance convergence tolerance")
    g.add_argument("--cv-folds", type=int, help="folds for smoothing cross-validation")
    g.add_argument("--identification", choices=("anchored", "unit_variance"),
                   help="scale convention of the reported parameters")


def _boot_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("bootstrap")
    g.add_argument("--keep-unconverged", action="store_true", default=None,
                   help="keep bootstrap refits that stop at the iteration limit")
    g.add_argument("--boot-max-iter", type=int, default=None, help="EM iteration limit of each bootstrap refit")


def _boot_policy(args, section: dict, default_keep: bool, default_iter):
    keep = args.keep_unconverged
    if keep is None:
        keep = bool(section.get("keep_unconverged", default_keep))
    max_iter = args.boot_max_iter if args.boot_max_iter is not None else section.get("max_iter", default_iter)
    return keep, (None if max_iter is None else int(max_iter))


def _common(p: argparse.ArgumentParser, need_model: bool):
    p.add_argument("--config", required=need_model, help="model file (with optional 'set' lines)")
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes for bootstrap replicates (default: number of cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_options(p: argparse.ArgumentParser):
    p.add_argument("--data", help="long-format CSV: subject,variable,time,value")
    p.add_argument("--covariates", help="covariate CSV: subject,name,value[,time]")
    p.add_argument("--domain", type=float, nargs=2, metavar=("LO", "HI"), help="time domain of the data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsem", description="Functional structural equation models.")
    parser.add_argument("--version", action="version", version=f"fsem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to data")
    _common(p, True)
    _data_options(p)
    _fit_options(p)

    p = sub.add_parser("simulate", help="run a simulation study")
    _common(p, False)
    p.add_argument("--scenario", choices=("sim1", "sim2"), help="simulation study")
    p.add_argument("--design", choices=("regular", "irregular", "mcar"), help="sampling design")
    p.add_argument("--n", type=int, help="subjects per replicate")
    p.add_argument("--m", type=int, help="time points per curve")
    p.add_argument("--reps", type=int, help="number of replicates")
    p.add_argument("--snr", type=float, help="signal-to-noise ratio")
    p.add_argument("--boot", type=int, default=None, help="bootstrap replicates per fit (0: no bands)")
    p.add_argument("--level", type=float, default=None, help="nominal band coverage")
    p.add_argument("--construction", choices=("ellipsoid", "pointwise"), default=None,
                   help="band used for the coverage rate")
    _boot_options(p)
    _fit_options(p)

    p = sub.add_parser("gof", help="goodness-of-fit indices of a fitted model")
    _common(p, True)
    _data_options(p)
    p.add_argument("--params", help="params.json written by 'fit' (refit when omitted)")
    p.add_argument("--grid-size", type=int, default=None, help="number of evaluation times")
    p.add_argument("--bandwidth", type=float, default=None, help="window half-width for sample covariances")
    _fit_options(p)

    p = sub.add_parser("bands", help="bootstrap confidence bands")
    _common(p, True)
    _data_options(p)
    p.add_argument("--boot", type=int, default=None, help="bootstrap replicates")
    p.add_argument("--level", type=float, default=None, help="nominal coverage")
    p.add_argument("--construction", choices=("ellipsoid", "pointwise"), default=None, help="band construction")
    p.add_argument("--grid-size", type=int, default=None, help="number of evaluation times")
    _boot_options(p)
    _fit_options(p)
    return parser


# ---------------------------------------------------------------------------
# configuration

def _read_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read model file: {exc}") from None
    return parse_model(text, source=path)


def _fit_config(settings: dict, args) -> FitConfig:
    fit_settings = dict(settings.get("fit", {}))
    if "basis" in settings:
        fit_settings.setdefault("basis_kind", settings["basis"][0])
        fit_settings.setdefault("J", settings["basis"][1])
    for flag, fld in _FIT_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            fit_settings[fld] = val
    if args.seed is not None:
        fit_settings["seed"] = args.seed
    try:
        return FitConfig.from_settings(fit_settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"fit settings: {exc}") from None


def _section(settings, name) -> dict:
    return dict(settings.get(name, {}))


def _resolved_hash(resolved: dict) -> str:
    text = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _provenance(resolved: dict, seed) -> list:
    return [f"fsem {__version__}", f"config_hash {_resolved_hash(resolved)}", f"seed {seed}"]


def _out_dir(args, settings) -> str:
    out = args.out or _section(settings, "output").get("dir")
    if not out:
        raise UsageError("no output directory (use --out or 'set output.dir = ...')")
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path, provenance, payload):
    doc = {"provenance": provenance, **payload}
    _write(path, json.dumps(doc, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _load_data(args, settings, model):
    data = _section(settings, "data")
    base = os.path.dirname(args.config) if args.config else ""
    # paths from the model file are relative to it, flags to the working directory
    path = args.data or (os.path.join(base, str(data["path"])) if "path" in data else None)
    if not path:
        raise UsageError("no data file (use --data or 'set data.path = ...')")
    cov = args.covariates or (os.path.join(base, str(data["covariates"])) if "covariates" in data else None)
    domain = tuple(args.domain) if args.domain else tuple(data.get("domain", (0.0, 1.0)))
    if len(domain) != 2:
        raise UsageError(f"domain needs two numbers, got {domain!r}")
    for f in (path, cov):
        if f is not None and not os.path.exists(f):
            raise UsageError(f"file not found: {f}")
    ds = read_long_csv(path, cov, variables=list(model.spec.indicators), domain=domain,
                       covariate_kinds=dict(model.spec.covariates))
    return ds, {"data": path, "covariates": cov, "domain": list(domain)}


def _alpha_json(alpha):
    return {k: float(v) for k, v in sorted(alpha.items())}


def _fit_payload(res, cfg):
    return {
        "config": cfg.as_dict(),
        "alpha": _alpha_json(res.alpha),
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "n_mc_final": int(res.n_mc_final),
        "loglik": float(res.loglik),
        "loglik_trace": [float(v) for v in res.loglik_trace],
        "tol_coef": [float(v) for v in res.tol_coef],
        "tol_sigma2": [float(v) for v in res.tol_sigma2],
    }


# ---------------------------------------------------------------------------
# commands

def _cmd_fit(args, ctx):
    model, settings = _read_model(args.config)
    cfg = _fit_config(settings, args)
    ds, paths = _load_data(args, settings, model)
    resolved = {"command": "fit", "model": args.config, **paths, "fit": cfg.as_dict()}
    ctx["resolved"] = resolved
    out = _out_dir(args, settings)
    ctx["out"] = out
    prov = _provenance(resolved, cfg.seed)
    log.info("resolved config %s", json.dumps(resolved, sort_keys=True, default=str))
    res = fit_mcem(model, ds, cfg)
    _write_json(os.path.join(out, "fit_report.json"), prov, _fit_payload(res, cfg))
    _write_json(os.path.join(out, "params.json"), prov, {"params": res.params.to_dict(),
                                                         "anchored_params": res.anchored_params.to_dict(),
                                                         "alpha": _alpha_json(res.alpha)})
    return 0


def _fitted(args, settings, model, ds, cfg):
    """Parameters from --params or a fresh fit; returns (design, anchored params, alpha)."""
    design = make_design(model, ds, J=cfg.J, kind=cfg.basis_kind)
    if args.params:
        try:
            with open(args.params, encoding="utf-8") as fh:
                doc = json.load(fh)
            params = ParamSet.from_dict(doc["anchored_params"])
            alpha = doc.get("alpha", cfg.alpha)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot load parameters from {args.params}: {exc}") from None
        return design, params, alpha, None
    res = fit_mcem(model, ds, cfg, design=design)
    return design, res.anchored_params, res.alpha, res


def _cmd_gof(args, ctx):
    from .gof import fit_indices

    model, settings = _read_model(args.config)
    cfg = _fit_config(settings, args)
    ds, paths = _load_data(args, settings, model)
    gof_set = _section(settings, "gof")
    grid_size = args.grid_size or int(gof_set.get("grid_size", 101))
    bandwidth = args.bandwidth if args.bandwidth is not None else gof_set.get("bandwidth")
    resolved = {"command": "gof", "model": args.config, **paths, "params": args.params, "fit": cfg.as_dict(),
                "grid_size": grid_size, "bandwidth": bandwidth}
    ctx["resolved"] = resolved
    out = _out_dir(args, settings)
    ctx["out"] = out
    design, params, _, _ = _fitted(args, settings, model, ds, cfg)
    from .fit import observed_time_range

    lo, hi = observed_time_range(ds)
    report = fit_indices(ds, design, params, grid=np.linspace(lo, hi, grid_size), bandwidth=bandwidth)
    _write(os.path.join(out, "gof.csv"), report.to_text(_provenance(resolved, cfg.seed)))
    return 0


def _effect_of(design, key):
    for eq in design.equations:
        for t in eq.terms:
            if t.key == key:
                return t.effect
    raise KeyError(key)


def _cmd_bands(args, ctx):
    model, settings = _read_model(args.config)
    cfg = _fit_config(settings, args)
    ds, paths = _load_data(args, settings, model)
    bset = _section(settings, "bands")
    B = args.boot if args.boot is not None else int(bset.get("boot", 200))
    level = args.level if args.level is not None else float(bset.get("level", 0.95))
    construction = args.construction or bset.get("construction", "ellipsoid")
    grid_size = args.grid_size or int(bset.get("grid_size", 101))
    keep, boot_iter = _boot_policy(args, bset, False, None)
    resolved = {"command": "bands", "model": args.config, **paths, "fit": cfg.as_dict(), "boot": B,
                "level": level, "construction": construction, "grid_size": grid_size,
                "keep_unconverged": keep, "boot_max_iter": boot_iter}
    ctx["resolved"] = resolved
    out = _out_dir(args, settings)
    ctx["out"] = out
    prov = _provenance(resolved, cfg.seed)
    design = make_design(model, ds, J=cfg.J, kind=cfg.basis_kind)
    res = fit_mcem(model, ds, cfg, design=design)
    bcfg = cfg if boot_iter is None else replace(cfg, max_iter=boot_iter)
    cov = bootstrap_covariances(model, ds, bcfg, B, seed=cfg.seed, design=design, initial=res,
                                require_convergence=not keep, threads=max(1, int(args.threads)))
    lo, hi = design.basis.domain
    grid = np.linspace(lo, hi, grid_size)
    written = []
    for key in sorted(cov.blocks, key=lambda k: "|".join(k)):
        effect = _effect_of(design, key)
        if effect in ("intercept",):
            effect = "concurrent"
        if effect == "smooth":
            log.info("skipping smooth effect %s (bands need a covariate value)", key)
            continue
        band = confidence_band(res.params.get(key), cov.blocks[key], design.basis, grid, level, construction,
                               effect=effect)
        name = "band_" + "_".join(key) + ".csv"
        band.to_csv(os.path.join(out, name), prov)
        written.append(name)
    _write_json(os.path.join(out, "bands_summary.json"), prov,
                {"B_used": cov.B, "dropped": cov.dropped, "files": written})
    return 0


def _cmd_simulate(args, ctx):
    from .sim import SimScenario, format_report, run_scenario

    settings = {}
    if args.config:
        _, settings = _read_model(args.config)
    sset = _section(settings, "simulate")
    scenario = args.scenario or sset.get("scenario", "sim1")
    over = {}
    for flag, fld in (("design", "design"), ("n", "N"), ("m", "M"), ("reps", "reps"), ("snr", "snr")):
        val = getattr(args, flag)
        if val is None:
            val = sset.get(fld.lower() if fld in ("N", "M") else fld)
        if val is not None:
            over[fld] = val
    if args.J is not None:
        over["J"] = args.J
    elif "J" in sset:
        over["J"] = sset["J"]
    seed = args.seed if args.seed is not None else int(sset.get("seed", 0))
    over["seed"] = seed
    try:
        scn = SimScenario.defaults(scenario, **over)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"simulation settings: {exc}") from None
    from .sim import default_fit_config

    base = default_fit_config(scn)
    fit_settings = {**base.as_dict(), **_section(settings, "fit")}
    for flag, fld in _FIT_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None and flag != "J":
            fit_settings[fld] = val
    fit_settings["J"] = scn.J
    fit_settings["seed"] = seed
    try:
        cfg = FitConfig.from_settings(fit_settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"fit settings: {exc}") from None
    n_boot = args.boot if args.boot is not None else int(sset.get("boot", 0))
    level = args.level if args.level is not None else float(sset.get("level", 0.95))
    construction = args.construction or sset.get("construction", "ellipsoid")
    from dataclasses import asdict

    keep, boot_iter = _boot_policy(args, _section(settings, "bands"), True, 50)
    resolved = {"command": "simulate", "scenario": asdict(scn), "fit": cfg.as_dict(), "boot": n_boot,
                "level": level, "construction": construction, "keep_unconverged": keep,
                "boot_max_iter": boot_iter}
    ctx["resolved"] = resolved
    out = _out_dir(args, settings)
    ctx["out"] = out
    prov = _provenance(resolved, seed)
    log.info("resolved config %s", json.dumps(resolved, sort_keys=True, default=str))

    def progress(r, res):
        log.info("replicate %d: %d iterations, converged=%s", r, res.iterations, res.converged)

    report = run_scenario(scn, cfg, n_boot=n_boot, level=level, construction=construction, progress=progress,
                          threads=max(1, int(args.threads)), require_convergence=not keep,
                          boot_max_iter=boot_iter)
    _write(os.path.join(out, "report.csv"), format_report(report, prov))
    _write_json(os.path.join(out, "replicates.json"), prov,
                {"mse": report.mse, "cr": report.cr, "cr_all_points": report.cr_all_points,
                 "cr_pointwise": report.cr_pointwise, "converged": report.converged,
                 "replicates": report.per_replicate})
    return 0


_COMMANDS = {"fit": _cmd_fit, "simulate": _cmd_simulate, "gof": _cmd_gof, "bands": _cmd_bands}


def _dump_diagnostics(ctx, exc):
    out = ctx.get("out")
    if not out:
        return None
    path = os.path.join(out, "diagnostics.json")
    doc = {"error": f"{type(exc).__name__}: {exc}", "resolved": ctx.get("resolved"),
           "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)}
    try:
        _write(path, json.dumps(doc, indent=2, default=str) + "\n")
    except OSError:
        return None
    return path


def run(argv=None) -> int:
    """Execute one command; returns the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx: dict = {}
    try:
        return _COMMANDS[args.command](args, ctx)
    except (GPError, BootstrapError, FloatingPointError, np.linalg.LinAlgError) as exc:
        path = _dump_diagnostics(ctx, exc)
        msg = f"fsem: numerical failure: {exc}"
        if path:
            msg += f" (diagnostics in {path})"
        print(msg, file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelError, DataError, UsageError, ValueError) as exc:
        print(f"fsem: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
