"""Command-line interface.

Subcommands: ``pop-fit``, ``estimate``, ``simulate`` and ``decompose``. Every
option can also be given in a YAML file passed with ``--config`` (keys are the
long option names with dashes or underscores); options on the command line
take precedence over the file.

Exit codes: 0 success, 2 input or configuration error, 3 identification
failure, 4 first-stage non-convergence, 5 estimation failure, 6 too many failed
Monte Carlo replicates.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml
from scipy import stats

from . import __version__
from .bias_lab import (
    DgpConfig,
    DgpError,
    DiscreteJoint,
    JointError,
    McError,
    decompose_did,
    joint_from_dgp,
    monte_carlo,
    prop1_predict,
    simple_did_bias,
    simulate,
    theorem1_bias_fd,
    theorem1_bias_pols,
)
from .bias_lab.montecarlo import replicate_seeds
from .data import PANEL, DataError, Roles, ingest_csv, write_csv
from .estimators import (
    BootstrapError,
    BootstrapPlan,
    EstimationData,
    EstimationError,
    did_fd_naive,
    did_fd_twostep,
    did_pols_naive,
    did_pols_twostep,
)
from .numerics import NumericsError, RankDeficiencyError
from .pop import FirstStageError, IdentificationError, PopSpec, pop_fit

SCHEMA_VERSION = "1.0"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IDENT = 3
EXIT_CONVERGENCE = 4
EXIT_ESTIMATION = 5
EXIT_REPLICATES = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# option name -> (default, type)
_OPTIONS = {
    "input": (None, str), "roles": (None, str), "dgp": (None, str), "joint": (None, str),
    "out": (None, str), "csv": (None, str), "seed": (0, int), "boot": (200, int),
    "reps": (100, int), "n": (4000, int), "layout": ("panel", str), "estimators": (None, str),
    "se": ("bootstrap", str), "jobs": (None, int), "first_stage_rows": ("pooled", str),
    "moment_sample": (1_000_000, int), "dump_replicate": (None, str),
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="misdid", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"misdid {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file with option values")
        p.add_argument("--out", help="output path (JSON report or directory for simulate)")
        p.add_argument("--seed", type=int, help="root random seed (default 0)")
        p.add_argument("--jobs", type=int, help="worker processes (default: all CPUs)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("pop-fit", help="fit the partial observability probit")
    common(p)
    p.add_argument("--input", help="long-format CSV")
    p.add_argument("--roles", help="YAML role file")
    p.add_argument("--first-stage-rows", choices=["pooled", "baseline"])

    p = sub.add_parser("estimate", help="naive and two-step DID estimates")
    common(p)
    p.add_argument("--input", help="long-format CSV")
    p.add_argument("--roles", help="YAML role file")
    p.add_argument("--estimators", help="comma list: naive, twostep, true or full method names")
    p.add_argument("--se", choices=["bootstrap", "analytic"])
    p.add_argument("--boot", type=int, help="bootstrap replications (default 200)")
    p.add_argument("--csv", help="also write a CSV table of estimates here")
    p.add_argument("--first-stage-rows", choices=["pooled", "baseline"])

    p = sub.add_parser("simulate", help="Monte Carlo study on a simulation design")
    common(p)
    p.add_argument("--dgp", help="YAML design file (default: benchmark design)")
    p.add_argument("--layout", choices=["panel", "rcs"])
    p.add_argument("--n", type=int, help="sample size per replicate (default 4000)")
    p.add_argument("--reps", type=int, help="replicates (default 100)")
    p.add_argument("--estimators", help="comma list: naive, twostep, true or full method names")
    p.add_argument("--se", choices=["bootstrap", "analytic"])
    p.add_argument("--boot", type=int, help="bootstrap replications (default 200)")
    p.add_argument("--dump-replicate", help="write replicate 0's dataset to this CSV")

    p = sub.add_parser("decompose", help="DID decomposition and bias formulas")
    common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--joint", help="YAML/JSON file with 2x2 tables prob, te, gain")
    src.add_argument("--dgp", help="YAML design file")
    p.add_argument("--moment-sample", type=int, help="draws for population moments")
    return ap


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_INPUT) from exc
        if not isinstance(cfg, dict):
            raise CliError("config file must hold a mapping", EXIT_INPUT)
        cfg = {str(k).replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(_OPTIONS) - {"command"}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_INPUT)
    opts = {"command": args.command, "verbose": bool(getattr(args, "verbose", False))}
    for name, (default, kind) in _OPTIONS.items():
        value = getattr(args, name, None)
        if value is None:
            value = cfg.get(name, default)
        if value is not None and kind is int:
            try:
                value = int(value)
            except (TypeError, ValueError) as exc:
                raise CliError(f"option {name} must be an integer", EXIT_INPUT) from exc
        opts[name] = value
    if opts["jobs"] is None:
        opts["jobs"] = os.cpu_count() or 1
    return opts


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(opts: dict, files=()) -> dict:
    keyed = {k: v for k, v in opts.items() if k not in ("jobs", "verbose", "out", "csv", "dump_replicate")}
    payload = {"options": keyed, "files": [_file_digest(f) for f in files if f]}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return {"seed": opts.get("seed"), "config_hash": digest, "version": __version__,
            "command": opts["command"]}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def load_schema(name: str) -> dict:
    text = resources.files("misdid").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def _emit(report: dict, schema: str, out) -> str:
    report = _clean({"schema_version": SCHEMA_VERSION, **report})
    jsonschema.validate(report, load_schema(schema))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return text


def _load_data(opts):
    if not opts["input"] or not opts["roles"]:
        raise CliError("--input and --roles are required", EXIT_INPUT)
    try:
        roles = Roles.load(opts["roles"])
        return ingest_csv(opts["input"], roles)
    except DataError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc


def _pop_spec(roles) -> PopSpec:
    if not roles.instruments:
        raise CliError("no instruments given: the misclassification equation needs at least "
                       "one variable excluded from the treatment equation", EXIT_IDENT)
    try:
        return PopSpec.from_roles(roles)
    except IdentificationError as exc:
        raise CliError(str(exc), EXIT_IDENT) from exc


def cmd_pop_fit(opts) -> int:
    ds = _load_data(opts)
    spec = _pop_spec(ds.roles)
    try:
        fit = pop_fit(ds, spec, rows=opts["first_stage_rows"])
    except (IdentificationError, RankDeficiencyError) as exc:
        raise CliError(f"first stage not identified: {exc}", EXIT_IDENT) from exc
    wald = None
    if fit.vcov is not None:
        z = math.atanh(fit.rho) / math.sqrt(fit.vcov[-1, -1])
        wald = {"statistic": z * z, "df": 1, "p_value": float(stats.chi2.sf(z * z, 1))}
    report = {"command": "pop-fit", "fit": fit.to_dict(), "wald_rho": wald,
              "provenance": _provenance(opts, [opts["input"], opts["roles"]])}
    _emit(report, "pop_fit", opts["out"])
    if not fit.converged:
        print("first stage did not converge: " + "; ".join(fit.diagnostics), file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _methods(selection, layout, has_true):
    prefix = "fd" if layout == "panel" else "pols"
    if not selection:
        names = ["naive", "twostep"] + (["true"] if has_true else [])
    else:
        names = [s.strip() for s in str(selection).split(",") if s.strip()]
    out = []
    for name in names:
        full = name if "_" in name else f"{prefix}_{name}"
        if not full.startswith(prefix + "_") or full.split("_", 1)[1] not in ("naive", "twostep",
                                                                                "true"):
            raise CliError(f"estimator {name!r} is not available for layout {layout}", EXIT_INPUT)
        if full.endswith("_true") and not has_true:
            raise CliError("the infeasible benchmark needs a true_treatment role", EXIT_INPUT)
        if full not in out:
            out.append(full)
    return out


def _run_estimator(name, data, spec, opts):
    se = opts["se"]
    plan = BootstrapPlan(replications=opts["boot"], seed=opts["seed"], n_jobs=opts["jobs"])
    if name in ("fd_naive", "fd_true"):
        return did_fd_naive(data, se=se, plan=plan, use_true_treatment=name == "fd_true")
    if name in ("pols_naive", "pols_true"):
        return did_pols_naive(data, se=se, plan=plan, use_true_treatment=name == "pols_true")
    if name == "fd_twostep":
        return did_fd_twostep(data, spec, plan, se=se)
    return did_pols_twostep(data, spec, plan, se=se, first_stage_rows=opts["first_stage_rows"])


def cmd_estimate(opts) -> int:
    ds = _load_data(opts)
    layout = "panel" if ds.layout == PANEL else "rcs"
    methods = _methods(opts["estimators"], layout, ds.roles.true_treatment is not None)
    spec = _pop_spec(ds.roles) if any(m.endswith("twostep") for m in methods) else None
    try:
        data = EstimationData.from_dataset(ds)
    except DataError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    estimates = []
    for name in methods:
        try:
            est = _run_estimator(name, data, spec, opts)
        except DataError as exc:
            raise CliError(f"{name}: {exc}", EXIT_INPUT) from exc
        except IdentificationError as exc:
            raise CliError(f"{name}: {exc}", EXIT_IDENT) from exc
        except FirstStageError as exc:
            raise CliError(f"{name}: {exc}", EXIT_CONVERGENCE) from exc
        except RankDeficiencyError as exc:
            raise CliError(f"{name}: first stage not identified: {exc}", EXIT_IDENT) from exc
        except (EstimationError, BootstrapError, NumericsError) as exc:
            raise CliError(f"{name}: {exc}", EXIT_ESTIMATION) from exc
        estimates.append(est.to_dict())
    report = {"command": "estimate", "layout": ds.layout, "estimates": estimates,
              "provenance": _provenance(opts, [opts["input"], opts["roles"]])}
    _emit(report, "estimate", opts["out"])
    if opts["csv"]:
        import csv

        with open(opts["csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "tau", "se", "se_source", "n_obs"])
            for e in estimates:
                w.writerow([e["method"], repr(e["tau"]), "" if e["se"] is None else repr(e["se"]),
                            e["se_source"] or "", e["n_obs"]])
    return EXIT_OK


def _load_dgp(path) -> DgpConfig:
    if not path:
        return DgpConfig()
    try:
        return DgpConfig.load(path)
    except (DgpError, OSError, TypeError) as exc:
        raise CliError(f"invalid DGP configuration: {exc}", EXIT_INPUT) from exc


def cmd_simulate(opts) -> int:
    dgp = _load_dgp(opts["dgp"])
    layout = opts["layout"]
    if layout not in ("panel", "rcs"):
        raise CliError("layout must be 'panel' or 'rcs'", EXIT_INPUT)
    methods = _methods(opts["estimators"], layout, True)
    if opts["reps"] < 2 or opts["n"] < 10:
        raise CliError("need reps >= 2 and n >= 10", EXIT_INPUT)
    out = Path(opts["out"] or "mc_out")
    out.mkdir(parents=True, exist_ok=True)
    if opts["dump_replicate"]:
        ds = simulate(dgp, layout, opts["n"], replicate_seeds(opts["seed"], 0)[0])
        write_csv(ds, opts["dump_replicate"])
        with open(Path(opts["dump_replicate"]).with_suffix(".roles.yaml"), "w",
                  encoding="utf-8") as fh:
            yaml.safe_dump(ds.roles.to_mapping(), fh, sort_keys=False)
    try:
        report = monte_carlo(dgp, layout, methods, opts["n"], opts["reps"], opts["seed"],
                             se=opts["se"], boot=opts["boot"], n_jobs=opts["jobs"])
    except McError as exc:
        raise CliError(str(exc), EXIT_REPLICATES) from exc
    report.write_csv(out / "mc_summary.csv")
    report.write_replicates_csv(out / "mc_replicates.csv")
    doc = {"command": "simulate", "report": report.to_dict(),
           "files": {"summary": "mc_summary.csv", "replicates": "mc_replicates.csv"},
           "provenance": _provenance(opts, [opts["dgp"]])}
    _emit(doc, "simulate", out / "mc_report.json")
    return EXIT_OK


def cmd_decompose(opts) -> int:
    extra = {}
    if opts["joint"]:
        try:
            with open(opts["joint"], encoding="utf-8") as fh:
                mapping = yaml.safe_load(fh)
            joint = DiscreteJoint.from_mapping(mapping or {})
        except (OSError, yaml.YAMLError, JointError, TypeError, ValueError) as exc:
            raise CliError(f"invalid joint table: {exc}", EXIT_INPUT) from exc
        files = [opts["joint"]]
    else:
        dgp = _load_dgp(opts["dgp"])
        ms = opts["moment_sample"]
        joint = joint_from_dgp(dgp, ms, opts["seed"])
        extra["theorem1"] = {"bias_fd": theorem1_bias_fd(dgp, ms, opts["seed"]),
                             "bias_pols": theorem1_bias_pols(dgp, ms, opts["seed"]),
                             "simple_did_bias": simple_did_bias(dgp) if dgp.k == 0 else None}
        files = [opts["dgp"]]
    try:
        rep = decompose_did(joint)
    except JointError as exc:
        raise CliError(f"invalid joint table: {exc}", EXIT_INPUT) from exc
    t1, t2 = prop1_predict(rep.att, rep.atu, rep.q1, rep.q0, rep.dt_star)
    doc = {"command": "decompose", "decomposition": rep.to_dict(),
           "prop1": {"term1": t1, "term2": t2, "term1_agrees": bool(abs(t1 - rep.term1) <= 1e-12),
                     "term2_agrees": bool(abs(t2 - rep.term2) <= 1e-12)},
           "joint": {"prob": joint.prob.tolist(), "te": joint.te.tolist(),
                     "gain": joint.gain.tolist()},
           "provenance": _provenance(opts, files), **extra}
    _emit(doc, "decompose", opts["out"])
    return EXIT_OK


_COMMANDS = {"pop-fit": cmd_pop_fit, "estimate": cmd_estimate, "simulate": cmd_simulate,
             "decompose": cmd_decompose}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        opts = _resolve(args)
        return _COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"misdid {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
