"""Command-line interface: ``weights``, ``estimate``, ``diagnose``, ``simulate``.

Exit codes: 0 success, 2 usage, 3 data validation, 4 solver failure.
Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .balance import solve_entropy, WeightSet
from .data import EstimandSpec, FeatureMap, TRANSFORMS, load_dataset
from .diagnostics import QUANTILE_PROBS, diagnose, effect_summary, group_quantiles
from .errors import DataError, ResweightError, SolverError
from .inference import Specification, estimate
from .montecarlo import expand_grid, load_config, records_csv, report_csv, run_study
from .propensity import fit_glm, ipw_weights

SEED_ENV = "RESWEIGHT_SEED"
EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 2, 3, 4

log = logging.getLogger("resweight")

FORMATS_HELP = """\
input CSV: RFC-4180, UTF-8, header row required, '.' decimal separator.
  The outcome and treatment columns are named by --outcome/--treatment
  (default y, z); every other column is a numeric covariate. Treatment
  must be 0/1; no missing values.
weights CSV: unit,w,group[,pscore]  (w sums to 1 within each group)
external weights (--weighting external:PATH): a CSV with a 'w' column,
  one row per input row in the same order.
estimate CSV: spec,tau_wdim,neyman_se,tau_wdim_res,res_sep_se,superpop_se,
  pct_improvement,r2_y,r2_z
simulate config: JSON object of SimulationConfig keys; list values expand
  into a grid. Full schemas are in docs/formats.md.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"error": "usage", "message": message})
        sys.exit(EXIT_USAGE)


def _emit_error(obj: dict) -> None:
    sys.stderr.write(json.dumps(obj) + "\n")


def _g(v: float) -> str:
    return f"{v:.10g}"


def _jsonable(obj):
    if isinstance(obj, float):
        return float(_g(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2)


def _add_data_args(p: argparse.ArgumentParser, weighting: bool = True) -> None:
    p.add_argument("data", help="input CSV")
    p.add_argument("--outcome", default="y", help="outcome column (default y)")
    p.add_argument("--treatment", default="z", help="treatment column (default z)")
    p.add_argument("--estimand", choices=["ate", "att"], default="ate")
    p.add_argument("--scope", choices=["sample", "superpop"], default="sample")
    p.add_argument("--transform", choices=TRANSFORMS, default="identity",
                   help="feature map phi(X) balanced upon and adjusted for")
    p.add_argument("--tol", type=float, default=1e-8, help="entropy balance tolerance")
    p.add_argument("--max-iter", type=int, default=200)
    if weighting:
        p.add_argument("--weighting", default="entropy",
                       help="entropy | ipw-probit | ipw-logit | external:PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resweight", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=FORMATS_HELP)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("weights", help="construct weights and print their quantiles",
                       epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_data_args(p)
    p.add_argument("-o", "--output", default="weights.csv", help="weights CSV path")
    p.add_argument("--trace", help="write the entropy solver trace (JSON) here")
    p.add_argument("--format", choices=["csv", "json"], default="csv",
                   help="format of the quantile table on stdout")

    p = sub.add_parser("estimate", help="effect estimate with Neyman and residualized SEs",
                       epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_data_args(p)
    p.add_argument("--spec", choices=[s.value for s in Specification], default="separate")
    p.add_argument("--hc1", action="store_true", help="apply the n/(n-k) inflation")
    p.add_argument("--att-divisor", choices=["n", "n_t"], default="n",
                   help="divisor of the superpopulation addend for ATT")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.add_argument("-o", "--output", help="write to this file instead of stdout")

    p = sub.add_parser("diagnose", help="balance and partial R^2 table",
                       epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_data_args(p)
    p.add_argument("-o", "--output", help="diagnostics CSV path (default stdout)")

    p = sub.add_parser("simulate", help="Monte Carlo coverage study from a JSON config",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (scalars or lists; lists expand into a grid):\n"
                              "  framework design|model|superpop, design D1|D2|D3,\n"
                              "  outcome O1|O2|O3, effects homogeneous|heterogeneous,\n"
                              "  estimand ATE|ATT, weighting entropy|ipw-probit|ipw-logit,\n"
                              "  n (300), replications (2000), seed, tol (1e-8),\n"
                              "  att_divisor n|n_t, max_failure_rate (0.01)\n"
                              f"default seed from ${SEED_ENV} when --seed is absent")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--replications", type=int, default=None, help="override config")
    p.add_argument("-o", "--output", help="report CSV path (default stdout)")
    p.add_argument("--dump", help="per-replication CSV path")
    return parser


def _spec(args) -> EstimandSpec:
    return EstimandSpec.parse(args.estimand, args.scope)


def _load_external(path: str, d) -> WeightSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "w" not in rows[0]:
        raise DataError(f"{path}: external weights file needs a 'w' column")
    try:
        w = [float(r["w"]) for r in rows]
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric weight ({exc})") from None
    return WeightSet.from_external(d, w)


def _weights(args, d, spec):
    fmap = FeatureMap(args.transform)
    method = args.weighting
    if method == "entropy":
        return solve_entropy(d, spec, args.tol, args.max_iter, fmap=fmap,
                             trace_path=getattr(args, "trace", None)), None
    if method in ("ipw-probit", "ipw-logit"):
        fit = fit_glm(d, method.split("-")[1])
        if fit.separated:
            raise SolverError("propensity model: perfect separation; " + "; ".join(fit.notes))
        return ipw_weights(fit, d, spec), fit.pscore
    if method.startswith("external:"):
        return _load_external(method.split(":", 1)[1], d), None
    raise ValueError(f"unknown weighting {method!r}")


def _log_config(args) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved["defaults"] = {
        "entropy": {"tol": getattr(args, "tol", 1e-8), "max_iter": getattr(args, "max_iter", 200),
                    "armijo_c": 1e-4, "shrink": 0.5, "cond_limit": 1e12, "standardize": True},
        "propensity": {"clip": 1e-6, "max_iter": 100, "max_halvings": 30,
                       "separation_norm": 1e3},
        "inference": {"variance": "HC1" if getattr(args, "hc1", False) else "HC0",
                      "ci": "normal 95%", "rank_tol": 1e-10,
                      "att_divisor": getattr(args, "att_divisor", "n")},
        "diagnostics": {"smd_denominator": "pooled unweighted SD", "quantiles": "type 7",
                        "quantile_rescale": "group mean 1"},
    }
    log.info(json.dumps({"event": "config", **_jsonable(resolved)}, sort_keys=True, default=str))


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_weights(args) -> int:
    d = load_dataset(args.data, args.outcome, args.treatment)
    spec = _spec(args)
    ws, pscore = _weights(args, d, spec)
    ws.to_csv(args.output, d, pscore)
    q = group_quantiles(ws, d)
    if args.format == "json":
        _write(_dumps({"weights": args.output, "provenance": ws.provenance.value,
                       "quantiles": q, "meta": ws.meta}) + "\n", None)
    else:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["quantile", "treated", "control"])
        for pr in QUANTILE_PROBS:
            wr.writerow([_g(pr), _g(q["treated"][pr]), _g(q["control"][pr])])
        _write(buf.getvalue(), None)
    return 0


TABLE_FIELDS = ("spec", "tau_wdim", "neyman_se", "tau_wdim_res", "res_sep_se", "superpop_se",
                "pct_improvement", "r2_y", "r2_z")


def cmd_estimate(args) -> int:
    d = load_dataset(args.data, args.outcome, args.treatment)
    spec = _spec(args)
    ws, _ = _weights(args, d, spec)
    fmap = FeatureMap(args.transform)
    chosen = estimate(d, ws, args.spec, spec, fmap=fmap, hc1=args.hc1,
                      att_divisor=args.att_divisor)
    row = effect_summary(d, ws, spec, fmap)
    # residualized columns follow the requested spec
    row["tau_wdim_res"] = chosen.tau_hat
    row["res_sep_se"] = chosen.se
    row["superpop_se"] = float(np.sqrt(chosen.var_hc0 + chosen.var_superpop_addend))
    row["pct_improvement"] = 100.0 * (1.0 - chosen.se / row["neyman_se"])
    row["spec"] = args.spec
    if args.format == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TABLE_FIELDS)
        wr.writerow([row[k] if isinstance(row[k], str) else _g(row[k]) for k in TABLE_FIELDS])
        text = buf.getvalue()
    else:
        text = _dumps({"table": {k: row[k] for k in TABLE_FIELDS}, "estimate": chosen.to_dict(),
                       "weights": {"provenance": ws.provenance.value, "meta": ws.meta}}) + "\n"
    _write(text, args.output)
    return 0


def cmd_diagnose(args) -> int:
    d = load_dataset(args.data, args.outcome, args.treatment)
    spec = _spec(args)
    ws, _ = _weights(args, d, spec)
    rep = diagnose(d, ws, FeatureMap(args.transform))
    if args.output:
        rep.to_csv(args.output)
    else:
        buf = io.StringIO()
        rows = rep.rows()
        wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: v if isinstance(v, str) else _g(v) for k, v in r.items()})
        sys.stdout.write(buf.getvalue())
    log.info(json.dumps({"event": "global_r2", "r2_y": rep.r2_y, "r2_z": rep.r2_z}))
    return 0


def cmd_simulate(args) -> int:
    raw = load_config(args.config)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    configs = expand_grid(raw, seed=seed, replications=args.replications)
    reports = [run_study(cfg, workers=args.workers) for cfg in configs]
    _write(report_csv(reports), args.output)
    if args.dump:
        Path(args.dump).write_text(records_csv(reports), encoding="utf-8")
    return 0


COMMANDS = {"weights": cmd_weights, "estimate": cmd_estimate, "diagnose": cmd_diagnose,
            "simulate": cmd_simulate}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    _log_config(args)
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        _emit_error(exc.to_dict())
        return EXIT_DATA
    except ResweightError as exc:
        _emit_error(exc.to_dict())
        return EXIT_SOLVER
    except (OSError, json.JSONDecodeError) as exc:
        _emit_error({"error": "io", "message": str(exc)})
        return EXIT_DATA
    except ValueError as exc:
        _emit_error({"error": "invalid_value", "message": str(exc)})
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
