"""Command-line entry point: ``mest <subcommand> [options]``.

Exit status: 0 ok, 1 input error, 2 solver did not converge, 3 a checked
condition failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import harness
from .harness import design_seed
from .design import (
    DesignGenSpec,
    SingularGram,
    eigen_growth_check,
    generate_design,
    leverage_decay_fit,
    normalize,
    summarize,
)
from .losses import ConvexLoss, increment_bound
from .probability import ErrorDistribution, NonIntegrable, check_identification
from .solver import NotConverged, SolverOpts, dn_trace, fit, random_directions, verify_dn_lower_bound

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_CONDITION = 0, 1, 2, 3

log = logging.getLogger("mest")


class InputError(Exception):
    """Bad file, config or argument; reported with exit status 1."""


# -- input ---------------------------------------------------------------------

def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def read_csv_matrix(path) -> np.ndarray:
    """Read a comma-separated numeric table.

    A single header row is skipped when any field of the first line is
    non-numeric.  Errors name the offending line.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    start = 1 if rows and not all(_is_number(t) for t in rows[0]) else 0
    data, width = [], None
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not t.strip() for t in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise InputError(f"{path}: line {lineno}: expected {width} fields, found {len(row)}")
        try:
            vals = [float(t) for t in row]
        except ValueError:
            bad = next(t for t in row if not _is_number(t))
            raise InputError(f"{path}: line {lineno}: not a number: {bad!r}") from None
        if not all(np.isfinite(vals)):
            raise InputError(f"{path}: line {lineno}: non-finite value")
        data.append(vals)
    if not data:
        raise InputError(f"{path}: no data rows")
    return np.array(data)


def load_json_arg(text: str | None, what: str):
    """Parse ``text`` as inline JSON, or as the path of a JSON file."""
    if text is None:
        return None
    src = text
    if not text.lstrip().startswith(("{", "[")):
        try:
            with open(text) as fh:
                src = fh.read()
        except OSError as exc:
            raise InputError(f"cannot read {what} {text!r}: {exc.strerror}") from None
    try:
        return json.loads(src)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed {what}: line {exc.lineno}: {exc.msg}") from None


def load_config(args) -> dict:
    cfg = load_json_arg(args.config, "config") or {}
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _pick(args, cfg: dict, key: str, default=None):
    """Command-line JSON option first, then the config entry, then ``default``."""
    val = load_json_arg(getattr(args, key, None), key)
    if val is None:
        val = cfg.get(key, default)
    if val is None:
        raise InputError(f"missing {key!r}: pass --{key} or set it in --config")
    return val


# -- output --------------------------------------------------------------------

def _table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    return buf.getvalue()


def emit(obj, args, rows: list[dict] | None = None) -> None:
    """Write ``obj`` as JSON, or ``rows`` (default: one row of ``obj``) as CSV."""
    if args.format == "csv":
        text = _table_csv(rows if rows is not None else [harness._jsonable(obj)])
    else:
        text = harness.to_json(obj)
    if args.out:
        harness._atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = load_config(args)
    if not args.data:
        raise InputError("fit needs --data")
    loss = ConvexLoss.from_spec(_pick(args, cfg, "loss"))
    M = read_csv_matrix(args.data)
    X, y = M[:, :-1], M[:, -1]
    if args.intercept:
        X = np.column_stack([np.ones(len(y)), X])
    if X.shape[1] == 0:
        raise InputError("data needs at least one design column (or --intercept)")
    summary = summarize(X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConverged)
        res = fit(X, y, loss, SolverOpts.from_spec(cfg.get("solver")))
    out = res.to_dict()
    out.update(d_n=summary.leverage, n0=summary.n0, n=summary.n, p=summary.p, loss=loss.to_spec())
    rows = [{"name": f"beta_{j}", "value": b} for j, b in enumerate(out["beta_hat"])]
    rows += [{"name": k, "value": out[k]} for k in ("objective", "d_n", "n0", "converged", "iterations")]
    emit(out, args, rows)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_check_design(args) -> int:
    cfg = load_config(args)
    if args.data:
        X = read_csv_matrix(args.data)
        if args.intercept:
            X = np.column_stack([np.ones(len(X)), X])
        s = summarize(X)
        ratio, witness = eigen_growth_check(s)
        out = s.to_dict()
        out.update(c5=ratio, trace_witness=witness, identity_errors=normalize(X, s).identity_errors())
        emit(out, args)
        return EXIT_OK if witness else EXIT_CONDITION
    spec = DesignGenSpec.from_spec(_pick(args, cfg, "design"))
    n_grid = cfg.get("n_grid") or ([int(v) for v in args.n_grid.split(",")] if args.n_grid else None)
    if not n_grid:
        n_grid = [100, 1000, 10000, 100000]
    seed = cfg.get("seed", 0)
    designs = [generate_design(spec, n, design_seed(seed, n)) for n in n_grid]
    rep = leverage_decay_fit(designs)
    c5 = [eigen_growth_check(summarize(X))[0] for X in designs]
    out = rep.to_dict()
    out.update(design=spec.to_spec(), c5=c5, passed=rep.verdict == "theorem1")
    rows = [{"n": n, "d_n": d, "c5": c} for n, d, c in zip(rep.ns, rep.leverages, c5)]
    emit(out, args, rows)
    return EXIT_OK if out["passed"] else EXIT_CONDITION


def cmd_check_conditions(args) -> int:
    cfg = load_config(args)
    loss = ConvexLoss.from_spec(_pick(args, cfg, "loss"))
    delta = float(args.delta if args.delta is not None else cfg.get("delta", 0.5))
    dist_spec = load_json_arg(args.dist, "dist") or cfg.get("dist")
    if dist_spec is None:
        rep = increment_bound(loss, delta)
        emit(rep.to_dict(), args)
        return EXIT_OK if rep.passed else EXIT_CONDITION
    dist = ErrorDistribution.from_spec(dist_spec)
    try:
        rep = check_identification(dist, loss, delta)
    except NonIntegrable as exc:
        out = {"passed": False, "error": f"NonIntegrable: {exc}", "loss": loss.to_spec(), "dist": dist.to_spec()}
        emit(out, args)
        return EXIT_CONDITION
    out = rep.to_dict()
    out.update(loss=loss.to_spec(), dist=dist.to_spec())
    rows = [{"u": u, "G": g} for u, g in out["evidence_grid"]] if args.format == "csv" else None
    emit(out, args, rows)
    return EXIT_OK if rep.passed else EXIT_CONDITION


def _bound_setup(args, cfg):
    loss = ConvexLoss.from_spec(_pick(args, cfg, "loss"))
    dist = ErrorDistribution.from_spec(_pick(args, cfg, "dist"))
    spec = DesignGenSpec.from_spec(_pick(args, cfg, "design", {"kind": "orthogonal_blocks", "p": 2}))
    n = int(cfg.get("n", 10_000))
    eps = float(cfg.get("eps", 0.5))
    seed = int(cfg.get("seed", 0))
    X = generate_design(spec, n, design_seed(seed, n))
    Z = normalize(X)
    e = dist.sample(n, np.random.SeedSequence([seed, n, 0]))
    return loss, dist, Z, e, eps, seed, cfg


def cmd_bound(args) -> int:
    cfg = load_config(args)
    loss, dist, Z, e, eps, seed, cfg = _bound_setup(args, cfg)
    delta = float(cfg.get("delta", 0.5))
    try:
        c1 = check_identification(dist, loss, delta).c1
    except NonIntegrable as exc:
        emit({"passed": False, "error": f"NonIntegrable: {exc}"}, args)
        return EXIT_CONDITION
    rep = verify_dn_lower_bound(Z, e, loss, eps, int(cfg.get("n_directions", 200)), seed, c1, delta=None)
    out = rep.to_dict()
    out["passed"] = rep.i1_ok and rep.total_positive
    emit(out, args)
    return EXIT_OK if out["passed"] else EXIT_CONDITION


def cmd_dn_trace(args) -> int:
    cfg = load_config(args)
    loss, _, Z, e, eps, seed, cfg = _bound_setup(args, cfg)
    if "gamma" in cfg:
        G = np.atleast_2d(np.asarray(cfg["gamma"], dtype=float))
    else:
        G = random_directions(Z.p, int(cfg.get("n_directions", 20)), seed)
    rows = []
    for j, g in enumerate(G):
        t = dn_trace(Z, e, loss, eps, g)
        rows.append({"index": j, "gamma": t.direction.tolist(), "total": t.total, "i1": t.i1, "i2": t.i2,
                     "i1_quadrature": t.i1_quadrature, "identity_error": t.identity_error})
    emit({"eps": eps, "n": Z.n, "traces": rows}, args, rows)
    return EXIT_OK


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = load_config(args)
    if not cfg:
        raise InputError("this subcommand needs --config")
    return harness.ExperimentConfig.from_dict(cfg)


def _out_dir(args) -> str | None:
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_simulate(args) -> int:
    config = _experiment_config(args)
    records = harness.run_experiment(config, args.threads)
    table = harness.experiment_summary(config, records)
    out = _out_dir(args)
    if out:
        harness.write_records_csv(records, os.path.join(out, "records.csv"))
        harness.write_json(table.to_dict(), os.path.join(out, "summary.json"))
    print(table.format())
    if table.extra.get("hypothesis_violated"):
        print("hypotheses violated for this configuration (no claim of inconsistency)")
    return EXIT_NOT_CONVERGED if table.extra["rejected"] else EXIT_OK


def cmd_contrast(args) -> int:
    config = _experiment_config(args)
    report = harness.regime_contrast(config, args.threads)
    out = _out_dir(args)
    if out:
        for name, recs in report.records.items():
            harness.write_records_csv(recs, os.path.join(out, f"records_{name}.csv"))
        harness.write_json(report.to_dict(), os.path.join(out, "summary.json"))
    for name, table in report.summaries.items():
        print(f"== {name} (leverage verdict: {report.verdicts[name]})")
        print(table.format())
    audit = ", ".join(f"r={r}: {'finite' if ok else 'infinite'}" for r, ok in report.moment_audit.items())
    print(f"moment audit E|psi(e)|^r: {audit}")
    rejected = any(t.extra["rejected"] for t in report.summaries.values())
    return EXIT_NOT_CONVERGED if rejected else EXIT_OK


COMMANDS = {
    "fit": (cmd_fit, "fit an M-estimate to a CSV whose last column is the response"),
    "check-design": (cmd_check_design, "leverage, n0 and decay diagnostics for a design"),
    "check-conditions": (cmd_check_conditions, "increment and identification conditions for a loss and law"),
    "bound": (cmd_bound, "sample directions and test the D_n lower bound"),
    "dn-trace": (cmd_dn_trace, "evaluate D_n = I_1n + I_2n along directions"),
    "simulate": (cmd_simulate, "run a consistency experiment from a JSON config"),
    "contrast": (cmd_contrast, "rerun a configuration across leverage-decay regimes"),
}


def _threads_default() -> int:
    return harness.default_threads()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or inline JSON")
    common.add_argument("--out", help="output file (output directory for simulate/contrast)")
    common.add_argument("--format", choices=("csv", "json"), default="json")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=_threads_default(), help="worker threads (env MEST_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("fit", "check-design"):
            p.add_argument("--data", help="CSV file")
            p.add_argument("--intercept", action="store_true", help="prepend a column of ones")
        if name in ("fit", "check-conditions", "bound", "dn-trace"):
            p.add_argument("--loss", help='loss spec, e.g. \'{"kind": "huber", "c": 1.345}\', or a path')
        if name in ("check-conditions", "bound", "dn-trace"):
            p.add_argument("--dist", help='error law spec, e.g. \'{"kind": "cauchy"}\', or a path')
        if name in ("check-design", "bound", "dn-trace"):
            p.add_argument("--design", help='design spec, e.g. \'{"kind": "orthogonal_blocks", "p": 2}\'')
        if name == "check-design":
            p.add_argument("--n-grid", help="comma-separated sample sizes")
        if name == "check-conditions":
            p.add_argument("--delta", type=float, help="neighbourhood half-width (default 0.5)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (InputError, SingularGram, NonIntegrable, ValueError, KeyError) as exc:
        print(f"mest {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
