"""Monte Carlo consistency experiments over (loss, error law, design, n).

Every replication draws its errors from ``SeedSequence([seed, n, rep])``, so
a record depends only on the configuration and its ``(n, rep)`` key, never
on the order in which worker threads finish. Designs use the disjoint key
``[seed, n, rep, 1]`` (``rep = 0`` for a design fixed across replications).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .design import DesignGenSpec, SingularGram, generate_design, leverage_decay_fit, leverages
from .losses import ConvexLoss
from .probability import ErrorDistribution, NonIntegrable, check_identification, moment_audit
from .solver import NotConverged, SolverOpts, fit

log = logging.getLogger(__name__)

DEFAULT_BETA0 = (1.0, -2.0, 0.5, 3.0, -1.5, 0.25, 2.0, -0.75)
RECORD_FIELDS = ("n", "rep", "error_norm", "d_n", "converged", "wall_ms")
MAX_NONCONVERGED = 0.02


def default_beta0(p: int) -> tuple:
    if p > len(DEFAULT_BETA0):
        raise ValueError(f"no default beta0 for p={p}; give beta0 explicitly")
    return DEFAULT_BETA0[:p]


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment.

    ``record_timing`` is off by default: wall-clock times are the only
    nondeterministic output, and ``wall_ms`` is written as 0 without them.
    """

    loss: ConvexLoss
    dist: ErrorDistribution
    design: DesignGenSpec
    n_grid: tuple
    reps: int = 100
    seed: int = 0
    beta0: tuple | None = None
    label: str = ""
    delta: float = 0.5
    iid_design: bool = False
    record_timing: bool = False
    solver: SolverOpts = field(default_factory=SolverOpts)

    def __post_init__(self):
        ns = tuple(int(n) for n in self.n_grid)
        if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError(f"n_grid must be nonempty and strictly increasing, got {ns}")
        if ns[0] < self.design.p:
            raise ValueError("every n must be at least p")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        beta0 = default_beta0(self.design.p) if self.beta0 is None else tuple(float(b) for b in self.beta0)
        if len(beta0) != self.design.p or not all(np.isfinite(beta0)):
            raise ValueError(f"beta0 must be {self.design.p} finite numbers")
        object.__setattr__(self, "n_grid", ns)
        object.__setattr__(self, "beta0", beta0)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"loss", "dist", "design", "n_grid", "reps", "seed", "beta0", "label", "delta",
                 "iid_design", "record_timing", "solver"}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        for key in ("loss", "dist", "design", "n_grid"):
            if key not in d:
                raise ValueError(f"config is missing {key!r}")
        kw = {k: v for k, v in d.items() if k not in ("loss", "dist", "design", "solver")}
        return cls(
            loss=ConvexLoss.from_spec(d["loss"]),
            dist=ErrorDistribution.from_spec(d["dist"]),
            design=DesignGenSpec.from_spec(d["design"]),
            solver=SolverOpts.from_spec(d.get("solver")),
            **kw,
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_spec(),
            "dist": self.dist.to_spec(),
            "design": self.design.to_spec(),
            "n_grid": list(self.n_grid),
            "reps": self.reps,
            "seed": self.seed,
            "beta0": list(self.beta0),
            "label": self.label,
            "delta": self.delta,
            "iid_design": self.iid_design,
            "record_timing": self.record_timing,
            "solver": asdict(self.solver),
        }

    def replace(self, **kw) -> "ExperimentConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return ExperimentConfig(**d)


@dataclass(frozen=True)
class ConvergenceRecord:
    n: int
    rep: int
    error_norm: float
    d_n: float
    converged: bool
    wall_ms: float

    def row(self) -> list:
        return [self.n, self.rep, repr(float(self.error_norm)), repr(float(self.d_n)),
                int(self.converged), f"{self.wall_ms:.3f}"]


def design_seed(seed: int, n: int, rep: int = 0) -> np.random.SeedSequence:
    """Design stream for ``(seed, n, rep)``, disjoint from every error stream.

    SeedSequence ignores trailing zeros, so the tag must be the last word.
    """
    return np.random.SeedSequence([seed, n, rep, 1])


def _design_for(config: ExperimentConfig, n: int, rep: int) -> np.ndarray:
    return generate_design(config.design, n, design_seed(config.seed, n, rep if config.iid_design else 0))


def _one(config: ExperimentConfig, n: int, rep: int, X: np.ndarray | None) -> ConvergenceRecord:
    t0 = time.perf_counter()
    try:
        if X is None:
            X = _design_for(config, n, rep)
        beta0 = np.asarray(config.beta0)
        e = config.dist.sample(n, np.random.SeedSequence([config.seed, n, rep]))
        y = X @ beta0 + e
        d_n = float(np.max(leverages(X)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConverged)
            res = fit(X, y, config.loss, config.solver)
        err, ok = float(np.linalg.norm(res.beta_hat - beta0)), res.converged
    except (SingularGram, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("n=%d rep=%d failed: %s", n, rep, exc)
        err, d_n, ok = np.nan, np.nan, False
    wall = (time.perf_counter() - t0) * 1e3 if config.record_timing else 0.0
    return ConvergenceRecord(n, rep, err, d_n, ok, wall)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MEST_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> list[ConvergenceRecord]:
    """Fit every (n, rep) cell and return records sorted by (n, rep)."""
    threads = default_threads() if threads is None else max(1, int(threads))
    designs = {} if config.iid_design else {n: _design_for(config, n, 0) for n in config.n_grid}
    tasks = [(n, r) for n in config.n_grid for r in range(config.reps)]
    if threads == 1:
        out = [_one(config, n, r, designs.get(n)) for n, r in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda t: _one(config, t[0], t[1], designs.get(t[0])), tasks))
    return sorted(out, key=lambda rec: (rec.n, rec.rep))


# -- summaries -----------------------------------------------------------------

@dataclass
class SummaryTable:
    ns: list
    median: list
    upper_quartile: list
    maximum: list
    converged_rate: list
    count: list
    slope: float
    nonconverged_rate: float
    medians_decreasing: bool
    extra: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.ns, self.median, self.upper_quartile, self.maximum, self.converged_rate, self.count))

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not np.isfinite(v) else v

        d = {
            "ns": self.ns,
            "median": [clean(v) for v in self.median],
            "upper_quartile": [clean(v) for v in self.upper_quartile],
            "max": [clean(v) for v in self.maximum],
            "converged_rate": self.converged_rate,
            "count": self.count,
            "slope": clean(self.slope),
            "nonconverged_rate": self.nonconverged_rate,
            "medians_decreasing": self.medians_decreasing,
        }
        d.update(self.extra)
        return d

    def format(self) -> str:
        lines = [f"{'n':>8} {'median':>12} {'q75':>12} {'max':>12} {'conv':>6}"]
        for n, med, q3, mx, cr, _ in self.rows():
            lines.append(f"{n:>8d} {med:>12.5g} {q3:>12.5g} {mx:>12.5g} {cr:>6.1%}")
        lines.append(f"log-log slope of median error: {self.slope:.4g}")
        return "\n".join(lines)


def summarize_experiment(records) -> SummaryTable:
    """Per-n median, upper quartile and max of the error norm.

    The slope is the least-squares slope of log median error against log n;
    it is NaN when fewer than two sizes have a positive median.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to summarize")
    ns = sorted({r.n for r in records})
    med, q3, mx, conv, cnt = [], [], [], [], []
    for n in ns:
        errs = np.array([r.error_norm for r in records if r.n == n], dtype=float)
        ok = [r.converged for r in records if r.n == n]
        finite = errs[np.isfinite(errs)]
        med.append(float(np.median(finite)) if finite.size else np.nan)
        q3.append(float(np.quantile(finite, 0.75)) if finite.size else np.nan)
        mx.append(float(np.max(finite)) if finite.size else np.nan)
        conv.append(float(np.mean(ok)))
        cnt.append(len(ok))
    m = np.array(med)
    good = np.isfinite(m) & (m > 0)
    slope = float(np.polyfit(np.log(np.array(ns)[good]), np.log(m[good]), 1)[0]) if good.sum() >= 2 else np.nan
    nonconv = float(np.mean([not r.converged for r in records]))
    decreasing = bool(len(m) >= 2 and np.all(np.isfinite(m)) and np.all(np.diff(m) < 0))
    return SummaryTable(ns, med, q3, mx, conv, cnt, slope, nonconv, decreasing)


def hypothesis_check(config: ExperimentConfig) -> dict:
    """Identification condition and leverage-decay verdict for a configuration."""
    out = {}
    try:
        rep = check_identification(config.dist, config.loss, config.delta)
        out["conditions"] = rep.to_dict()
        out["conditions_passed"] = rep.passed
    except NonIntegrable as exc:
        out["conditions"] = {"error": str(exc)}
        out["conditions_passed"] = False
    n_max = config.n_grid[-1]
    n_min = max(4 * config.design.p, n_max // 16)
    sizes = sorted({int(v) for v in np.geomspace(n_min, n_max, 5)})
    if len(sizes) >= 4:
        dec = leverage_decay_fit([generate_design(config.design, n, design_seed(config.seed, n))
                                  for n in sizes])
        out["leverage_decay"] = dec.to_dict()
        out["hypothesis_violated"] = dec.verdict != "theorem1" or not out["conditions_passed"]
    else:
        out["hypothesis_violated"] = not out["conditions_passed"]
    return out


def experiment_summary(config: ExperimentConfig, records) -> SummaryTable:
    table = summarize_experiment(records)
    table.extra.update(hypothesis_check(config))
    table.extra["label"] = config.label
    table.extra["config"] = config.to_dict()
    table.extra["rejected"] = table.nonconverged_rate >= MAX_NONCONVERGED
    return table


# -- regime contrast -----------------------------------------------------------

CONTRAST_DELTAS = (1.0, 0.75, 0.5)
CONTRAST_ORDERS = (1.2,)


@dataclass
class ContrastReport:
    summaries: dict
    moment_audit: dict
    verdicts: dict
    records: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
            "moment_audit": self.moment_audit,
            "verdicts": self.verdicts,
        }


def regime_contrast(base: ExperimentConfig, threads: int | None = None) -> ContrastReport:
    """Run ``base`` under decay(delta) designs and an adversarial-leverage design.

    The moment audit classifies E|psi(e)|^(1/delta) for each delta and
    E|psi(e)|^q for q in CONTRAST_ORDERS as finite or infinite.
    """
    p = base.design.p
    designs = {f"decay_{d:g}": DesignGenSpec("decay", p, d) for d in CONTRAST_DELTAS}
    designs["adversarial_leverage"] = DesignGenSpec("adversarial_leverage", p)
    summaries, verdicts, records = {}, {}, {}
    for name, spec in designs.items():
        cfg = base.replace(design=spec, label=f"{base.label}:{name}" if base.label else name)
        records[name] = run_experiment(cfg, threads)
        table = experiment_summary(cfg, records[name])
        summaries[name] = table
        verdicts[name] = table.extra.get("leverage_decay", {}).get("verdict", "undetermined")
    orders = sorted({1.0 / d for d in CONTRAST_DELTAS} | set(CONTRAST_ORDERS))
    audit = {f"{r:g}": finite for r, finite in moment_audit(base.dist, base.loss, orders).items()}
    return ContrastReport(summaries, audit, verdicts, records)


# -- output --------------------------------------------------------------------

def _atomic_write(path, text: str) -> None:
    """Write via a sibling ``.tmp`` file so a partial file is never left at ``path``."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()


def write_records_csv(records, path) -> None:
    _atomic_write(path, records_csv(records))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def to_json(obj) -> str:
    """Stable JSON text; non-finite floats become null."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    _atomic_write(path, to_json(obj))
