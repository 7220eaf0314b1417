"""Acceptance criteria, each at its stated tolerance and runtime limit.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the session (see conftest.py).
"""
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from conftest import LOSS_KINDS, oracle_fit, random_instance, random_loss
from mest.design import (
    DesignGenSpec,
    eigen_growth_check,
    generate_design,
    normalize,
    summarize,
    trace_inequality_holds,
)
from mest.harness import ExperimentConfig, run_experiment, summarize_experiment
from mest.losses import ConvexLoss
from mest.probability import (
    BoundedVarSpec,
    ErrorDistribution,
    WeightSpec,
    check_identification,
    verify_bennett,
    verify_weighted_slln,
)
from mest.solver import NotConverged, fit, verify_dn_lower_bound

RESULTS = []

GAUSS = ErrorDistribution("gaussian")
HUBER_C1 = 2 * stats.norm.cdf(1.345) - 1  # G'(0) = P(|e| < c)
C3_DELTA = 0.25


def record(label: str, ok: bool, detail: str, elapsed: float, limit: float) -> bool:
    ok = bool(ok) and elapsed < limit
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail} ({elapsed:.1f}s of {limit:g}s)"
    RESULTS.append(line)
    print(line)
    return ok


def test_c1_normalized_design_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        p = int(rng.integers(1, 6))
        n = int(rng.integers(p + 1, 501))
        X = rng.standard_normal((n, p)) * rng.uniform(0.2, 5.0, p) + rng.uniform(-2, 2, p)
        s = summarize(X)
        err = normalize(X, s).identity_errors()
        worst = max(worst, err["gram"], err["trace"], abs(err["max_row_sq"] - s.leverage))
    ok = record("1 normalized-design identities", worst <= 1e-10, f"100 designs, worst error {worst:.2e} <= 1e-10",
                time.perf_counter() - t0, 10)
    assert ok


def test_c2_solver_oracle_equivalence():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for kind in LOSS_KINDS:
        rng = np.random.default_rng({"huber": 201, "power": 202, "quantile": 203}[kind])
        for _ in range(50):
            X, y = random_instance(rng, n_max=50, p_max=3)
            loss = random_loss(kind, rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotConverged)
                res = fit(X, y, loss)
            ref = oracle_fit(X, y, loss)
            worst = max(worst, abs(res.objective - ref.objective) / (1 + abs(ref.objective)))
            count += 1
    ok = record("2 solver-oracle equivalence", worst <= 1e-6,
                f"{count} instances, worst relative gap {worst:.2e} <= 1e-6", time.perf_counter() - t0, 120)
    assert ok


def test_c3_identification_checker():
    t0 = time.perf_counter()
    huber = check_identification(GAUSS, ConvexLoss.huber(1.345), C3_DELTA)
    ls = check_identification(GAUSS, ConvexLoss.power(2.0), C3_DELTA)
    rel = abs(huber.c1 - HUBER_C1) / HUBER_C1
    good = rel <= 0.02 and abs(ls.c1 - 2.0) <= 1e-6 and huber.passed and ls.passed
    ok = record("3 identification checker", good,
                f"Huber c1={huber.c1:.5f} vs {HUBER_C1:.5f} ({rel:.2%} <= 2%), q=2 c1={ls.c1:.9f} vs 2",
                time.perf_counter() - t0, 5)
    assert ok


def test_c4_bennett_domination():
    t0 = time.perf_counter()
    specs = {"Rademacher": BoundedVarSpec("rademacher"), "Huber score": BoundedVarSpec("score", ConvexLoss.huber(1.0), GAUSS)}
    parts, good = [], True
    for i, (name, spec) in enumerate(specs.items()):
        sd = np.sqrt(spec.variance())
        for n in (100, 400):
            grid = [k * sd * np.sqrt(n) for k in (0.5, 1.0, 2.0, 3.0, 4.0)]
            rep = verify_bennett(spec, n, grid, 10**5, seed=400 + 10 * i + n)
            slack = max(e - b - 3 * s for e, b, s in zip(rep.empirical, rep.bound, rep.stderr))
            good &= rep.passed
            parts.append(f"{name} n={n} max excess {slack:+.3f}")
    ok = record("4 Bennett domination", good, "; ".join(parts), time.perf_counter() - t0, 60)
    assert ok


def test_c5_weighted_slln():
    t0 = time.perf_counter()
    w = WeightSpec("design_column", DesignGenSpec("orthogonal_blocks", 2), 0)
    rep = verify_weighted_slln(ErrorDistribution("logpareto"), ConvexLoss.power(2.0), w, [10**3, 10**4, 10**5], 50,
                               seed=500)
    meds = ", ".join(f"{m:.4f}" for m in rep.medians)
    ok = record("5 weighted SLLN", rep.passed, f"medians [{meds}] need nonincreasing and last < 0.02",
                time.perf_counter() - t0, 120)
    assert ok


C6_CONFIGS = {
    "a": ({"kind": "huber", "c": 1.345}, {"kind": "cauchy"}, 0.05),
    "b": ({"kind": "quantile", "alpha": 0.5}, {"kind": "cauchy"}, 0.05),
    "c": ({"kind": "power", "q": 2}, {"kind": "logpareto"}, 0.1),
}
C6_LIMIT = 15 * 60  # shared by the three configurations


@pytest.mark.parametrize("tag", sorted(C6_CONFIGS))
def test_c6_consistency(tag):
    loss, dist, bound = C6_CONFIGS[tag]
    t0 = time.perf_counter()
    cfg = ExperimentConfig.from_dict({
        "loss": loss, "dist": dist, "design": {"kind": "orthogonal_blocks", "p": 2}, "beta0": [1, -2],
        "n_grid": [200, 2000, 20000], "reps": 100, "seed": 600, "label": f"c6{tag}", "record_timing": False,
    })
    table = summarize_experiment(run_experiment(cfg))
    good = table.medians_decreasing and table.median[-1] < bound and table.nonconverged_rate < 0.02
    meds = ", ".join(f"{m:.4f}" for m in table.median)
    name = f"{loss['kind']}/{dist['kind']}"
    ok = record(f"6{tag} consistency {name}", good,
                f"medians [{meds}] need strictly decreasing and last < {bound}; nonconverged {table.nonconverged_rate:.1%}",
                time.perf_counter() - t0, C6_LIMIT)
    assert ok


def test_c7_dn_lower_bound():
    t0 = time.perf_counter()
    n, eps = 10**4, 0.5
    c1 = check_identification(GAUSS, ConvexLoss.power(2.0), C3_DELTA).c1
    Z = normalize(generate_design(DesignGenSpec("gaussian_iid", 3), n, 700))
    positive, i1_all, worst_identity = 0, True, 0.0
    for s in range(50):
        e = GAUSS.sample(n, np.random.SeedSequence([700, s]))
        rep = verify_dn_lower_bound(Z, e, ConvexLoss.power(2.0), eps, 200, np.random.SeedSequence([701, s]), c1,
                                    quadrature_checks=200)
        positive += rep.total_positive
        i1_all &= rep.i1_ok
        worst_identity = max(worst_identity, rep.identity_error)
    good = i1_all and positive >= 49 and worst_identity <= 1e-8
    ok = record("7 D_n lower bound", good,
                f"min I1n >= C1 eps^2 n/8 in all runs: {i1_all}; D_n > 0 in {positive}/50 (need 49); "
                f"identity error {worst_identity:.1e} <= 1e-8", time.perf_counter() - t0, 180)
    assert ok


def test_c8_trace_inequality_and_eigen_growth():
    t0 = time.perf_counter()
    rng = np.random.default_rng(800)
    holds = 0
    for _ in range(100):
        p = int(rng.integers(1, 7))
        A = rng.standard_normal((p, p))
        B = rng.standard_normal((p, p))
        holds += trace_inequality_holds(A @ A.T + 1e-3 * np.eye(p), B @ B.T + 1e-3 * np.eye(p))
    c5 = []
    witnesses = True
    for n in (10, 100, 1000, 10**4, 10**5):
        ratio, ok_w = eigen_growth_check(summarize(generate_design(DesignGenSpec("orthogonal_blocks", 2), n)))
        c5.append(ratio)
        witnesses &= ok_w
    bounded = max(c5) / min(c5) < 1 + 1e-9
    good = holds == 100 and bounded and witnesses
    ok = record("8 trace inequality and C5", good,
                f"trace inequality on {holds}/100 SPD pairs; C5 over n=10..1e5 in [{min(c5):.6f}, {max(c5):.6f}]",
                time.perf_counter() - t0, 5)
    assert ok
