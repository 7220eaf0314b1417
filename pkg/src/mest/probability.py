"""Error laws, the expected-score function G and the concentration checks.

All error distributions here are symmetric about zero, which lets every
expectation be folded onto the half line:

    E h(e) = int_0^inf {h(x) + h(-x)} f(x) dx.

Folding cancels the odd part of ``h`` before integration, which matters for
laws with only a first moment.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats
from scipy.interpolate import PchipInterpolator

from .design import DesignGenSpec, generate_design, normalize
from .losses import ConditionReport, ConvexLoss, increment_bound

DISTRIBUTIONS = ("gaussian", "laplace", "cauchy", "student_t", "logpareto")
_PARAM_KEYS = {
    "gaussian": ("sigma", 1.0),
    "laplace": ("b", 1.0),
    "cauchy": ("scale", 1.0),
    "student_t": ("nu", 3.0),
    "logpareto": ("x0", float(np.e)),
}
QUAD_EPSABS = 1e-10
LOGPARETO_KNOTS = 10_000
LOGPARETO_XMAX = 1e20
_LOG_XMAX = float(np.log(1e300))


class NonIntegrable(ValueError):
    """E|psi(e + t)| is infinite for this (distribution, loss) pair."""


class UnboundedSpec(ValueError):
    pass


class WeightTooLarge(ValueError):
    pass


# -- log-Pareto law -----------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _logpareto_table(x0: float):
    """Normalizing constant and inverse-survival interpolant for |e|.

    The density is K / (x^2 log^2 x) on |x| > x0; in u = log x the
    half-line mass element is K e^{-u} / u^2 du.
    """
    kern = lambda u: np.exp(-u) / (u * u)
    u0 = np.log(x0)
    half_mass = integrate.quad(kern, u0, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
    K = 0.5 / half_mass
    u = np.log(np.geomspace(x0, LOGPARETO_XMAX, LOGPARETO_KNOTS))
    seg = np.array([integrate.quad(kern, u[i], u[i + 1], epsabs=0, epsrel=1e-12)[0] for i in range(len(u) - 1)])
    tail = integrate.quad(kern, u[-1], np.inf, epsabs=0, epsrel=1e-10)[0]
    above = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]]) + tail
    surv = np.clip(2.0 * K * above, 0.0, 1.0)  # P(|e| > x_k)
    surv[0] = 1.0
    inv = PchipInterpolator(np.log(surv[::-1]), u[::-1])
    return K, inv, float(np.log(surv[-1]))


@dataclass(frozen=True)
class ErrorDistribution:
    """Symmetric error law; ``param`` is sigma, b, scale, nu or x0 by ``kind``.

    ``param`` defaults to 1 for the scale families, nu=3 and x0=e.
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.kind!r}; expected one of {DISTRIBUTIONS}")
        p = float(_PARAM_KEYS[self.kind][1] if self.param is None else self.param)
        if not (np.isfinite(p) and p > 0):
            raise ValueError("distribution parameter must be positive and finite")
        if self.kind == "logpareto" and p < np.e:
            raise ValueError("logpareto needs x0 >= e")
        object.__setattr__(self, "param", p)

    @classmethod
    def from_spec(cls, spec: dict) -> "ErrorDistribution":
        try:
            kind = spec["kind"].lower()
            key, default = _PARAM_KEYS[kind]
        except (KeyError, AttributeError, TypeError):
            raise ValueError(f"malformed distribution spec: {spec!r}") from None
        return cls(kind, spec.get(key, default))

    def to_spec(self) -> dict:
        return {"kind": self.kind, _PARAM_KEYS[self.kind][0]: self.param}

    @property
    def _frozen(self):
        k, a = self.kind, self.param
        if k == "gaussian":
            return stats.norm(scale=a)
        if k == "laplace":
            return stats.laplace(scale=a)
        if k == "cauchy":
            return stats.cauchy(scale=a)
        if k == "student_t":
            return stats.t(df=a)
        return None

    @property
    def support_start(self) -> float:
        """Lower end of the support of |e|."""
        return self.param if self.kind == "logpareto" else 0.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        k, a = self.kind, self.param
        if k == "gaussian":
            return -0.5 * (x / a) ** 2 - np.log(a * np.sqrt(2.0 * np.pi))
        if k == "laplace":
            return -np.abs(x) / a - np.log(2.0 * a)
        if k == "cauchy":
            return -np.log(np.pi * a) - np.log1p((x / a) ** 2)
        if k == "student_t":
            c = special.gammaln(0.5 * (a + 1)) - special.gammaln(0.5 * a) - 0.5 * np.log(a * np.pi)
            return c - 0.5 * (a + 1) * np.log1p(x * x / a)
        K, _, _ = _logpareto_table(self.param)
        ax = np.abs(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(K) - 2.0 * np.log(ax) - 2.0 * np.log(np.log(ax))
        return np.where(ax > self.param, out, -np.inf)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def tail_prob(self, T: float) -> float:
        """P(|e| > T) by quadrature of the density."""
        T = max(float(T), self.support_start)
        if self.kind != "logpareto":
            return float(2.0 * self._frozen.sf(T))
        K, _, _ = _logpareto_table(self.param)
        return float(2.0 * K * integrate.quad(lambda u: np.exp(-u) / u**2, np.log(T), np.inf, epsabs=0, epsrel=1e-12)[0])

    def sample(self, n: int, seed=None) -> np.ndarray:
        """Draw ``n`` errors; deterministic in ``(self, n, seed)``.

        ``seed`` may be an int, a SeedSequence or a Generator.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        k, a = self.kind, self.param
        if k == "gaussian":
            return a * rng.standard_normal(n)
        if k == "laplace":
            return rng.laplace(scale=a, size=n)
        if k == "cauchy":
            return a * rng.standard_cauchy(n)
        if k == "student_t":
            return rng.standard_t(a, size=n)
        _, inv, log_smin = _logpareto_table(a)
        u = rng.random(n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        logu = np.log(np.maximum(u, np.exp(log_smin)))
        return sign * np.exp(inv(logu))


# -- expectations ---------------------------------------------------------------

def expect(dist: ErrorDistribution, h, breakpoints=(), epsabs: float = QUAD_EPSABS) -> float:
    """E h(e) by adaptive quadrature on the folded half line.

    Finite pieces are split at ``breakpoints`` (points where ``h`` is not
    smooth, as seen from the folded variable x = |e|); the tail beyond them
    is integrated in log scale.
    """
    fold = lambda x: (h(x) + h(-x)) * np.exp(dist.logpdf(x))
    lo = dist.support_start
    pts = sorted({float(b) for b in breakpoints if b > lo})
    top = max([1.0, 2.0 * lo] + [2.0 * b for b in pts])
    edges = [lo] + [b for b in pts if b < top] + [top]
    total = 0.0
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        for a, b in zip(edges[:-1], edges[1:]):
            if b > a:
                total += integrate.quad(fold, a, b, epsabs=epsabs, epsrel=1e-12, limit=200)[0]

        def tail(v):
            x = np.exp(v)
            w = np.exp(dist.logpdf(x) + v)
            return 0.0 if w == 0.0 else (h(x) + h(-x)) * w

        # the folded integrand is bounded in the tail for every supported
        # (loss, law) pair, so stopping at 1e300 drops at most P(|e| > 1e300)
        v = np.log(top)
        for v_next in (v + 5.0, v + 25.0, _LOG_XMAX):
            if v_next > v:
                total += integrate.quad(tail, v, v_next, epsabs=epsabs, epsrel=1e-12, limit=200)[0]
                v = v_next
    return float(total)


def truncated_abs_moment(dist: ErrorDistribution, r: float, M: float) -> float:
    """E[|e|^r 1{|e| <= M}], integrated in log scale."""
    lo = dist.support_start
    total = 0.0
    if lo < 1.0:
        f = lambda x: 2.0 * x**r * np.exp(dist.logpdf(x))
        total += integrate.quad(f, lo, min(1.0, M), epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    start = max(lo, 1.0)
    if M > start:
        g = lambda v: 2.0 * np.exp(r * v + v + dist.logpdf(np.exp(v)))
        with np.errstate(over="ignore", under="ignore"):
            total += integrate.quad(g, np.log(start), np.log(M), epsabs=1e-14, epsrel=1e-12, limit=1000)[0]
    return float(total)


@functools.lru_cache(maxsize=256)
def abs_moment_finite(dist: ErrorDistribution, r: float) -> bool:
    """Numerically classify E|e|^r < inf by truncated-moment growth.

    Compares the moment truncated at 1e50 and at 1e100: a convergent
    integral has essentially stopped moving by then, a divergent one has at
    least doubled (logarithmic divergence) or exploded.
    """
    if r <= 0:
        return True
    a = truncated_abs_moment(dist, r, 1e50)
    b = truncated_abs_moment(dist, r, 1e100)
    return bool(np.isfinite(b) and b <= 1.05 * a)


def score_moment_finite(dist: ErrorDistribution, loss: ConvexLoss, r: float = 1.0) -> bool:
    """Whether E|psi(e)|^r is finite."""
    if np.isfinite(loss.psi_bound):
        return True
    return abs_moment_finite(dist, r * (loss.param - 1.0))


def _psi_breaks(loss: ConvexLoss, t: float):
    out = []
    for k in loss.kinks():
        out += [abs(k - t), abs(t - k)]
    return out


def g_function(dist: ErrorDistribution, loss: ConvexLoss, t: float) -> float:
    """G(t) = E psi(e + t)."""
    if not score_moment_finite(dist, loss, 1.0):
        raise NonIntegrable(f"E|psi(e)| is infinite for {loss.to_spec()} under {dist.to_spec()}")
    return expect(dist, lambda x: loss.psi(x + t), _psi_breaks(loss, t))


def check_identification(dist: ErrorDistribution, loss: ConvexLoss, delta: float, points: int = 50) -> ConditionReport:
    """Evaluate G on u = +-delta k / points and estimate the identification slope c1."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    report = increment_bound(loss, delta)
    g0 = g_function(dist, loss, 0.0)
    ks = np.arange(1, points + 1)
    us = np.concatenate([-delta * ks[::-1] / points, delta * ks / points])
    gs = np.array([g_function(dist, loss, float(u)) for u in us])
    c1 = float(np.min(np.abs(gs) / np.abs(us)))
    report.c1 = c1
    report.mean_psi = g0
    report.evidence_grid = [(0.0, g0)] + list(zip(us.tolist(), gs.tolist()))
    report.passed = bool(c1 > 0 and abs(g0) <= 1e-6)
    if abs(g0) > 1e-6:
        report.notes.append("E psi(e) is not zero: the loss does not target the centre of this law")
    return report


# -- Bennett's inequality -------------------------------------------------------

def bennett_bound(eps: float, b: float, bsq: float) -> float:
    """min(1, 2 exp(-eps^2 / (2 b eps + 2 bsq)))."""
    den = 2.0 * b * eps + 2.0 * bsq
    if eps <= 0 or den <= 0:
        # den underflows only for tiny eps, where the exponent tends to 0
        return 1.0
    return float(min(1.0, 2.0 * np.exp(-(eps * eps) / den)))


@dataclass(frozen=True)
class BoundedVarSpec:
    """Centred bounded summands: Rademacher signs or a centred score psi(e)."""

    kind: str  # "rademacher" | "score"
    loss: ConvexLoss | None = None
    dist: ErrorDistribution | None = None

    def __post_init__(self):
        if self.kind not in ("rademacher", "score"):
            raise ValueError(f"unknown bounded variable kind {self.kind!r}")
        if self.kind == "score" and (self.loss is None or self.dist is None):
            raise ValueError("score variables need a loss and a distribution")

    @functools.cached_property
    def mean(self) -> float:
        return 0.0 if self.kind == "rademacher" else g_function(self.dist, self.loss, 0.0)

    def bound(self) -> float:
        if self.kind == "rademacher":
            return 1.0
        b = self.loss.psi_bound
        if not np.isfinite(b):
            raise UnboundedSpec(f"psi of {self.loss.to_spec()} is unbounded")
        return b + abs(self.mean)

    def variance(self) -> float:
        if self.kind == "rademacher":
            return 1.0
        m = self.mean
        return expect(self.dist, lambda x: (self.loss.psi(x) - m) ** 2, _psi_breaks(self.loss, 0.0))

    def sample_sums(self, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
        """``reps`` independent draws of sum_{i<=n} X_i."""
        if self.kind == "rademacher":
            return 2.0 * rng.binomial(n, 0.5, size=reps) - n
        out = np.empty(reps)
        step = max(1, 4_000_000 // n)
        for i in range(0, reps, step):
            m = min(step, reps - i)
            e = self.dist.sample(n * m, rng).reshape(m, n)
            out[i : i + m] = np.sum(self.loss.psi(e) - self.mean, axis=1)
        return out


@dataclass
class TailReport:
    n: int
    reps: int
    b: float
    bsq: float
    eps: list
    empirical: list
    bound: list
    stderr: list
    dominated: list
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_bennett(spec: BoundedVarSpec, n: int, eps_grid, reps: int, seed=0) -> TailReport:
    """Compare empirical P(|sum X_i| > eps) with Bennett's bound.

    A grid point is dominated when the empirical frequency does not exceed
    the bound by more than three binomial standard errors.
    """
    b = spec.bound()
    bsq = n * spec.variance()
    sums = np.abs(spec.sample_sums(n, reps, np.random.default_rng(seed)))
    eps_grid = [float(e) for e in eps_grid]
    emp = [float(np.mean(sums > e)) for e in eps_grid]
    bnd = [bennett_bound(e, b, bsq) for e in eps_grid]
    se = [float(np.sqrt(p * (1 - p) / reps)) for p in emp]
    dom = [p <= q + 3 * s for p, q, s in zip(emp, bnd, se)]
    return TailReport(n, reps, b, bsq, eps_grid, emp, bnd, se, dom, all(dom))


# -- weighted strong law --------------------------------------------------------

@dataclass(frozen=True)
class WeightSpec:
    """Weight arrays a_n1..a_nn.

    ``mean``: 1/n.  ``design_column``: x_nik / sqrt(n) from the normalized
    rows of a generated design.  ``inverse_sqrt``: 1/sqrt(n), which is too
    large for the weighted strong law.
    """

    kind: str
    design: DesignGenSpec | None = None
    column: int = 0

    def weights(self, n: int) -> np.ndarray:
        if self.kind == "mean":
            return np.full(n, 1.0 / n)
        if self.kind == "inverse_sqrt":
            return np.full(n, 1.0 / np.sqrt(n))
        if self.kind == "design_column":
            Z = normalize(generate_design(self.design, n)).rows
            return Z[:, self.column] / np.sqrt(n)
        raise ValueError(f"unknown weight kind {self.kind!r}")


@dataclass
class SllnReport:
    ns: list
    medians: list
    scaled_max_weight: list
    threshold: float
    passed: bool
    paths: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "ns": list(self.ns),
            "medians": list(self.medians),
            "scaled_max_weight": list(self.scaled_max_weight),
            "threshold": self.threshold,
            "passed": self.passed,
        }


def verify_weighted_slln(
    dist: ErrorDistribution,
    loss: ConvexLoss,
    weight_spec: WeightSpec,
    n_grid,
    seeds: int,
    seed: int = 0,
    threshold: float = 0.02,
) -> SllnReport:
    """Track |sum_i a_ni (psi(e_i) - E psi)| along one error sequence per seed.

    Each seed draws a single sequence of length max(n_grid) and the sums use
    its prefixes.  Passes when the median over seeds at the largest n is
    below ``threshold`` and the medians do not increase over the last three
    sample sizes.
    """
    ns = sorted(int(n) for n in n_grid)
    weights = [weight_spec.weights(n) for n in ns]
    scaled = [float(n * np.max(np.abs(w))) for n, w in zip(ns, weights)]
    if len(ns) >= 2:
        slope = np.polyfit(np.log(ns), np.log(scaled), 1)[0]
        if slope > 0.05:
            raise WeightTooLarge(f"n * max|a_ni| grows like n^{slope:.2f}")
    if not score_moment_finite(dist, loss, 1.0):
        raise NonIntegrable(f"E|psi(e)| is infinite for {loss.to_spec()} under {dist.to_spec()}")
    mean = g_function(dist, loss, 0.0)
    paths = np.empty((seeds, len(ns)))
    for s in range(seeds):
        e = dist.sample(ns[-1], np.random.SeedSequence([seed, s]))
        x = loss.psi(e) - mean
        for j, (n, w) in enumerate(zip(ns, weights)):
            paths[s, j] = abs(float(w @ x[:n]))
    med = np.median(paths, axis=0)
    tail = med[-3:]
    passed = bool(med[-1] < threshold and np.all(np.diff(tail) <= 0))
    return SllnReport(ns, med.tolist(), scaled, threshold, passed, paths)


# -- moments of the score ---------------------------------------------------------

def moment_audit(dist: ErrorDistribution, loss: ConvexLoss, orders) -> dict:
    """Map each order r to whether E|psi(e)|^r is finite."""
    return {float(r): score_moment_finite(dist, loss, float(r)) for r in orders}
