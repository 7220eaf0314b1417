"""Design-matrix algebra: Gram matrix, inverse square root, leverage.

A design is an ``(n, p)`` float array whose rows are the design vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

EIG_FLOOR = 1e-12  # relative to the largest eigenvalue
THEOREM1_MIN_DELTA = 0.95
FAIL_MAX_DELTA = 0.05

GENERATORS = ("orthogonal_blocks", "gaussian_iid", "decay", "adversarial_leverage")


class SingularGram(ValueError):
    """The Gram matrix is not (numerically) positive definite."""


class InsufficientPoints(ValueError):
    pass


def as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"design must be a nonempty (n, p) array, got shape {X.shape}")
    if X.shape[0] < X.shape[1]:
        raise ValueError(f"need n >= p, got n={X.shape[0]}, p={X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("design has non-finite entries")
    return X


def _is_pd(eigvals: np.ndarray) -> bool:
    top = eigvals[-1]
    return bool(top > 0 and eigvals[0] > EIG_FLOOR * top)


def sym_eig(S: np.ndarray):
    """Eigendecomposition of a symmetric matrix, raising SingularGram below the floor."""
    S = 0.5 * (S + S.T)
    w, Q = linalg.eigh(S)
    if not _is_pd(w):
        raise SingularGram(
            f"Gram matrix is singular: smallest eigenvalue {w[0]:.3e}, largest {w[-1]:.3e}"
        )
    return w, Q


def inv_sqrtm(S: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    w, Q = sym_eig(S)
    return (Q / np.sqrt(w)) @ Q.T


def sqrtm_psd(S: np.ndarray) -> np.ndarray:
    w, Q = linalg.eigh(0.5 * (S + S.T))
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def find_n0(X: np.ndarray) -> int:
    """Smallest prefix length whose Gram matrix is positive definite.

    Positive definiteness of prefix Grams is monotone in the prefix length, so
    a bisection over ``p..n`` suffices.
    """
    n, p = X.shape

    def pd(k):
        return _is_pd(linalg.eigvalsh(X[:k].T @ X[:k]))

    if not pd(n):
        raise SingularGram("Gram matrix of the full design is singular")
    lo, hi = p, n
    if pd(lo):
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pd(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class DesignSummary:
    n: int
    p: int
    gram: np.ndarray
    gram_inv_sqrt: np.ndarray
    leverage: float
    n0: int
    gram_n0: np.ndarray
    min_eig_sqrt: float
    max_eig: float

    @property
    def leverage_constant(self) -> float:
        """n * d_n, the smallest C2 with d_n <= C2 / n at this n."""
        return self.n * self.leverage

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "leverage": self.leverage,
            "leverage_constant": self.leverage_constant,
            "n0": self.n0,
            "min_eig_sqrt": self.min_eig_sqrt,
            "max_eig": self.max_eig,
            "gram": self.gram.tolist(),
        }


def leverages(X: np.ndarray) -> np.ndarray:
    """Hat values x_i' S_n^{-1} x_i via a Cholesky solve."""
    X = as_design(X)
    try:
        cf = linalg.cho_factor(X.T @ X)
    except linalg.LinAlgError:
        raise SingularGram("Gram matrix is not positive definite") from None
    return np.einsum("ij,ji->i", X, linalg.cho_solve(cf, X.T))


def summarize(X) -> DesignSummary:
    """Gram matrix, its inverse square root, leverage d_n and n0."""
    X = as_design(X)
    n, p = X.shape
    S = X.T @ X
    w, Q = sym_eig(S)
    S_is = (Q / np.sqrt(w)) @ Q.T
    n0 = find_n0(X)
    return DesignSummary(
        n=n,
        p=p,
        gram=S,
        gram_inv_sqrt=S_is,
        leverage=float(np.max(leverages(X))),
        n0=n0,
        gram_n0=X[:n0].T @ X[:n0],
        min_eig_sqrt=float(np.sqrt(w[0])),
        max_eig=float(w[-1]),
    )


@dataclass(frozen=True)
class NormalizedDesign:
    """Rows x_ni = S_n^{-1/2} x_i."""

    rows: np.ndarray

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def identity_errors(self) -> dict:
        """Max-abs deviations of the three normalized-design identities.

        ``gram`` compares sum x_ni x_ni' with I_p, ``trace`` compares
        sum ||x_ni||^2 with p, ``leverage`` compares max ||x_ni||^2 with d_n
        computed from the raw design, when available.
        """
        Z = self.rows
        sq = np.einsum("ij,ij->i", Z, Z)
        return {
            "gram": float(np.max(np.abs(Z.T @ Z - np.eye(self.p)))),
            "trace": float(abs(sq.sum() - self.p)),
            "max_row_sq": float(sq.max()),
        }


def normalize(X, summary: DesignSummary | None = None) -> NormalizedDesign:
    X = as_design(X)
    if summary is None:
        summary = summarize(X)
    return NormalizedDesign(X @ summary.gram_inv_sqrt)


# -- leverage decay ---------------------------------------------------------

@dataclass(frozen=True)
class DecayReport:
    ns: tuple
    leverages: tuple
    delta_hat: float
    c2_hat: float
    verdict: str  # "theorem1" | "theoremA" | "fails"

    def to_dict(self) -> dict:
        return {
            "ns": list(self.ns),
            "leverages": list(self.leverages),
            "delta_hat": self.delta_hat,
            "c2_hat": self.c2_hat,
            "verdict": self.verdict,
        }


def classify_decay(delta_hat: float) -> str:
    if delta_hat >= THEOREM1_MIN_DELTA:
        return "theorem1"
    if delta_hat <= FAIL_MAX_DELTA:
        return "fails"
    return "theoremA"


def leverage_decay_fit(designs) -> DecayReport:
    """Fit d_n ~ C n^{-delta} over a sequence of designs of increasing size."""
    designs = [as_design(X) for X in designs]
    if len(designs) < 4:
        raise InsufficientPoints(f"need at least 4 sample sizes, got {len(designs)}")
    ns = np.array([X.shape[0] for X in designs], dtype=float)
    if np.any(np.diff(ns) <= 0):
        raise ValueError("designs must have strictly increasing n")
    d = np.array([np.max(leverages(X)) for X in designs])
    slope = np.polyfit(np.log(ns), np.log(d), 1)[0]
    delta_hat = float(-slope)
    return DecayReport(
        ns=tuple(int(v) for v in ns),
        leverages=tuple(float(v) for v in d),
        delta_hat=delta_hat,
        c2_hat=float(np.max(ns * d)),
        verdict=classify_decay(delta_hat),
    )


# -- eigenvalue growth ------------------------------------------------------

def trace_inequality_holds(A, B, rtol: float = 1e-12) -> bool:
    """Check tr(AB) >= mu(A) zeta(B) for symmetric positive definite A, B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    lhs = float(np.trace(A @ B))
    rhs = float(linalg.eigvalsh(A)[-1] * linalg.eigvalsh(B)[0])
    return lhs >= rhs - rtol * max(abs(lhs), abs(rhs), 1.0)


def eigen_growth_check(summary: DesignSummary, n: int | None = None) -> tuple[float, bool]:
    """Return ``(sqrt(n) / zeta(S_n^{1/2}), witness)``.

    The witness checks the chain bounding the smallest Gram eigenvalue from
    below: with A = S_n^{-1} and B = S_{n0},
    ``tr(AB) >= mu(A) zeta(B)`` and ``tr(AB) <= n0 * d_n``.
    """
    n = summary.n if n is None else int(n)
    ratio = float(np.sqrt(n) / summary.min_eig_sqrt)
    A = summary.gram_inv_sqrt @ summary.gram_inv_sqrt
    B = summary.gram_n0
    tr = float(np.trace(A @ B))
    witness = trace_inequality_holds(A, B) and tr <= summary.n0 * summary.leverage * (1 + 1e-10)
    return ratio, bool(witness)


# -- generators -------------------------------------------------------------

@dataclass(frozen=True)
class DesignGenSpec:
    """Parametric design family: ``kind`` in GENERATORS with dimension ``p``.

    ``delta`` is used by the ``decay`` family only.
    """

    kind: str
    p: int = 2
    delta: float = 1.0
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown design generator {self.kind!r}; expected one of {GENERATORS}")
        if int(self.p) < 1:
            raise ValueError("p must be >= 1")
        if self.kind == "decay" and not 0.0 < self.delta <= 1.0:
            raise ValueError("decay delta must lie in (0, 1]")

    @classmethod
    def from_spec(cls, spec: dict) -> "DesignGenSpec":
        try:
            return cls(kind=spec["kind"], p=int(spec.get("p", 2)), delta=float(spec.get("delta", 1.0)))
        except (KeyError, TypeError, AttributeError):
            raise ValueError(f"malformed design spec: {spec!r}") from None

    def to_spec(self) -> dict:
        d = {"kind": self.kind, "p": self.p}
        if self.kind == "decay":
            d["delta"] = self.delta
        return d


def _blocks(n: int, p: int) -> np.ndarray:
    X = np.zeros((n, p))
    X[np.arange(n), np.arange(n) % p] = 1.0
    return X


def generate_design(spec: DesignGenSpec, n: int, seed=0) -> np.ndarray:
    """Deterministic design of size ``n`` from the family ``spec``.

    orthogonal_blocks cycles through the unit vectors, so for n divisible by
    p the Gram matrix is (n/p) I_p and d_n = p/n.  decay scales the first row
    of that design to norm n^((1 - delta)/2), which gives d_n of order
    n^(-delta).  adversarial_leverage scales it to sqrt(n) so d_n tends to a
    constant.
    """
    if isinstance(spec, dict):
        spec = DesignGenSpec.from_spec(spec)
    n, p = int(n), int(spec.p)
    if n < p:
        raise ValueError(f"n={n} is smaller than p={p}")
    if spec.kind == "gaussian_iid":
        return np.random.default_rng(seed).standard_normal((n, p))
    X = _blocks(n, p)
    if spec.kind == "decay":
        X[0] *= n ** (0.5 * (1.0 - spec.delta))
    elif spec.kind == "adversarial_leverage":
        X[0] *= np.sqrt(n)
    return X


def solve_weighted(X: np.ndarray, w: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (X' W X) b = rhs by Cholesky, with W = diag(w), w >= 0."""
    G = (X * w[:, None]).T @ X
    try:
        return linalg.cho_solve(linalg.cho_factor(G, check_finite=False), rhs, check_finite=False)
    except linalg.LinAlgError:
        return linalg.lstsq(G, rhs, check_finite=False)[0]
