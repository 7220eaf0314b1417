"""M-estimation by majorize-minimize (IRLS) with kink smoothing.

Every supported loss splits as ``rho(r) = a * r + g(r)`` with ``g`` even and
``g(sqrt(t))`` concave in ``t``, so the quadratic

    g(r0) + g'(r0) / (2 r0) * (r^2 - r0^2)

majorizes ``g`` and each IRLS step is a weighted least-squares solve.  Kinks
of ``g`` at zero are replaced by a quadratic of half-width ``s`` and ``s`` is
driven down in stages.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
from scipy import optimize

from .design import as_design, solve_weighted
from .losses import ConvexLoss


class NotConverged(RuntimeWarning):
    """The final smoothing stage hit ``max_iter`` before stationarity."""


class MinimizerOnBoundary(ValueError):
    """The grid minimum sits on the search box boundary; enlarge the box."""


@dataclass(frozen=True)
class SolverOpts:
    """Solver settings.

    Stationarity is declared when ``||X' psi_s(r)||_inf`` falls below
    ``grad_tol`` times ``max(n, sum_i |psi_s(r_i)| * ||x_i||_inf)``, i.e. the
    gradient is small relative to the size of its own summands, plus a
    floor for the rounding noise of the residuals.
    """

    grad_tol: float = 1e-8
    obj_tol: float = 1e-9
    max_iter: int = 500
    s_start: float = 1e-2
    s_final: float = 1e-8
    s_factor: float = 0.1

    @classmethod
    def from_spec(cls, spec: dict | None) -> "SolverOpts":
        spec = dict(spec or {})
        known = set(cls.__dataclass_fields__)
        bad = set(spec) - known
        if bad:
            raise ValueError(f"unknown solver options: {sorted(bad)}")
        return cls(**spec)

    def schedule(self) -> list[float]:
        out, s = [], self.s_start
        while s > self.s_final * (1 + 1e-9):
            out.append(s)
            s *= self.s_factor
        out.append(self.s_final)
        return out


@dataclass
class FitResult:
    beta_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    smoothing_final: float
    grad_norm: float = np.nan

    def to_dict(self) -> dict:
        return {
            "beta_hat": [float(b) for b in self.beta_hat],
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "smoothing_final": float(self.smoothing_final),
        }


def _check(X, y, beta=None):
    X = as_design(X)
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"y has {y.shape[0]} entries but the design has {X.shape[0]} rows")
    if beta is not None:
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.shape[0] != X.shape[1]:
            raise ValueError(f"beta has {beta.shape[0]} entries, expected {X.shape[1]}")
    return X, y, beta


def objective(X, y, loss: ConvexLoss, beta) -> float:
    """sum_i rho(y_i - x_i' beta)."""
    X, y, beta = _check(X, y, beta)
    return float(np.sum(loss.rho(y - X @ beta)))


# -- smoothed surrogate -----------------------------------------------------

def _split(loss: ConvexLoss):
    """Linear coefficient ``a``, even-part scale and exponent of ``g``."""
    if loss.kind == "quantile":
        return loss.param - 0.5, 0.5, 1.0
    if loss.kind == "power":
        return 0.0, 1.0, loss.param
    return 0.0, 1.0, None  # huber


def _weights(loss: ConvexLoss, r: np.ndarray, s: float) -> np.ndarray:
    """IRLS weights g_s'(r) / r."""
    _, scale, q = _split(loss)
    if q is None:
        c = loss.param
        return np.minimum(1.0, c / np.maximum(np.abs(r), 1e-300))
    if q == 2.0:
        return np.full_like(r, 2.0)
    return scale * q * np.maximum(np.abs(r), s) ** (q - 2.0)


def _curvature(loss: ConvexLoss, r: np.ndarray, s: float) -> np.ndarray:
    """Second derivative of the smoothed loss (one-sided at the seams)."""
    _, scale, q = _split(loss)
    ar = np.abs(r)
    if q is None:
        return (ar <= loss.param).astype(float)
    if q == 2.0:
        return np.full_like(r, 2.0)
    inside = scale * q * s ** (q - 2.0)
    if q == 1.0:
        return np.where(ar <= s, inside, 0.0)
    return np.where(ar <= s, inside, scale * q * (q - 1.0) * np.maximum(ar, s) ** (q - 2.0))


def smoothed_rho(loss: ConvexLoss, r, s: float):
    """rho with the kink at zero replaced by a C^1 quadratic of half-width s."""
    r = np.asarray(r, dtype=float)
    a, scale, q = _split(loss)
    if q is None or q == 2.0:
        return loss.rho(r)
    ar = np.abs(r)
    inner = 0.5 * q * s ** (q - 2.0) * r * r + s**q * (1.0 - 0.5 * q)
    return a * r + scale * np.where(ar <= s, inner, ar**q)


def smoothed_psi(loss: ConvexLoss, r, s: float):
    r = np.asarray(r, dtype=float)
    a, _, _ = _split(loss)
    return a + _weights(loss, r, s) * r


def _newton_candidate(X, loss, r, s, grad, beta):
    """Full Newton step on the smoothed objective, or None if the Hessian is singular.

    The smoothed objective is piecewise quadratic near a kink, so once the set
    of residuals inside the smoothing zone settles this step is exact.
    """
    h = _curvature(loss, r, s)
    if np.count_nonzero(h) < X.shape[1]:
        return None
    H = (X * h[:, None]).T @ X
    try:
        w = np.linalg.eigvalsh(H)
    except np.linalg.LinAlgError:
        return None
    if not w[0] > 1e-12 * w[-1]:
        return None
    return beta + np.linalg.solve(H, grad)


def _line_candidate(X, y, loss, s, beta, d, f_one):
    """Minimize the smoothed objective along ``beta + t d``.

    Outside the smoothing zones a piecewise-linear objective is linear, so
    IRLS steps shrink as a residual nears a zone; the line search jumps to the
    next zone instead.  The line objective is convex: double t while it
    descends, then refine with a bounded scalar search.
    """
    Xd = X @ d
    if not np.any(Xd):
        return beta, f_one
    r0 = y - X @ beta

    def f(t):
        return float(np.sum(smoothed_rho(loss, r0 - t * Xd, s)))

    t, ft = 1.0, f_one
    for _ in range(60):
        f2 = f(2.0 * t)
        if f2 >= ft:
            break
        t, ft = 2.0 * t, f2
    res = optimize.minimize_scalar(f, bounds=(0.5 * t if t > 1 else 0.0, 2.0 * t), method="bounded",
                                   options={"xatol": 1e-12 * t})
    if res.fun < ft:
        t, ft = float(res.x), float(res.fun)
    return beta + t * d, ft


def _vertex_candidate(X, y, r):
    """Point where the p smallest residuals vanish, or None if those rows are dependent.

    Piecewise-linear objectives attain their minimum at such a vertex; IRLS
    alone approaches it only linearly.
    """
    p = X.shape[1]
    idx = np.argsort(np.abs(r), kind="stable")[:p]
    A = X[idx]
    if abs(np.linalg.det(A)) <= 1e-10 * np.prod(np.linalg.norm(A, axis=1)):
        return None
    return np.linalg.solve(A, y[idx])


def _rounding_floor(X, y, loss, r, s, xabs) -> float:
    """Gradient noise from residual rounding, eps * |y| times the curvature.

    Residuals inside a smoothing zone of half-width s carry curvature of
    order 1/s, so at s = 1e-8 rounding alone can exceed grad_tol.
    """
    h = _curvature(loss, r, s)
    return 8.0 * np.finfo(float).eps * float(np.sum(h * (np.abs(y) + np.abs(y - r)) * xabs))


def fit(X, y, loss: ConvexLoss, opts: SolverOpts | None = None, beta_init=None) -> FitResult:
    """Minimize sum_i rho(y_i - x_i' beta).

    Starts from least squares (or ``beta_init``) and runs IRLS on the
    smoothed loss, taking a Newton step instead of the MM step whenever it
    lowers the smoothed objective more, for each smoothing level in ``opts.schedule()``; smooth
    losses use a single unsmoothed stage.  A ``NotConverged`` warning is
    issued, and ``converged`` is False, when the last stage ends without
    reaching the gradient tolerance.
    """
    opts = opts or SolverOpts()
    X, y, _ = _check(X, y)
    n = X.shape[0]
    ones = np.ones(n)
    a, _, q = _split(loss)
    xsum = X.T @ ones

    beta = solve_weighted(X, ones, X.T @ y) if beta_init is None else np.asarray(beta_init, float).copy()
    if q == 2.0:
        # one weighted solve is exact; polish once against rounding
        r = y - X @ beta
        beta = beta + solve_weighted(X, ones, X.T @ r)
        r = y - X @ beta
        g = 2.0 * (X.T @ r)
        return FitResult(beta, float(np.sum(loss.rho(r))), 1, True, 0.0, float(np.max(np.abs(g))))

    stages = [0.0] if q is None else opts.schedule()
    xabs = np.max(np.abs(X), axis=1)
    total_iter = 0
    stationary = False
    gnorm = np.inf
    for s in stages:
        stationary = False
        r = y - X @ beta
        f_old = np.sum(smoothed_rho(loss, r, s))
        for _ in range(opts.max_iter):
            w = _weights(loss, r, s)
            psi_s = a + w * r
            grad = X.T @ psi_s
            gnorm = float(np.max(np.abs(grad)))
            tol = opts.grad_tol * max(n, float(np.sum(np.abs(psi_s) * xabs))) + _rounding_floor(X, y, loss, r, s, xabs)
            if gnorm <= tol:
                stationary = True
                break
            beta_new = solve_weighted(X, w, X.T @ (w * y) + a * xsum)
            r_new = y - X @ beta_new
            f_new = np.sum(smoothed_rho(loss, r_new, s))
            beta_nt = _newton_candidate(X, loss, r, s, grad, beta)
            took_newton = False
            if beta_nt is not None:
                r_nt = y - X @ beta_nt
                f_nt = np.sum(smoothed_rho(loss, r_nt, s))
                # near convergence the gain is below objective rounding; the
                # Newton point is then exact on the current quadratic piece
                if f_nt <= f_new + 1e-13 * (1.0 + abs(f_new)):
                    beta_new, r_new, f_new = beta_nt, r_nt, f_nt
                    took_newton = True
            if q == 1.0 and not took_newton:
                beta_ls, f_ls = _line_candidate(X, y, loss, s, beta, beta_new - beta, f_new)
                if f_ls < f_new:
                    beta_new, r_new, f_new = beta_ls, y - X @ beta_ls, f_ls
                beta_vx = _vertex_candidate(X, y, r)
                if beta_vx is not None:
                    r_vx = y - X @ beta_vx
                    f_vx = np.sum(smoothed_rho(loss, r_vx, s))
                    if f_vx < f_new:
                        beta_new, r_new, f_new = beta_vx, r_vx, f_vx
            total_iter += 1
            if f_new > f_old + 1e-12 * abs(f_old):
                # MM cannot ascend except by rounding; stop the stage
                break
            step = np.max(np.abs(beta_new - beta))
            beta, r = beta_new, r_new
            if step <= 1e-15 * (1.0 + np.max(np.abs(beta))) and abs(f_old - f_new) <= opts.obj_tol * (1.0 + abs(f_new)):
                # numerical fixed point of the MM map
                psi_s = a + _weights(loss, r, s) * r
                gnorm = float(np.max(np.abs(X.T @ psi_s)))
                stationary = gnorm <= tol
                break
            f_old = f_new
    if not stationary:
        warnings.warn(
            f"{loss.kind} fit did not reach grad_tol at smoothing {stages[-1]:g}", NotConverged, stacklevel=2
        )
    return FitResult(
        beta_hat=beta,
        objective=float(np.sum(loss.rho(y - X @ beta))),
        iterations=total_iter,
        converged=stationary,
        smoothing_final=stages[-1],
        grad_norm=gnorm,
    )


# -- brute-force oracle -----------------------------------------------------

@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned search box ``center +- half_width`` for the grid oracle."""

    center: tuple
    half_width: float | tuple
    rounds: int = 5
    points: int = 41


def brute_force_fit(X, y, loss: ConvexLoss, box: BoxSpec) -> FitResult:
    """Nested grid search over ``box``, for p <= 3.

    Each round evaluates ``points**p`` grid points and recentres a box of
    half-width one grid spacing on the best point.  For piecewise-linear
    losses the grid result is cross-checked against ``vertex_search``, since
    a grid cannot resolve a polyhedral minimum to high accuracy.
    """
    X, y, _ = _check(X, y)
    p = X.shape[1]
    if p > 3:
        raise ValueError("brute_force_fit supports p <= 3")
    if box.points < 3 or box.points % 2 == 0:
        raise ValueError("box.points must be an odd number >= 3")
    center = np.asarray(box.center, dtype=float).ravel()
    if center.shape[0] != p:
        raise ValueError("box center has wrong dimension")
    half = np.broadcast_to(np.asarray(box.half_width, dtype=float), (p,)).copy()
    t = np.linspace(-1.0, 1.0, box.points)
    best_val = np.inf
    for k in range(box.rounds):
        axes = [center[j] + half[j] * t for j in range(p)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
        vals = np.empty(mesh.shape[0])
        chunk = max(1, 2_000_000 // X.shape[0])
        for i in range(0, mesh.shape[0], chunk):
            R = y[:, None] - X @ mesh[i : i + chunk].T
            vals[i : i + chunk] = np.sum(loss.rho(R), axis=0)
        idx = int(np.argmin(vals))
        if k == 0:
            pos = np.unravel_index(idx, (box.points,) * p)
            if any(i in (0, box.points - 1) for i in pos):
                raise MinimizerOnBoundary(f"grid minimum on the box boundary at {mesh[idx]}")
        best_val = float(vals[idx])
        center = mesh[idx]
        half = half * (t[1] - t[0])
    if loss.is_kinked:
        vb = vertex_search(X, y, loss)
        if vb is not None and vb[1] < best_val:
            center, best_val = vb
    return FitResult(center, best_val, box.rounds, True, 0.0)


MAX_VERTICES = 250_000


def vertex_search(X, y, loss: ConvexLoss):
    """Exhaustive search over basic solutions for piecewise-linear losses.

    The minimum of a sum of piecewise-linear convex terms is attained where p
    residuals with linearly independent rows vanish, so enumerating every
    such p-subset finds it exactly.  Returns ``(beta, value)`` or None when
    there are more than MAX_VERTICES subsets.
    """
    n, p = X.shape
    if comb(n, p) > MAX_VERTICES:
        return None
    idx = np.array(list(combinations(range(n), p)))
    A = X[idx]  # (m, p, p)
    b = y[idx]
    det = np.linalg.det(A)
    scale = np.prod(np.linalg.norm(A, axis=2), axis=1)
    ok = np.abs(det) > 1e-10 * np.maximum(scale, 1e-300)
    if not np.any(ok):
        return None
    betas = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    best_val, best = np.inf, None
    for i in range(0, betas.shape[0], 4096):
        B = betas[i : i + 4096]
        vals = np.sum(loss.rho(y[:, None] - X @ B.T), axis=0)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best = float(vals[j]), B[j].copy()
    return best, best_val


# -- D_n process --------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_V = 0.5 * (_GL_NODES + 1.0)
_V4, _V4_WEIGHTS = _V**4, 0.5 * _GL_WEIGHTS * 4.0 * _V**3  # nodes and weights of x = v^4 on [0, 1]


def _increment_integral(loss: ConvexLoss, e: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Gauss-Legendre value of int_0^a {psi(e + t) - psi(e)} dt, split at kinks.

    Each piece is halved and each half mapped by x = end -+ L v^4 toward its
    outer end, so a Hölder cusp of psi at a kink (power losses) becomes a
    smooth v^(4q - 1) factor.
    """
    lo, hi = np.minimum(0.0, a), np.maximum(0.0, a)
    cuts = [lo, hi] + [np.clip(k - e, lo, hi) for k in loss.kinks()]
    pts = np.sort(np.stack(cuts, axis=0), axis=0)
    base = loss.psi(e)
    total = np.zeros_like(e)
    for j in range(pts.shape[0] - 1):
        left, right = pts[j], pts[j + 1]
        half = 0.5 * (right - left)
        for end, sign in ((left, 1.0), (right, -1.0)):
            t = end[None, :] + sign * half[None, :] * _V4[:, None]
            vals = loss.psi(e[None, :] + t) - base[None, :]
            total += half * (_V4_WEIGHTS @ vals)
    return np.where(a < 0, -total, total)


@dataclass(frozen=True)
class DnTrace:
    direction: np.ndarray
    scale: float
    total: float
    i1: float
    i2: float
    i1_quadrature: float = np.nan

    @property
    def identity_error(self) -> float:
        """|total - (i1 + i2)| using the quadrature value of i1 when present."""
        i1 = self.i1 if np.isnan(self.i1_quadrature) else self.i1_quadrature
        return abs(self.total - (i1 + self.i2))


def _unit(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float).ravel()
    if abs(np.linalg.norm(gamma) - 1.0) > 1e-10:
        raise ValueError(f"gamma must be a unit vector, has norm {np.linalg.norm(gamma)}")
    return gamma


def dn_trace(normalized, errors, loss: ConvexLoss, eps: float, gamma, quadrature: bool = True) -> DnTrace:
    """Evaluate D_n(eps sqrt(n) gamma) and its split into I_1n + I_2n.

    ``normalized`` is a NormalizedDesign (or its rows); ``errors`` are the
    true errors e_i.  With ``quadrature`` the I_1n integrals are recomputed
    independently of rho.
    """
    Z = getattr(normalized, "rows", normalized)
    gamma = _unit(gamma)
    e = np.asarray(errors, dtype=float).ravel()
    n = Z.shape[0]
    a = -eps * np.sqrt(n) * (Z @ gamma)  # w_ni' gamma
    total = float(np.sum(loss.rho(e + a) - loss.rho(e)))
    i2 = float(np.sum(a * loss.psi(e)))
    iq = float(np.sum(_increment_integral(loss, e, a))) if quadrature else np.nan
    return DnTrace(gamma, float(eps), total, total - i2, i2, iq)


@dataclass(frozen=True)
class BoundReport:
    n: int
    eps: float
    n_directions: int
    c1: float
    min_total: float
    min_i1: float
    max_abs_i2: float
    i1_threshold: float
    i1_ok: bool
    total_positive: bool
    i2_ok: bool
    identity_error: float
    quadrature_rel_error: float
    max_increment: float
    within_delta: bool | None

    def to_dict(self) -> dict:
        return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in self.__dict__.items()}


def random_directions(p: int, m: int, seed) -> np.ndarray:
    G = np.random.default_rng(seed).standard_normal((m, p))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def verify_dn_lower_bound(
    normalized,
    errors,
    loss: ConvexLoss,
    eps: float,
    n_directions: int,
    seed,
    c1: float,
    delta: float | None = None,
    quadrature_checks: int = 5,
) -> BoundReport:
    """Sample unit directions and compare D_n, I_1n, I_2n with their bounds.

    ``i1_ok`` tests min I_1n >= c1 eps^2 n / 8 and ``i2_ok`` tests
    max |I_2n| <= c1 eps^2 n / 16.  A positive ``min_total`` means every
    sampled point on the sphere of radius eps sqrt(n) has larger objective
    than the truth, which by convexity confines the normalized estimate to
    that ball along the sampled directions.  The first ``quadrature_checks``
    directions also get an independent quadrature value of I_1n.
    """
    Z = getattr(normalized, "rows", normalized)
    e = np.asarray(errors, dtype=float).ravel()
    n, p = Z.shape
    G = random_directions(p, n_directions, seed)
    A = -eps * np.sqrt(n) * (Z @ G.T)  # (n, m)
    rho_e = loss.rho(e)
    total = np.sum(loss.rho(e[:, None] + A) - rho_e[:, None], axis=0)
    i2 = loss.psi(e) @ A
    i1 = total - i2
    ident, qerr = 0.0, 0.0
    for j in range(min(quadrature_checks, n_directions)):
        iq = float(np.sum(_increment_integral(loss, e, A[:, j])))
        ident = max(ident, abs(total[j] - (iq + i2[j])))
        qerr = max(qerr, abs(iq - i1[j]) / max(abs(i1[j]), 1e-300))
    thr = c1 * eps**2 * n / 8.0
    max_inc = float(np.max(np.abs(A))) if A.size else 0.0
    return BoundReport(
        n=n,
        eps=float(eps),
        n_directions=int(n_directions),
        c1=float(c1),
        min_total=float(np.min(total)),
        min_i1=float(np.min(i1)),
        max_abs_i2=float(np.max(np.abs(i2))),
        i1_threshold=thr,
        i1_ok=bool(np.min(i1) >= thr),
        total_positive=bool(np.min(total) > 0),
        i2_ok=bool(np.max(np.abs(i2)) <= thr / 2.0),
        identity_error=float(ident),
        quadrature_rel_error=float(qerr),
        max_increment=max_inc,
        within_delta=None if delta is None else bool(max_inc < delta),
    )
