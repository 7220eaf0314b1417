"""Convex losses for M-estimation: Huber, power (L^q) and quantile check loss.

Each loss exposes its value ``rho``, the exact one-sided derivatives
``psi_one_sided`` and a selected score ``psi`` sitting between them.  At a
kink the selected score is the midpoint of the subdifferential.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("huber", "power", "quantile")

# increment_bound default grid
U_GRID = np.linspace(-50.0, 50.0, 10001)
H_FRACTIONS = (0.1, 0.5, 1.0 - 1e-6)


@dataclass(frozen=True)
class ConvexLoss:
    """A convex loss selected by ``kind`` with its single shape parameter.

    Use the ``huber``, ``power`` and ``quantile`` constructors or
    ``from_spec`` rather than building instances by hand.
    """

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        p = float(self.param)
        if not np.isfinite(p):
            raise ValueError("loss parameter must be finite")
        if self.kind == "huber" and p <= 0:
            raise ValueError(f"Huber threshold c must be positive, got {p}")
        if self.kind == "power" and not 1.0 <= p <= 2.0:
            raise ValueError(f"power q must lie in [1, 2], got {p}")
        if self.kind == "quantile" and not 0.0 < p < 1.0:
            raise ValueError(f"quantile level alpha must lie in (0, 1), got {p}")
        object.__setattr__(self, "param", p)

    # -- constructors -----------------------------------------------------
    @classmethod
    def huber(cls, c: float = 1.345) -> "ConvexLoss":
        return cls("huber", c)

    @classmethod
    def power(cls, q: float) -> "ConvexLoss":
        return cls("power", q)

    @classmethod
    def quantile(cls, alpha: float = 0.5) -> "ConvexLoss":
        return cls("quantile", alpha)

    @classmethod
    def from_spec(cls, spec: dict) -> "ConvexLoss":
        """Build from ``{"kind": "huber", "c": 1.345}`` style dictionaries."""
        try:
            kind = spec["kind"].lower()
            key = {"huber": "c", "power": "q", "quantile": "alpha"}[kind]
        except (KeyError, AttributeError, TypeError):
            raise ValueError(f"malformed loss spec: {spec!r}") from None
        if key not in spec:
            raise ValueError(f"loss spec for {kind!r} needs field {key!r}")
        return cls(kind, spec[key])

    def to_spec(self) -> dict:
        key = {"huber": "c", "power": "q", "quantile": "alpha"}[self.kind]
        return {"kind": self.kind, key: self.param}

    # -- properties -------------------------------------------------------
    @property
    def is_smooth(self) -> bool:
        """True when rho is differentiable everywhere (no kink in rho)."""
        return self.kind == "huber" or (self.kind == "power" and self.param > 1.0)

    @property
    def is_kinked(self) -> bool:
        return not self.is_smooth

    @property
    def psi_bound(self) -> float:
        """sup |psi|, infinite for power losses with q > 1."""
        if self.kind == "huber":
            return self.param
        if self.kind == "quantile":
            return max(self.param, 1.0 - self.param)
        return 1.0 if self.param == 1.0 else np.inf

    def kinks(self) -> tuple[float, ...]:
        """Points where psi is not differentiable."""
        if self.kind == "huber":
            return (-self.param, self.param)
        return (0.0,)

    # -- evaluation -------------------------------------------------------
    def rho(self, x):
        x = np.asarray(x, dtype=float)
        a = self.param
        if self.kind == "huber":
            ax = np.abs(x)
            return np.where(ax <= a, 0.5 * x * x, a * ax - 0.5 * a * a)
        if self.kind == "power":
            return np.abs(x) ** a
        return a * np.maximum(x, 0.0) + (1.0 - a) * np.maximum(-x, 0.0)

    def psi_one_sided(self, u):
        """Exact left and right derivatives ``(psi_minus, psi_plus)`` of rho."""
        u = np.asarray(u, dtype=float)
        a = self.param
        if self.kind == "huber":
            d = np.clip(u, -a, a)
            return d, d.copy()
        if self.kind == "power":
            if a == 1.0:
                return np.where(u > 0, 1.0, -1.0), np.where(u < 0, -1.0, 1.0)
            d = a * np.sign(u) * np.abs(u) ** (a - 1.0)
            return d, d.copy()
        left = np.where(u > 0, a, a - 1.0)
        right = np.where(u < 0, a - 1.0, a)
        return left, right

    def psi(self, u):
        """Selected score; the subdifferential midpoint at kinks."""
        u = np.asarray(u, dtype=float)
        a = self.param
        if self.kind == "huber":
            return np.clip(u, -a, a)
        if self.kind == "power":
            if a < 1.01:
                # near-L1: |u|^(q-1) is numerically a step, pin psi(0) explicitly
                out = a * np.sign(u) * np.abs(u) ** (a - 1.0)
                return np.where(u == 0, 0.0, out)
            return a * np.sign(u) * np.abs(u) ** (a - 1.0)
        return np.where(u > 0, a, np.where(u < 0, a - 1.0, a - 0.5))

    def __call__(self, x):
        return self.rho(x)


@dataclass
class ConditionReport:
    """Numerical evidence for the increment and identification conditions.

    ``c0`` bounds ``psi(u + h) - psi(u)`` for ``0 < h < delta``; ``c1`` is the
    smallest observed ``|G(u)| / |u|`` on ``|u| <= delta`` where
    ``G(u) = E psi(e + u)``.  Fields not evaluated by the producing check are
    NaN.
    """

    delta: float
    c0: float = np.nan
    c0_closed_form: float = np.nan
    c1: float = np.nan
    mean_psi: float = np.nan
    passed: bool = False
    evidence_grid: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if np.isfinite(v) else None

        return {
            "delta": clean(self.delta),
            "c0": clean(self.c0),
            "c0_closed_form": clean(self.c0_closed_form),
            "c1": clean(self.c1),
            "mean_psi": clean(self.mean_psi),
            "passed": bool(self.passed),
            "evidence_grid": [[clean(u), clean(g)] for u, g in self.evidence_grid],
            "notes": list(self.notes),
        }


def increment_closed_form(loss: ConvexLoss, delta: float) -> float:
    """sup of psi(u + h) - psi(u) over u in R and 0 < h < delta.

    psi for q in (1, 2) is Hölder with exponent q - 1; the worst increment of
    size h is centred on zero, giving 2 q (h / 2)^(q - 1).
    """
    a = loss.param
    if loss.kind == "huber":
        return min(delta, 2.0 * a)
    if loss.kind == "quantile":
        return 1.0
    if a == 1.0:
        return 2.0
    return 2.0 * a * (0.5 * delta) ** (a - 1.0)


def increment_bound(loss: ConvexLoss, delta: float, u_grid=None, h_fractions=None) -> ConditionReport:
    """Estimate the increment constant C0 of psi over a grid.

    Parameters
    ----------
    loss : ConvexLoss
    delta : float
        Upper limit (exclusive) of the increment size h.
    u_grid : array_like, optional
        Base points; defaults to ``[-50, 50]`` at step 0.01.
    h_fractions : sequence of float, optional
        Increments as fractions of ``delta``, each in (0, 1).

    Returns
    -------
    ConditionReport
        With ``c0`` (grid supremum) and ``c0_closed_form`` filled in.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    u = U_GRID if u_grid is None else np.asarray(u_grid, dtype=float).ravel()
    fr = H_FRACTIONS if h_fractions is None else tuple(h_fractions)
    if u.size == 0 or len(fr) == 0:
        raise ValueError("empty grid")
    if any(not 0.0 < f < 1.0 for f in fr):
        raise ValueError("h fractions must lie in (0, 1)")
    base = loss.psi(u)
    c0 = max(float(np.max(loss.psi(u + f * delta) - base)) for f in fr)
    report = ConditionReport(delta=delta, c0=c0, c0_closed_form=increment_closed_form(loss, delta))
    report.passed = bool(np.isfinite(c0))
    if loss.kind == "power" and 1.0 < loss.param < 2.0:
        report.notes.append("power loss: C0 from Hölder continuity of psi, not Lipschitz")
    return report
