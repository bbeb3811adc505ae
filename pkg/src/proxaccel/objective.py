"""LASSO objective ``0.5*||A x - y||^2 + lam*||x||_1`` and its building blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .wavelet import CoeffVector, WaveletSpec, get_wavelet

__all__ = [
    "LassoProblem",
    "DiagScaling",
    "fidelity",
    "gradient",
    "fidelity_and_gradient",
    "objective",
    "soft_threshold",
    "prox_scaled",
    "estimate_lipschitz",
    "nmse",
    "nmse_db",
    "NMSE_FLOOR_DB",
    "LIPSCHITZ_SAFETY",
]

NMSE_FLOOR_DB = -300.0
LIPSCHITZ_SAFETY = 1.01


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def estimate_lipschitz(model, max_iters: int = 100, tol: float = 1e-8, seed: int = 0,
                       safety: float = LIPSCHITZ_SAFETY) -> float:
    """Power iteration on ``x -> A^T A x``, inflated by ``safety``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(model.n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iters):
        w = model.adjoint(model.apply(v))
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if est > 0 and abs(new - est) <= tol * est:
            est = new
            break
        est = new
    if est <= 0.0:
        raise ValueError("operator appears to be zero; Lipschitz constant undefined")
    return safety * est


@dataclass(eq=False)
class LassoProblem:
    """Forward model, measurement and regularization weight.

    ``lipschitz`` is estimated by power iteration when not given.
    """

    model: object
    y: np.ndarray
    lam: float
    lipschitz: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.shape != (self.model.m,):
            raise ValueError(f"measurement shape {self.y.shape} does not match model ({self.model.m},)")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.lipschitz is None:
            self.lipschitz = estimate_lipschitz(self.model)
        if not self.lipschitz > 0:
            raise ValueError("lipschitz constant must be positive")

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def step(self) -> float:
        return 1.0 / self.lipschitz

    def with_lambda(self, lam: float) -> "LassoProblem":
        return LassoProblem(self.model, self.y, lam, self.lipschitz, dict(self.meta))


def _residual(p: LassoProblem, x) -> np.ndarray:
    x = _vec(x)
    if x.shape != (p.n,):
        raise ValueError(f"coefficient vector of shape {x.shape}, expected ({p.n},)")
    return p.model.apply(x) - p.y


def fidelity(p: LassoProblem, x) -> float:
    r = _residual(p, x)
    return 0.5 * float(np.vdot(r, r).real)


def gradient(p: LassoProblem, x) -> np.ndarray:
    """``Re(A^H (A x - y))``."""
    return p.model.adjoint(_residual(p, x))


def fidelity_and_gradient(p: LassoProblem, x) -> tuple[float, np.ndarray]:
    r = _residual(p, x)
    return 0.5 * float(np.vdot(r, r).real), p.model.adjoint(r)


def objective(p: LassoProblem, x) -> float:
    return fidelity(p, x) + p.lam * float(np.abs(_vec(x)).sum())


def soft_threshold(x, tau):
    """Elementwise ``sign(x) * max(|x| - tau, 0)``; ``tau`` scalar or per-element."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("soft-threshold levels must be nonnegative")
    if isinstance(x, CoeffVector):
        return CoeffVector(soft_threshold(x.data, tau), x.layout, x.shape)
    x = _vec(x)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


@dataclass(frozen=True, eq=False)
class DiagScaling:
    """Per-group diagonal scaling with every value in ``[1/delta, delta]``."""

    values: np.ndarray
    groups: tuple[slice, ...]
    delta: float
    n: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if vals.shape != (len(self.groups),):
            raise ValueError("one scaling value per group is required")
        lo, hi = 1.0 / self.delta, self.delta
        if np.any(~np.isfinite(vals)) or np.any(vals < lo * (1 - 1e-12)) or np.any(vals > hi * (1 + 1e-12)):
            raise ValueError(f"scaling values must lie in [{lo}, {hi}]")

    @classmethod
    def identity(cls, groups, n: int, delta: float = 1.0) -> "DiagScaling":
        groups = tuple(groups)
        return cls(np.ones(len(groups)), groups, delta, n)

    @classmethod
    def clamped(cls, values, groups, delta: float, n: int) -> "DiagScaling":
        return cls(np.clip(np.asarray(values, dtype=float), 1.0 / delta, delta), groups, delta, n)

    def expand(self) -> np.ndarray:
        out = np.empty(self.n)
        covered = 0
        for v, sl in zip(self.values, self.groups):
            out[sl] = v
            covered += sl.stop - sl.start
        if covered != self.n:
            raise ValueError("scaling groups do not cover the coefficient vector")
        return out


def prox_scaled(x, d: DiagScaling, lam: float, t: float = 1.0):
    """Prox of ``lam*||.||_1`` in the metric ``(t D)^{-1}``: soft threshold at ``lam*t*d_i``."""
    return soft_threshold(x, lam * t * d.expand())


def nmse_db(x_hat, x_ref, transform) -> float:
    """``10 log10(||W^T(x_hat - x_ref)||^2 / ||W^T x_ref||^2)`` in the image domain."""
    ref_img = transform.inverse(_vec(x_ref))
    denom = float(np.sum(ref_img**2))
    if denom == 0.0:
        raise ValueError("reference is zero; NMSE undefined")
    err = float(np.sum((transform.inverse(_vec(x_hat)) - ref_img) ** 2))
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(NMSE_FLOOR_DB, 10.0 * np.log10(err / denom))


def nmse(x_hat: CoeffVector, x_ref: CoeffVector, spec: WaveletSpec) -> float:
    return nmse_db(x_hat, x_ref, get_wavelet(spec, tuple(x_ref.shape)))
