"""Proximal-gradient solvers for the LASSO problem.

All solvers take a starting point and return ``(x, trace)``; the trace holds
one record for the starting point plus one per executed iteration.

Sufficient decrease is tested in composite form,

    F(x + g z) <= F(x) + beta * g * (grad f(x)^T z + lam*||x + z||_1 - lam*||x||_1),

which is the usual smooth Armijo rule when the nonsmooth term is absent. It is
evaluated through ``A z`` so that no large objective values are subtracted.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from .objective import DiagScaling, LassoProblem, fidelity_and_gradient, nmse_db, soft_threshold

__all__ = [
    "SolverConfig",
    "RelaxState",
    "SearchDirection",
    "Provenance",
    "TraceRecord",
    "SolverTrace",
    "armijo_satisfied",
    "ista",
    "fista_backtracking",
    "sgp_generic",
    "drs_direction",
    "sgp_learned",
    "run_to_convergence",
    "GAMMA_UNDERFLOW",
]

log = logging.getLogger(__name__)

GAMMA_UNDERFLOW = 1e-18
_ROUNDOFF = 1e-12

Prediction = Union[float, DiagScaling]
Predictor = Callable[[LassoProblem, np.ndarray, np.ndarray], Prediction]


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    beta: float = 1e-4
    eta: float = 0.5
    eta1: float = 0.5
    eta2: float = 0.5
    alpha: float = 0.9
    t_min: float | None = None  # default 1e-4 / L
    t_max: float | None = None  # default 10 / L
    delta: float = 10.0
    tolerance: float = 0.0
    max_backtracks: int = 60
    fista_l0: float | None = None  # initial FISTA Lipschitz guess, default L

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("beta", "eta", "eta1", "eta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.delta < 1.0:
            raise ValueError("delta must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        if self.t_min is not None and self.t_max is not None and not 0 < self.t_min <= self.t_max:
            raise ValueError("need 0 < t_min <= t_max")

    def step_bounds(self, lipschitz: float) -> tuple[float, float]:
        t_min = self.t_min if self.t_min is not None else 1e-4 / lipschitz
        t_max = self.t_max if self.t_max is not None else 10.0 / lipschitz
        if not t_min <= 1.0 / lipschitz <= t_max:
            log.warning("1/L = %g lies outside [t_min, t_max] = [%g, %g]", 1.0 / lipschitz, t_min, t_max)
        return t_min, t_max


@dataclass(frozen=True)
class RelaxState:
    gamma1: float = 1.0
    gamma2: float = 1.0
    use_cnn: bool = True


class Provenance(str, enum.Enum):
    LEARNED_MIXED = "learned_mixed"
    CONSERVATIVE_ONLY = "conservative_only"


@dataclass(frozen=True, eq=False)
class SearchDirection:
    z: np.ndarray
    provenance: Provenance
    step: float = math.nan  # predicted stepsize (mean over coefficients for scalings)
    target: np.ndarray | None = None  # x + z as computed by the prox, when z is not a mixture

    def point(self, x: np.ndarray, gamma: float) -> np.ndarray:
        """``x + gamma*z``; a full step returns the prox output itself so no rounding is added."""
        if gamma == 1.0 and self.target is not None:
            return self.target
        return x + gamma * self.z


@dataclass
class TraceRecord:
    iter: int
    objective: float
    fidelity: float
    nmse_db: float
    step: float
    gamma1: float
    gamma2: float
    use_cnn: bool
    backtracks: int
    wall_time: float
    note: str = ""


@dataclass
class SolverTrace:
    solver: str
    records: list[TraceRecord] = field(default_factory=list)
    status: str = "max_iters"
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def iterations(self) -> int:
        return len(self.records) - 1


class _Recorder:
    def __init__(self, name: str, p: LassoProblem, reference: np.ndarray | None):
        self.trace = SolverTrace(name)
        self.p = p
        self.reference = reference
        self.t0 = time.perf_counter()

    def add(self, k, x, f, step=math.nan, gamma1=math.nan, gamma2=math.nan, use_cnn=False, backtracks=0, note=""):
        obj = f + self.p.lam * float(np.abs(x).sum())
        err = math.nan
        if self.reference is not None:
            err = nmse_db(x, self.reference, self.p.model.transform)
        self.trace.records.append(
            TraceRecord(k, obj, f, err, step, gamma1, gamma2, use_cnn, backtracks, time.perf_counter() - self.t0, note)
        )
        if note:
            self.trace.warnings.append(f"iter {k}: {note}")


class _LineSearch:
    """Sufficient-decrease test along a fixed direction ``z`` from ``x``."""

    def __init__(self, p: LassoProblem, x: np.ndarray, residual: np.ndarray, z: np.ndarray, beta: float):
        self.lam = p.lam
        self.x = x
        self.z = z
        self.beta = beta
        az = p.model.apply(z)
        self.lin = float(np.vdot(residual, az).real)  # grad f(x)^T z
        self.quad = 0.5 * float(np.vdot(az, az).real)
        self.l1_x = np.abs(x)
        self.decrease = self.lin + self.lam * float(np.sum(np.abs(x + z) - self.l1_x))

    def __call__(self, gamma: float) -> bool:
        if not np.any(self.z):
            return True
        if not self.decrease < 0:
            return False
        change = gamma * self.lin + gamma * gamma * self.quad
        change += self.lam * float(np.sum(np.abs(self.x + gamma * self.z) - self.l1_x))
        return change <= self.beta * gamma * self.decrease


def armijo_satisfied(p: LassoProblem, x, z, gamma: float, beta: float) -> bool:
    """Sufficient-decrease test of step ``gamma`` along ``z`` (see module docstring).

    A nonzero ``z`` that is not a descent direction never satisfies it.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    residual = p.model.apply(x) - p.y
    return _LineSearch(p, x, residual, z, beta)(gamma)


def _residual_and_grad(p: LassoProblem, x: np.ndarray):
    r = p.model.apply(x) - p.y
    return r, 0.5 * float(np.vdot(r, r).real), p.model.adjoint(r)


def _start(p: LassoProblem, x0) -> np.ndarray:
    x = np.array(x0, dtype=float, copy=True)
    if x.shape != (p.n,):
        raise ValueError(f"x0 of shape {x.shape}, expected ({p.n},)")
    return x


def _small_step(cfg: SolverConfig, step: np.ndarray) -> bool:
    return cfg.tolerance > 0 and float(np.linalg.norm(step)) <= cfg.tolerance


def ista(p: LassoProblem, x0, cfg: SolverConfig | None = None, iters: int | None = None,
         reference=None) -> tuple[np.ndarray, SolverTrace]:
    """Proximal gradient with the fixed step ``1/L``."""
    cfg = cfg or SolverConfig()
    iters = cfg.max_iters if iters is None else iters
    t = 1.0 / p.lipschitz
    x = _start(p, x0)
    rec = _Recorder("ista", p, reference)
    _, f, g = _residual_and_grad(p, x)
    rec.add(0, x, f, step=t)
    for k in range(1, iters + 1):
        x_new = soft_threshold(x - t * g, p.lam * t)
        moved = x_new - x
        x = x_new
        _, f, g = _residual_and_grad(p, x)
        rec.add(k, x, f, step=t, gamma2=1.0)
        if _small_step(cfg, moved):
            rec.trace.status = "converged"
            break
    return x, rec.trace


def fista_backtracking(p: LassoProblem, x0, cfg: SolverConfig | None = None, iters: int | None = None,
                       reference=None) -> tuple[np.ndarray, SolverTrace]:
    """FISTA with backtracking on the local Lipschitz estimate (Beck & Teboulle)."""
    cfg = cfg or SolverConfig()
    iters = cfg.max_iters if iters is None else iters
    lip = cfg.fista_l0 if cfg.fista_l0 is not None else p.lipschitz
    x = _start(p, x0)
    y = x.copy()
    s = 1.0
    rec = _Recorder("fista", p, reference)
    _, f_x, _ = _residual_and_grad(p, x)
    rec.add(0, x, f_x, step=1.0 / lip)
    for k in range(1, iters + 1):
        _, _, g_y = _residual_and_grad(p, y)
        backtracks = 0
        while True:
            x_new = soft_threshold(y - g_y / lip, p.lam / lip)
            d = x_new - y
            # f(x_new) - f(y) - grad^T d equals 0.5*||A d||^2 exactly, so test that
            # instead of subtracting objective values
            ad = p.model.apply(d)
            curv = float(np.vdot(ad, ad).real)
            if curv <= lip * float(d @ d) * (1.0 + _ROUNDOFF) or backtracks >= cfg.max_backtracks:
                break
            lip /= cfg.eta
            backtracks += 1
        r_new = p.model.apply(x_new) - p.y
        f_new = 0.5 * float(np.vdot(r_new, r_new).real)
        s_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * s * s))
        moved = x_new - x
        y = x_new + ((s - 1.0) / s_new) * moved
        x, s = x_new, s_new
        rec.add(k, x, f_new, step=1.0 / lip, backtracks=backtracks)
        if _small_step(cfg, moved):
            rec.trace.status = "converged"
            break
    return x, rec.trace


def run_to_convergence(p: LassoProblem, cfg: SolverConfig | None = None, iters: int = 1200, x0=None) -> np.ndarray:
    """Reference solution by a long FISTA run (1200 iterations by default)."""
    x0 = p.model.adjoint(p.y) if x0 is None else x0
    x, _ = fista_backtracking(p, x0, cfg or SolverConfig(), iters=iters)
    return x


def _scaled_step(p: LassoProblem, x: np.ndarray, g: np.ndarray, steps) -> np.ndarray:
    """``T_{lam*steps}(x - steps*g)`` with scalar or per-element steps."""
    return soft_threshold(x - steps * g, p.lam * steps)


def sgp_generic(p: LassoProblem, x0, cfg: SolverConfig | None, chooser, iters: int | None = None,
                reference=None) -> tuple[np.ndarray, SolverTrace]:
    """Scaled gradient projection with Armijo backtracking.

    ``chooser(k, x, grad)`` returns ``(t_k, D_k)`` where ``D_k`` is a
    :class:`DiagScaling` or ``None`` for the identity. Out-of-range choices
    are clamped and noted in the trace.
    """
    cfg = cfg or SolverConfig()
    iters = cfg.max_iters if iters is None else iters
    t_min, t_max = cfg.step_bounds(p.lipschitz)
    x = _start(p, x0)
    rec = _Recorder("sgp", p, reference)
    r, f, g = _residual_and_grad(p, x)
    rec.add(0, x, f)
    for k in range(1, iters + 1):
        t, scaling = chooser(k - 1, x, g)
        notes = []
        if not t_min <= t <= t_max:
            notes.append(f"stepsize {t:g} clamped to [{t_min:g}, {t_max:g}]")
            t = float(np.clip(t, t_min, t_max))
        if scaling is None:
            steps = t
        else:
            vals = scaling.values
            if np.any(vals < 1.0 / cfg.delta) or np.any(vals > cfg.delta):
                notes.append(f"scaling clamped to [{1.0 / cfg.delta:g}, {cfg.delta:g}]")
                scaling = DiagScaling.clamped(vals, scaling.groups, cfg.delta, scaling.n)
            steps = t * scaling.expand()
        target = _scaled_step(p, x, g, steps)
        z = target - x
        if not np.any(z):
            rec.trace.status = "converged"
            break
        search = _LineSearch(p, x, r, z, cfg.beta)
        gamma, backtracks = 1.0, 0
        accepted = search(gamma)
        while not accepted and backtracks < cfg.max_backtracks:
            gamma *= cfg.eta
            backtracks += 1
            accepted = search(gamma)
        if not accepted:
            rec.trace.status = "stalled"
            rec.add(k, x, f, step=float(np.mean(steps)), gamma2=gamma, backtracks=backtracks,
                    note="; ".join(notes + ["line search exhausted"]))
            break
        x = target if gamma == 1.0 else x + gamma * z
        r, f, g = _residual_and_grad(p, x)
        rec.add(k, x, f, step=float(np.mean(steps)), gamma2=gamma, backtracks=backtracks, note="; ".join(notes))
        if _small_step(cfg, gamma * z):
            rec.trace.status = "converged"
            break
    return x, rec.trace


def _predicted_steps(p: LassoProblem, prediction) -> np.ndarray | float:
    """Per-coefficient (or scalar) steps ``t*D`` for a scalar or grouped prediction."""
    if isinstance(prediction, DiagScaling):
        steps = p.step * prediction.expand()
        if not np.all(np.isfinite(steps)) or np.any(steps <= 0):
            raise ValueError("predicted scaling is not finite and positive")
        return steps
    t = float(prediction)
    if not math.isfinite(t) or t <= 0:
        raise ValueError(f"predicted stepsize {t!r} is not finite and positive")
    return t


def drs_direction(p: LassoProblem, x: np.ndarray, predictor: Predictor, state: RelaxState,
                  cfg: SolverConfig | None = None, grad: np.ndarray | None = None,
                  notes: list | None = None) -> tuple[SearchDirection, RelaxState]:
    """Direction relaxation: mix the learned direction with the ``1/L`` prox-gradient one.

    A failing predictor is treated like a rejected learned direction.
    """
    cfg = cfg or SolverConfig()
    if grad is None:
        _, grad = fidelity_and_gradient(p, x)
    t_l = p.step
    ista_point = soft_threshold(x - t_l * grad, p.lam * t_l)
    z2 = ista_point - x
    conservative = SearchDirection(z2, Provenance.CONSERVATIVE_ONLY, t_l, ista_point)
    if not state.use_cnn:
        return conservative, state
    try:
        steps = _predicted_steps(p, predictor(p, x, grad))
    except Exception as exc:  # noqa: BLE001 - any predictor failure falls back
        if notes is not None:
            notes.append(f"predictor failed ({exc}); using conservative direction")
        return conservative, replace(state, use_cnn=False)
    x_tilde = _scaled_step(p, x, grad, steps)
    _, grad_tilde = fidelity_and_gradient(p, x_tilde)
    two_step = soft_threshold(x_tilde - t_l * grad_tilde, p.lam * t_l)
    z1 = two_step - x
    g1 = state.gamma1
    if g1 * np.linalg.norm(z1) > cfg.alpha * (1.0 - g1) * np.linalg.norm(z2):
        if g1 == 1.0:
            return SearchDirection(z1, Provenance.LEARNED_MIXED, float(np.mean(steps)), two_step), state
        mixed = g1 * z1 + (1.0 - g1) * z2
        return SearchDirection(mixed, Provenance.LEARNED_MIXED, float(np.mean(steps))), state
    return conservative, replace(state, use_cnn=False)


def sgp_learned(p: LassoProblem, x0, predictor: Predictor, cfg: SolverConfig | None = None,
                iters: int | None = None, reference=None, name: str = "sgp-learned") -> tuple[np.ndarray, SolverTrace]:
    """SGP whose search direction comes from :func:`drs_direction`.

    ``gamma1`` persists across iterations and shrinks by ``eta1`` on every
    backtrack; ``gamma2`` restarts at 1. If backtracking on a learned
    direction underflows the step is rejected, which collapses ``gamma1`` and
    hands the next iteration to the conservative direction. Underflow on the
    conservative direction ends the run as stalled.
    """
    cfg = cfg or SolverConfig()
    iters = cfg.max_iters if iters is None else iters
    x = _start(p, x0)
    rec = _Recorder(name, p, reference)
    state = RelaxState()
    r, f, g = _residual_and_grad(p, x)
    rec.add(0, x, f, gamma1=state.gamma1, gamma2=state.gamma2, use_cnn=state.use_cnn)
    for k in range(1, iters + 1):
        notes: list[str] = []
        direction, state = drs_direction(p, x, predictor, state, cfg, grad=g, notes=notes)
        z = direction.z
        if not np.any(z):
            rec.trace.status = "converged"
            break
        search = _LineSearch(p, x, r, z, cfg.beta)
        gamma1, gamma2, backtracks = state.gamma1, 1.0, 0
        accepted = search(gamma2)
        while not accepted and gamma2 >= GAMMA_UNDERFLOW and backtracks < cfg.max_backtracks:
            gamma1 *= cfg.eta1
            gamma2 *= cfg.eta2
            backtracks += 1
            accepted = search(gamma2)
        underflow = not accepted
        if underflow and direction.provenance is Provenance.CONSERVATIVE_ONLY:
            state = RelaxState(gamma1, gamma2, state.use_cnn)
            rec.trace.status = "stalled"
            rec.add(k, x, f, gamma1=gamma1, gamma2=gamma2, use_cnn=state.use_cnn, backtracks=backtracks,
                    note="; ".join(notes + ["line search underflow on conservative direction"]))
            break
        if underflow:
            notes.append("learned direction rejected after line-search underflow")
        else:
            x = direction.point(x, gamma2)
        state = RelaxState(gamma1, gamma2, state.use_cnn)
        r, f, g = _residual_and_grad(p, x)
        rec.add(k, x, f, step=direction.step, gamma1=gamma1, gamma2=gamma2 if not underflow else 0.0,
                use_cnn=state.use_cnn, backtracks=backtracks, note="; ".join(notes))
        if not underflow and _small_step(cfg, gamma2 * z):
            rec.trace.status = "converged"
            break
    return x, rec.trace
