"""Greedy, stage-wise training of the stepsize predictor.

A corpus holds N problems, their reference solutions and one iterate bank
per stage. Bank 0 holds the starting points; bank ``k+1`` is bank ``k``
advanced by one predicted step followed by one ``1/L`` step. Stage ``k``
trains on the pooled banks ``0..k`` with the reference solutions as labels.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objective import LassoProblem, fidelity_and_gradient, objective, soft_threshold
from .problems import ProblemConfig, derive_seed, initial_point, make_problem, parallel_map
from .solvers import SolverConfig, fista_backtracking
from .stepnet import AdamConfig, AdamState, PredictorParams, StepNet, batch_loss_and_grad, features, train_step

__all__ = [
    "Bank",
    "TrainCorpus",
    "TrainConfig",
    "StageLog",
    "CorpusError",
    "build_corpus",
    "make_bank",
    "advance_two_step",
    "train_iteration",
    "train_multi",
    "pooled_loss",
    "bank_loss",
    "prox_residual",
    "save_bank",
    "load_bank",
    "mean_distance",
    "corpus_objectives",
]

log = logging.getLogger(__name__)

REFERENCE_ITERS = 1200
CONVERGENCE_TOL = 1e-8
BANK_MAGIC = b"PXB1"


class CorpusError(RuntimeError):
    pass


@dataclass
class Bank:
    """Iterates of every corpus problem at one stage, with gradients and network inputs."""

    k: int
    x: np.ndarray
    grad: np.ndarray
    feats: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class TrainCorpus:
    config: ProblemConfig
    seed: int
    problems: list[LassoProblem]
    images: list[np.ndarray]
    solutions: np.ndarray
    banks: list[Bank] = field(default_factory=list)
    spill_dir: Path | None = None

    @property
    def size(self) -> int:
        return len(self.problems)

    @property
    def lam(self) -> np.ndarray:
        return np.array([p.lam for p in self.problems])

    @property
    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.problems])

    def bank(self, k: int) -> Bank:
        b = self.banks[k]
        if b is None:
            b = load_bank(self.spill_dir / f"bank_{k:03d}.pxb", k)
        return b

    def add_bank(self, bank: Bank) -> None:
        if bank.k != len(self.banks):
            raise CorpusError(f"bank {bank.k} added out of order")
        if self.spill_dir is not None:
            save_bank(bank, self.spill_dir / f"bank_{bank.k:03d}.pxb")
            self.banks.append(None)
        else:
            self.banks.append(bank)

    def pooled(self, k: int) -> dict:
        """Training arrays for banks ``0..k`` stacked in bank order (labels repeat per bank)."""
        bs = [self.bank(i) for i in range(k + 1)]
        reps = k + 1
        return {
            "feats": np.concatenate([b.feats for b in bs]),
            "x": np.concatenate([b.x for b in bs]),
            "grad": np.concatenate([b.grad for b in bs]),
            "x_star": np.tile(self.solutions, (reps, 1)),
            "lam": np.tile(self.lam, reps),
            "step": np.tile(self.steps, reps),
        }

    def manifest(self) -> str:
        c = self.config
        lines = [
            f"seed = {self.seed}",
            f"count = {self.size}",
            f"kind = {c.kind}",
            f"rate = {c.rate!r}",
            f"blur_sigma = {c.blur_sigma!r}",
            f"noise_sigma = {c.noise_sigma!r}",
            f"lambda = {c.lam!r}",
            f"intensity_scale = {c.intensity_scale!r}",
            f"wavelet = {c.wavelet.family.value}",
            f"levels = {c.wavelet.levels}",
            f"boundary = {c.wavelet.boundary}",
            f"shape = {self.images[0].shape[0]}x{self.images[0].shape[1]}",
            f"banks = {len(self.banks)}",
        ]
        lines += [f"bank.{k} = bank_{k:03d}.pxb" for k in range(len(self.banks))]
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        """Write the manifest and every bank to ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k in range(len(self.banks)):
            save_bank(self.bank(k), d / f"bank_{k:03d}.pxb")
        path = d / "corpus.manifest"
        path.write_text(self.manifest())
        return path

    def digest(self) -> str:
        h = hashlib.sha256(self.manifest().encode())
        h.update(np.ascontiguousarray(self.solutions).tobytes())
        for k in range(len(self.banks)):
            h.update(np.ascontiguousarray(self.bank(k).x).tobytes())
        return h.hexdigest()


def save_bank(bank: Bank, path) -> None:
    """Bank file: magic, stage index, then x/grad/feats as float64 tensors, CRC32 trailer."""
    buf = bytearray(BANK_MAGIC) + struct.pack("<I", bank.k) + struct.pack("<I", 3)
    for t in (bank.x, bank.grad, bank.feats):
        buf += struct.pack("<I", t.ndim) + struct.pack("<%dI" % t.ndim, *t.shape)
        buf += np.ascontiguousarray(t, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_bank(path, k: int | None = None) -> Bank:
    data = Path(path).read_bytes()
    if data[:4] != BANK_MAGIC:
        raise CorpusError(f"{path}: not a bank file")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorpusError(f"{path}: checksum mismatch")
    stage, count = struct.unpack_from("<II", data, 4)
    if k is not None and stage != k:
        raise CorpusError(f"{path}: holds bank {stage}, expected {k}")
    pos = 12
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from("<%dI" % ndim, data, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape))
        tensors.append(np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(float))
        pos += 8 * size
    return Bank(stage, *tensors)


def prox_residual(p: LassoProblem, x: np.ndarray) -> float:
    """``||x - T_{lam/L}(x - grad/L)|| / ||x||``; zero exactly at a minimizer."""
    _, g = fidelity_and_gradient(p, x)
    moved = x - soft_threshold(x - p.step * g, p.lam * p.step)
    return float(np.linalg.norm(moved) / max(np.linalg.norm(x), 1e-300))


def _solve_reference(p: LassoProblem, x0: np.ndarray, iters: int) -> tuple[np.ndarray, float]:
    x, trace = fista_backtracking(p, x0, SolverConfig(), iters=iters)
    obj = trace.column("objective")
    change = abs(obj[-1] - obj[-2]) / max(1.0, abs(obj[-1]))
    return x, change


def build_corpus(images: list[np.ndarray], cfg: ProblemConfig, seed: int, in_channels: int | None = None,
                 reference_iters: int = REFERENCE_ITERS, max_attempts: int = 5,
                 spill_dir=None) -> TrainCorpus:
    """Pose one problem per image with its own sampling pattern and solve it to convergence.

    A problem whose reference solve still changes the objective by more than
    1e-8 (relative) at its final iteration is discarded and re-posed with a
    fresh pattern.
    """
    in_channels = cfg.in_channels if in_channels is None else in_channels

    def one(item):
        i, img = item
        for attempt in range(max_attempts):
            p, _ = make_problem(img, cfg, derive_seed(seed, i, attempt))
            x0 = initial_point(p, cfg)
            x_star, change = _solve_reference(p, x0, reference_iters)
            if change <= CONVERGENCE_TOL:
                return p, x_star
            log.info("problem %d attempt %d not converged (change %.3g), resampling", i, attempt, change)
        raise CorpusError(f"problem {i}: reference solve did not converge in {max_attempts} attempts")

    solved = parallel_map(one, enumerate(images))
    problems = [p for p, _ in solved]
    corpus = TrainCorpus(cfg, seed, problems, [np.asarray(im, float) for im in images],
                         np.stack([x for _, x in solved]),
                         spill_dir=Path(spill_dir) if spill_dir is not None else None)
    if corpus.spill_dir is not None:
        corpus.spill_dir.mkdir(parents=True, exist_ok=True)
    corpus.add_bank(make_bank(corpus, 0, np.stack([initial_point(p, cfg) for p in problems]), in_channels))
    return corpus


def make_bank(corpus: TrainCorpus, k: int, xs: np.ndarray, in_channels: int = 2) -> Bank:
    grads, feats = [], []
    for p, x in zip(corpus.problems, xs):
        r = p.model.apply(x) - p.y
        g = p.model.adjoint(r)
        gi = p.model.adjoint_imag(r) if in_channels == 4 else None
        grads.append(g)
        feats.append(features(x, g, corpus.config.wavelet.levels, p.model.shape, gi, in_channels))
    return Bank(k, np.array(xs, dtype=float), np.stack(grads), np.stack(feats))


def advance_two_step(predictor, p: LassoProblem, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted step then a ``1/L`` step; returns ``(x_tilde, x_next)``.

    ``predictor`` is :class:`PredictorParams` or a callable returning a
    stepsize or :class:`DiagScaling` like the solvers expect.
    """
    if isinstance(predictor, PredictorParams):
        predictor = StepNet(predictor)
    x = np.asarray(x, dtype=float)
    _, g = fidelity_and_gradient(p, x)
    pred = predictor(p, x, g)
    steps = p.step * pred.expand() if hasattr(pred, "expand") else float(pred)
    x_tilde = soft_threshold(x - steps * g, p.lam * steps)
    _, g_tilde = fidelity_and_gradient(p, x_tilde)
    x_next = soft_threshold(x_tilde - p.step * g_tilde, p.lam * p.step)
    return x_tilde, x_next


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    last_stage: int = 20
    batch_size: int = 16
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    patience: int = 50


@dataclass(frozen=True)
class StageLog:
    stage: int
    epoch: int
    samples: int
    mean_loss: float


def bank_loss(params: PredictorParams, corpus: TrainCorpus, k: int) -> float:
    """Mean one-step loss over bank ``k``."""
    b = corpus.bank(k)
    loss, _ = batch_loss_and_grad(params, b.feats, b.x, b.grad, corpus.solutions, corpus.lam, corpus.steps,
                                  need_grad=False)
    return loss


def pooled_loss(params: PredictorParams, corpus: TrainCorpus, k: int, reduction: str = "sum") -> float:
    """Loss over banks ``0..k`` pooled into one set; ``"sum"`` gives the total over all samples."""
    data = corpus.pooled(k)
    loss, _ = batch_loss_and_grad(params, data["feats"], data["x"], data["grad"], data["x_star"], data["lam"],
                                  data["step"], need_grad=False)
    count = data["x"].shape[0]
    return loss * count if reduction == "sum" else loss


def _run_epochs(params: PredictorParams, data: dict, stage: int, cfg: TrainConfig, state: AdamState,
                logs: list[StageLog]) -> PredictorParams:
    count = data["x"].shape[0]
    rng = np.random.default_rng(derive_seed(cfg.seed, stage))
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        total = 0.0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = {key: val[idx] for key, val in data.items()}
            params, loss = train_step(params, batch, state, cfg.adam, cfg.patience)
            total += loss * idx.size
        logs.append(StageLog(stage, epoch, count, total / count))
    return params


def _advance_bank(params: PredictorParams, corpus: TrainCorpus, k: int) -> None:
    net = StepNet(params)
    prev = corpus.bank(k)
    xs = np.stack(parallel_map(lambda item: advance_two_step(net, item[0], item[1])[1],
                               zip(corpus.problems, prev.x)))
    corpus.add_bank(make_bank(corpus, k + 1, xs, params.arch.in_channels))


def train_iteration(params: PredictorParams, corpus: TrainCorpus, k: int, cfg: TrainConfig = TrainConfig(),
                    state: AdamState | None = None, logs: list[StageLog] | None = None,
                    pooled: bool = False) -> PredictorParams:
    """Train on bank ``k`` (or banks ``0..k`` when ``pooled``), then append bank ``k+1``."""
    if len(corpus.banks) != k + 1:
        raise CorpusError(f"corpus has {len(corpus.banks)} banks, stage {k} needs exactly {k + 1}")
    state = state if state is not None else AdamState.zeros(params)
    logs = logs if logs is not None else []
    if pooled:
        data = corpus.pooled(k)
    else:
        b = corpus.bank(k)
        data = {"feats": b.feats, "x": b.x, "grad": b.grad, "x_star": corpus.solutions,
                "lam": corpus.lam, "step": corpus.steps}
    params = _run_epochs(params, data, k, cfg, state, logs)
    _advance_bank(params, corpus, k)
    return params


def train_multi(params: PredictorParams, corpus: TrainCorpus, cfg: TrainConfig = TrainConfig(),
                logs: list[StageLog] | None = None, progress=None) -> PredictorParams:
    """Stages ``k = 0..cfg.last_stage``, each on the pooled banks ``0..k``.

    ``last_stage = 0`` is a single :func:`train_iteration` at ``k = 0``. One
    optimizer state is carried across stages.
    """
    if cfg.last_stage < 0:
        raise ValueError("last_stage must be non-negative")
    state = AdamState.zeros(params)
    logs = logs if logs is not None else []
    for k in range(len(corpus.banks) - 1, cfg.last_stage + 1):
        params = train_iteration(params, corpus, k, cfg, state, logs, pooled=True)
        if progress is not None:
            progress(k, logs[-1] if logs else None)
    return params


def mean_distance(corpus: TrainCorpus, k: int) -> float:
    return float(np.mean(np.linalg.norm(corpus.bank(k).x - corpus.solutions, axis=1)))


def corpus_objectives(corpus: TrainCorpus, k: int) -> np.ndarray:
    return np.array([objective(p, x) for p, x in zip(corpus.problems, corpus.bank(k).x)])
