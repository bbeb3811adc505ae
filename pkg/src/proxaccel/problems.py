"""Building LASSO problems from ground-truth images."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forward_models import make_gaussian_blur, make_inpainting, make_partial_fourier, synthesize_measurement
from .objective import LassoProblem, estimate_lipschitz
from .wavelet import WaveletSpec

__all__ = ["ProblemConfig", "make_problem", "initial_point", "derive_seed", "parallel_map", "thread_count"]

KINDS = ("inpainting", "partial_fourier", "gaussian_blur")


@dataclass(frozen=True)
class ProblemConfig:
    """Degradation and regularization settings.

    Images are handled in [0, 1] and multiplied by ``intensity_scale`` before
    the problem is posed, so ``lam`` and ``noise_sigma`` (8-bit units) act
    relative to that peak intensity.
    """

    kind: str = "inpainting"
    rate: float = 0.5
    blur_sigma: float = 2.0
    noise_sigma: float = 0.0
    lam: float = 0.1
    intensity_scale: float = 8.0
    wavelet: WaveletSpec = field(default_factory=WaveletSpec)
    init: str = "adjoint"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be positive")
        if self.init not in ("adjoint", "zero"):
            raise ValueError("init must be 'adjoint' or 'zero'")

    @property
    def in_channels(self) -> int:
        return 4 if self.kind == "partial_fourier" else 2


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def make_problem(image: np.ndarray, cfg: ProblemConfig, seed: int) -> tuple[LassoProblem, np.ndarray]:
    """Problem for one [0, 1] image; returns it with the ground-truth coefficients."""
    img = np.asarray(image, dtype=float) * cfg.intensity_scale
    shape = img.shape
    if cfg.kind == "inpainting":
        model = make_inpainting(shape, cfg.rate, derive_seed(seed, 1), cfg.wavelet)
    elif cfg.kind == "partial_fourier":
        model = make_partial_fourier(shape, cfg.rate, derive_seed(seed, 1), cfg.noise_sigma, cfg.wavelet)
    else:
        model = make_gaussian_blur(shape, cfg.blur_sigma, cfg.wavelet)
    y = synthesize_measurement(model, img, cfg.noise_sigma, derive_seed(seed, 2), image_peak=cfg.intensity_scale)
    p = LassoProblem(model, y, cfg.lam, estimate_lipschitz(model, seed=derive_seed(seed, 3)),
                     meta={"seed": seed, **model.describe()})
    return p, model.transform.forward(img)


def initial_point(p: LassoProblem, cfg: ProblemConfig) -> np.ndarray:
    if cfg.init == "zero":
        return np.zeros(p.n)
    return p.model.adjoint(p.y)


def thread_count() -> int:
    env = os.environ.get("PROXACCEL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    """Ordered map, threaded up to ``PROXACCEL_THREADS`` workers."""
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
