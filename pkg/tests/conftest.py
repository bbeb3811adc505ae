"""Shared fixtures and independent oracles."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from proxaccel.datasets import synthetic_images
from proxaccel.objective import LassoProblem
from proxaccel.problems import ProblemConfig, derive_seed, make_problem


def pywt_coeffs(image: np.ndarray, family: str, levels: int) -> np.ndarray:
    """Flat coefficients from PyWavelets in coarsest-first, (H, V, D) per level order."""
    pywt = pytest.importorskip("pywt")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = pywt.wavedec2(image, family, mode="periodization", level=levels)
    return np.concatenate([c[0].ravel()] + [b.ravel() for t in c[1:] for b in t])


def pywt_synthesis_matrix(family: str, levels: int, shape: tuple[int, int]) -> np.ndarray:
    """Dense inverse transform (coefficients -> flattened image) built column by column with PyWavelets."""
    pywt = pytest.importorskip("pywt")
    h, w = shape
    n = h * w
    sizes = [(h >> levels, w >> levels)] + [(h >> lev, w >> lev) for lev in range(levels, 0, -1)]
    cols = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        pos = 0
        ah, aw = sizes[0]
        coeffs = [e[pos:pos + ah * aw].reshape(ah, aw)]
        pos += ah * aw
        for bh, bw in sizes[1:]:
            trip = []
            for _ in range(3):
                trip.append(e[pos:pos + bh * bw].reshape(bh, bw))
                pos += bh * bw
            coeffs.append(tuple(trip))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cols[:, i] = pywt.waverec2(coeffs, family, mode="periodization").ravel()
    return cols


def dft_matrix(shape: tuple[int, int]) -> np.ndarray:
    """Unitary 2-D DFT on row-major flattened images, from the exponential formula."""
    def one(n):
        k = np.arange(n)
        return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)

    return np.kron(one(shape[0]), one(shape[1]))


def circulant_blur_matrix(shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Circular Gaussian convolution written out entry by entry."""
    h, w = shape
    ker = np.zeros(shape)
    for r in range(h):
        for c in range(w):
            dr, dc = min(r, h - r), min(c, w - c)
            ker[r, c] = np.exp(-(dr * dr + dc * dc) / (2 * sigma * sigma))
    ker /= ker.sum()
    mat = np.zeros((h * w, h * w))
    for r in range(h):
        for c in range(w):
            for r2 in range(h):
                for c2 in range(w):
                    mat[r * w + c, r2 * w + c2] = ker[(r - r2) % h, (c - c2) % w]
    return mat


def random_problems(count: int, seed: int, shape=(32, 32), **cfg) -> list[tuple[LassoProblem, np.ndarray]]:
    pcfg = ProblemConfig(**cfg)
    imgs = synthetic_images(count, seed, shape)
    return [make_problem(img, pcfg, derive_seed(seed, i)) for i, img in enumerate(imgs)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> [(check name, passed, detail)], filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}
ACCEPTANCE_TITLES = {
    1: "correctness oracles",
    2: "solver semantics",
    3: "acceleration at desk scale",
    4: "robustness direction",
    5: "pipeline determinism",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[crit]
        failed = [f"{name} ({detail})" if detail else name for name, ok, detail in checks if not ok]
        verdict = "FAIL" if failed else "PASS"
        line = f"criterion {crit} {verdict}  {ACCEPTANCE_TITLES[crit]}: {len(checks) - len(failed)}/{len(checks)} checks"
        if failed:
            line += "; failed: " + "; ".join(failed)
        terminalreporter.write_line(line)
