"""Degradation operators acting on wavelet coefficients.

Every model is ``A = M o W^T``: synthesize the image from coefficients, then
apply a measurement operator (pixel selection, subsampled unitary DFT, or a
circular Gaussian blur). All are built with ``||A||_2 <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .wavelet import Wavelet, WaveletSpec, get_wavelet

__all__ = [
    "ModelError",
    "SamplingPattern",
    "ForwardModel",
    "MatrixModel",
    "make_inpainting",
    "make_partial_fourier",
    "make_gaussian_blur",
    "apply",
    "adjoint",
    "synthesize_measurement",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SamplingPattern:
    indices: np.ndarray
    rate: float
    seed: int | None
    shape: tuple[int, int]

    @property
    def count(self) -> int:
        return int(self.indices.size)


def _check_rate(rate: float) -> None:
    if not (0.0 < rate <= 1.0):
        raise ModelError(f"sampling rate must lie in (0, 1], got {rate}")


def _sample_count(rate: float, n: int) -> int:
    return max(1, int(round(rate * n)))


class ForwardModel:
    """Linear operator from coefficient vectors to measurements.

    Subclasses implement ``_measure`` (image -> measurement) and
    ``_backproject`` (measurement -> complex or real image).
    """

    kind: str = "abstract"
    is_complex: bool = False
    spectral_bound: float = 1.0

    def __init__(self, shape: tuple[int, int], wavelet: WaveletSpec):
        self.shape = (int(shape[0]), int(shape[1]))
        self.wavelet = wavelet
        self.transform: Wavelet = get_wavelet(wavelet, self.shape)
        self.n = self.shape[0] * self.shape[1]

    @property
    def m(self) -> int:
        raise NotImplementedError

    def _coeffs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ModelError(f"coefficient vector of shape {x.shape}, expected ({self.n},)")
        return x

    def _meas(self, m) -> np.ndarray:
        m = np.asarray(m)
        if m.shape != (self.m,):
            raise ModelError(f"measurement of shape {m.shape}, expected ({self.m},)")
        return m

    def apply(self, x) -> np.ndarray:
        return self._measure(self.transform.inverse(self._coeffs(x)))

    def adjoint(self, m) -> np.ndarray:
        img = self._backproject(self._meas(m))
        return self.transform.forward(img.real if np.iscomplexobj(img) else img)

    def adjoint_imag(self, m) -> np.ndarray:
        """Wavelet coefficients of the imaginary part of the back-projection (zero for real models)."""
        img = self._backproject(self._meas(m))
        if not np.iscomplexobj(img):
            return np.zeros(self.n)
        return self.transform.forward(img.imag)

    def measure_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        if image.shape != self.shape:
            raise ModelError(f"image shape {image.shape} does not match model shape {self.shape}")
        return self._measure(image)

    def describe(self) -> dict:
        return {"kind": self.kind, "shape": self.shape}

    def _measure(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _backproject(self, m: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Inpainting(ForwardModel):
    kind = "inpainting"

    def __init__(self, shape, wavelet, pattern: SamplingPattern):
        super().__init__(shape, wavelet)
        self.pattern = pattern

    @property
    def m(self) -> int:
        return self.pattern.count

    def _measure(self, image):
        return image.ravel()[self.pattern.indices]

    def _backproject(self, m):
        img = np.zeros(self.n)
        img[self.pattern.indices] = m
        return img.reshape(self.shape)

    def describe(self):
        return {"kind": self.kind, "shape": self.shape, "rate": self.pattern.rate, "seed": self.pattern.seed}


class PartialFourier(ForwardModel):
    kind = "partial_fourier"
    is_complex = True

    def __init__(self, shape, wavelet, pattern: SamplingPattern):
        super().__init__(shape, wavelet)
        self.pattern = pattern

    @property
    def m(self) -> int:
        return self.pattern.count

    def _measure(self, image):
        return np.fft.fft2(image, norm="ortho").ravel()[self.pattern.indices]

    def _backproject(self, m):
        spec = np.zeros(self.n, dtype=complex)
        spec[self.pattern.indices] = m
        return np.fft.ifft2(spec.reshape(self.shape), norm="ortho")

    def describe(self):
        return {"kind": self.kind, "shape": self.shape, "rate": self.pattern.rate, "seed": self.pattern.seed}


def gaussian_kernel(shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Normalized Gaussian centred at pixel (0, 0) with circular distances."""
    h, w = shape
    dr = np.minimum(np.arange(h), h - np.arange(h)).astype(float)
    dc = np.minimum(np.arange(w), w - np.arange(w)).astype(float)
    ker = np.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2.0 * sigma**2))
    return ker / ker.sum()


class GaussianBlur(ForwardModel):
    kind = "gaussian_blur"

    def __init__(self, shape, wavelet, sigma: float):
        super().__init__(shape, wavelet)
        self.sigma = float(sigma)
        # symmetric kernel -> real transfer function, so the blur is self-adjoint
        self.transfer = np.fft.fft2(gaussian_kernel(self.shape, self.sigma)).real

    @property
    def m(self) -> int:
        return self.n

    def _measure(self, image):
        return np.fft.ifft2(np.fft.fft2(image) * self.transfer).real.ravel()

    def _backproject(self, m):
        return np.fft.ifft2(np.fft.fft2(m.reshape(self.shape)) * self.transfer).real

    def describe(self):
        return {"kind": self.kind, "shape": self.shape, "sigma": self.sigma}


class MatrixModel:
    """Explicit dense operator; used for toy problems and as a test oracle."""

    kind = "matrix"

    def __init__(self, matrix: np.ndarray, spectral_bound: float | None = None):
        self.matrix = np.atleast_2d(np.asarray(matrix))
        self.is_complex = np.iscomplexobj(self.matrix)
        self.m, self.n = self.matrix.shape
        if spectral_bound is None:
            spectral_bound = float(np.linalg.norm(self.matrix, 2) ** 2)
        self.spectral_bound = spectral_bound

    def apply(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float)

    def adjoint(self, m) -> np.ndarray:
        out = self.matrix.conj().T @ np.asarray(m)
        return out.real if np.iscomplexobj(out) else out

    def adjoint_imag(self, m) -> np.ndarray:
        out = self.matrix.conj().T @ np.asarray(m)
        return out.imag if np.iscomplexobj(out) else np.zeros(self.n)

    def describe(self) -> dict:
        return {"kind": self.kind, "shape": self.matrix.shape}


def make_inpainting(shape, rate: float, seed: int | None, wavelet: WaveletSpec | None = None) -> Inpainting:
    _check_rate(rate)
    wavelet = wavelet or WaveletSpec()
    n = int(shape[0]) * int(shape[1])
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=_sample_count(rate, n), replace=False))
    return Inpainting(shape, wavelet, SamplingPattern(idx, float(rate), seed, tuple(shape)))


def make_partial_fourier(
    shape, rate: float, seed: int | None, noise_sigma: float = 0.0, wavelet: WaveletSpec | None = None
) -> PartialFourier:
    """Uniformly random frequency subset that always keeps the DC term.

    ``noise_sigma`` is validated here but only used at measurement synthesis.
    """
    _check_rate(rate)
    if noise_sigma < 0:
        raise ModelError("noise_sigma must be nonnegative")
    wavelet = wavelet or WaveletSpec()
    n = int(shape[0]) * int(shape[1])
    rng = np.random.default_rng(seed)
    count = _sample_count(rate, n)
    rest = rng.choice(n - 1, size=count - 1, replace=False) + 1
    idx = np.sort(np.concatenate([[0], rest]))
    return PartialFourier(shape, wavelet, SamplingPattern(idx, float(rate), seed, tuple(shape)))


def make_gaussian_blur(shape, sigma: float, wavelet: WaveletSpec | None = None) -> GaussianBlur:
    if not sigma > 0:
        raise ModelError(f"blur sigma must be positive, got {sigma}")
    return GaussianBlur(shape, wavelet or WaveletSpec(), sigma)


def apply(model, x) -> np.ndarray:
    return model.apply(x)


def adjoint(model, m) -> np.ndarray:
    return model.adjoint(m)


def synthesize_measurement(
    model: ForwardModel, image: np.ndarray, noise_sigma: float = 0.0, seed: int | None = None, image_peak: float = 1.0
) -> np.ndarray:
    """Noisy measurement ``A(W img) + e``.

    ``noise_sigma`` is on an 8-bit intensity scale; ``image_peak`` is the
    stored intensity that corresponds to 255, so the added standard deviation
    is ``noise_sigma * image_peak / 255``. Complex measurements receive
    independent noise on real and imaginary parts.
    """
    if noise_sigma < 0:
        raise ModelError("noise_sigma must be nonnegative")
    image = np.asarray(image, dtype=float)
    if image.shape != model.shape:
        raise ModelError(f"image shape {image.shape} does not match model shape {model.shape}")
    y = model.apply(model.transform.forward(image))
    if noise_sigma == 0:
        return y
    std = noise_sigma * image_peak / 255.0
    rng = np.random.default_rng(seed)
    if np.iscomplexobj(y):
        return y + std * (rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size))
    return y + std * rng.standard_normal(y.size)
