"""Orthonormal 2-D discrete wavelet transform with periodic boundaries.

The transform is built from dense per-level analysis matrices, which keeps it
exactly orthogonal (up to the filter taps' rounding) and makes the adjoint the
plain transpose. Coefficients are stored coarsest first, one contiguous block
per subband, each block flattened row-major.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Family",
    "WaveletSpec",
    "Subband",
    "CoeffVector",
    "Wavelet",
    "WaveletError",
    "dwt_forward",
    "dwt_inverse",
    "subband_groups",
    "filter_bank",
    "get_wavelet",
    "layout",
    "mosaic_order",
]


class WaveletError(ValueError):
    """Invalid image, coefficient layout or wavelet parameters."""


class Family(str, enum.Enum):
    HAAR = "haar"
    SYMLET4 = "sym4"


# Decomposition low-pass taps.
_LOWPASS = {
    Family.HAAR: np.array([0.7071067811865476, 0.7071067811865476]),
    Family.SYMLET4: np.array(
        [
            -0.07576571478927333,
            -0.02963552764599851,
            0.49761866763201545,
            0.8037387518059161,
            0.29785779560527736,
            -0.09921954357684722,
            -0.012603967262037833,
            0.0322231006040427,
        ]
    ),
}


def filter_bank(family: Family) -> tuple[np.ndarray, np.ndarray]:
    """Return the (lowpass, highpass) analysis filters of an orthonormal family."""
    lo = _LOWPASS[Family(family)].copy()
    hi = ((-1.0) ** np.arange(1, lo.size + 1)) * lo[::-1]
    return lo, hi


def _check_filters() -> None:
    for fam in Family:
        lo, hi = filter_bank(fam)
        for taps in (lo, hi):
            if abs(np.sum(taps**2) - 1.0) > 1e-12:
                raise WaveletError(f"{fam.value} filter taps are not unit norm")
        if abs(lo @ hi) > 1e-12:
            raise WaveletError(f"{fam.value} lowpass/highpass are not orthogonal")


_check_filters()


@dataclass(frozen=True)
class WaveletSpec:
    family: Family = Family.SYMLET4
    levels: int = 3
    boundary: str = "periodic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        if int(self.levels) != self.levels or self.levels < 1:
            raise WaveletError(f"levels must be a positive integer, got {self.levels}")
        if self.boundary != "periodic":
            raise WaveletError(f"unsupported boundary mode {self.boundary!r}")

    def check_shape(self, shape: tuple[int, int]) -> None:
        if len(shape) != 2:
            raise WaveletError(f"expected a 2-D shape, got {shape}")
        step = 2**self.levels
        if any(s <= 0 or s % step for s in shape):
            raise WaveletError(f"image shape {tuple(shape)} not divisible by 2**{self.levels}")


@dataclass(frozen=True)
class Subband:
    """One block of the coefficient vector.

    ``name`` is ``"A<level>"`` for the approximation and ``"H"``, ``"V"`` or
    ``"D"`` followed by the level for details. ``rows``/``cols`` locate the
    block inside the pyramid mosaic.
    """

    name: str
    level: int
    offset: int
    shape: tuple[int, int]
    rows: slice
    cols: slice

    @property
    def length(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def index(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True, eq=False)
class CoeffVector:
    data: np.ndarray
    layout: tuple[Subband, ...]
    shape: tuple[int, int]

    def __post_init__(self) -> None:
        if self.data.ndim != 1 or self.data.size != self.shape[0] * self.shape[1]:
            raise WaveletError("coefficient data length does not match image shape")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return self.data.size

    def band(self, name: str) -> np.ndarray:
        for sb in self.layout:
            if sb.name == name:
                return self.data[sb.index].reshape(sb.shape)
        raise KeyError(name)


@lru_cache(maxsize=None)
def _analysis_matrix(family: Family, n: int) -> np.ndarray:
    """Single-level periodized analysis operator on length ``n`` (rows: lowpass then highpass)."""
    lo, hi = filter_bank(family)
    taps = lo.size
    half = n // 2
    mat = np.zeros((n, n))
    k = np.arange(taps)
    for i in range(half):
        cols = (2 * i + taps // 2 - k) % n
        np.add.at(mat[i], cols, lo)
        np.add.at(mat[half + i], cols, hi)
    mat.setflags(write=False)
    return mat


def _filter_axis(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    """Periodized analysis (or its transpose) along one axis by explicit shifted sums.

    Same convention as :func:`_analysis_matrix`; products are rounded before
    summation, so a constant input gives detail coefficients of exactly zero
    when the highpass taps cancel.
    """
    taps = lo.size
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    half = n // 2
    i = np.arange(half)
    if not inverse:
        a = np.zeros((half,) + x.shape[1:])
        d = np.zeros_like(a)
        for k in range(taps):
            xs = x[(2 * i + taps // 2 - k) % n]
            a += lo[k] * xs
            d += hi[k] * xs
        out = np.concatenate([a, d])
    else:
        out = np.zeros_like(x)
        for k in range(taps):
            idx = (2 * i + taps // 2 - k) % n
            np.add.at(out, idx, lo[k] * x[:half] + hi[k] * x[half:])
    return np.moveaxis(out, 0, axis)


@lru_cache(maxsize=None)
def _layout(levels: int, shape: tuple[int, int]) -> tuple[Subband, ...]:
    h, w = shape
    bands = []
    ch, cw = h >> levels, w >> levels
    bands.append(("A%d" % levels, levels, (ch, cw), slice(0, ch), slice(0, cw)))
    for lev in range(levels, 0, -1):
        bh, bw = h >> lev, w >> lev
        # H: highpass along rows (axis 0); V: highpass along columns (axis 1).
        bands.append(("H%d" % lev, lev, (bh, bw), slice(bh, 2 * bh), slice(0, bw)))
        bands.append(("V%d" % lev, lev, (bh, bw), slice(0, bh), slice(bw, 2 * bw)))
        bands.append(("D%d" % lev, lev, (bh, bw), slice(bh, 2 * bh), slice(bw, 2 * bw)))
    out, offset = [], 0
    for name, lev, shp, rows, cols in bands:
        out.append(Subband(name, lev, offset, shp, rows, cols))
        offset += shp[0] * shp[1]
    return tuple(out)


@lru_cache(maxsize=None)
def mosaic_order(levels: int, shape: tuple[int, int]) -> np.ndarray:
    """Index array such that ``coeffs[order].reshape(shape)`` is the pyramid mosaic."""
    idx = np.empty(shape, dtype=np.intp)
    for sb in _layout(levels, shape):
        idx[sb.rows, sb.cols] = np.arange(sb.offset, sb.offset + sb.length).reshape(sb.shape)
    order = idx.ravel()
    order.setflags(write=False)
    return order


def layout(levels: int, shape: tuple[int, int]) -> tuple[Subband, ...]:
    return _layout(levels, tuple(shape))


class Wavelet:
    """A transform bound to one spec and image shape.

    Hot loops use this object directly with plain arrays; the module-level
    functions wrap results in :class:`CoeffVector`.
    """

    def __init__(self, spec: WaveletSpec, shape: tuple[int, int]):
        shape = tuple(int(s) for s in shape)
        spec.check_shape(shape)
        self.spec = spec
        self.shape = shape
        self.size = shape[0] * shape[1]
        self.layout = _layout(spec.levels, shape)
        self._mosaic_order = mosaic_order(spec.levels, shape)
        self._flat_order = np.argsort(self._mosaic_order)
        # Two-tap filters are applied directly; longer ones through dense matrices.
        self._direct = filter_bank(spec.family) if len(_LOWPASS[spec.family]) == 2 else None
        self._levels = [
            (_analysis_matrix(spec.family, shape[0] >> lev), _analysis_matrix(spec.family, shape[1] >> lev))
            for lev in range(spec.levels)
        ]

    def forward(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=float)
        if img.shape != self.shape:
            raise WaveletError(f"image shape {img.shape} does not match {self.shape}")
        mosaic = img.copy()
        for lev, (mr, mc) in enumerate(self._levels):
            h, w = self.shape[0] >> lev, self.shape[1] >> lev
            if self._direct is not None:
                lo, hi = self._direct
                mosaic[:h, :w] = _filter_axis(_filter_axis(mosaic[:h, :w], lo, hi, 0), lo, hi, 1)
            else:
                mosaic[:h, :w] = mr @ mosaic[:h, :w] @ mc.T
        return self.from_mosaic(mosaic)

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        mosaic = self.to_mosaic(coeffs).copy()
        for lev in range(self.spec.levels - 1, -1, -1):
            mr, mc = self._levels[lev]
            h, w = self.shape[0] >> lev, self.shape[1] >> lev
            if self._direct is not None:
                lo, hi = self._direct
                mosaic[:h, :w] = _filter_axis(_filter_axis(mosaic[:h, :w], lo, hi, 0, True), lo, hi, 1, True)
            else:
                mosaic[:h, :w] = mr.T @ mosaic[:h, :w] @ mc
        return mosaic

    def to_mosaic(self, coeffs: np.ndarray) -> np.ndarray:
        c = np.asarray(coeffs)
        if c.shape != (self.size,):
            raise WaveletError(f"coefficient length {c.shape} does not match layout of size {self.size}")
        return c[self._mosaic_order].reshape(self.shape)

    def from_mosaic(self, mosaic: np.ndarray) -> np.ndarray:
        return np.asarray(mosaic).ravel()[self._flat_order]

    def groups(self) -> list[tuple[str, slice]]:
        return [(sb.name, sb.index) for sb in self.layout]

    def wrap(self, data: np.ndarray) -> CoeffVector:
        return CoeffVector(np.asarray(data, dtype=float), self.layout, self.shape)


@lru_cache(maxsize=64)
def get_wavelet(spec: WaveletSpec, shape: tuple[int, int]) -> Wavelet:
    return Wavelet(spec, tuple(shape))


def dwt_forward(image: np.ndarray, spec: WaveletSpec) -> CoeffVector:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise WaveletError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise WaveletError("image contains non-finite values")
    wav = get_wavelet(spec, img.shape)
    return wav.wrap(wav.forward(img))


def dwt_inverse(coeffs: CoeffVector, spec: WaveletSpec) -> np.ndarray:
    wav = get_wavelet(spec, coeffs.shape)
    if tuple(coeffs.layout) != wav.layout:
        raise WaveletError("coefficient layout is inconsistent with the wavelet spec")
    return wav.inverse(coeffs.data)


def subband_groups(spec: WaveletSpec, shape: tuple[int, int]) -> list[tuple[str, slice]]:
    """Subband names with their index ranges, coarsest first (``3*levels + 1`` groups)."""
    return get_wavelet(spec, tuple(shape)).groups()
