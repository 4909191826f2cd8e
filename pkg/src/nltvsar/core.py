"""Shared types, errors and the on-disk complex-image format.

Images are plain 2-D ``numpy`` arrays: azimuth along axis 0 (rows), range
along axis 1 (cols). Complex data is held as ``complex128`` in memory and
stored as interleaved little-endian ``float32`` pairs on disk.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

IMAGE_MAGIC = b"SPHC"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

PathLike = Union[str, os.PathLike]
# images are plain arrays; the alias only documents intent in signatures
ComplexImage = np.ndarray


class NltvSarError(Exception):
    """Base class for all package errors."""


class FormatError(NltvSarError):
    """A file does not follow the expected binary layout."""


class TruncationError(FormatError):
    """A file ends before its declared payload."""


class ConfigurationError(NltvSarError):
    """Radar geometry or grid sizes are inconsistent."""


class DimensionError(NltvSarError, ValueError):
    """Array shapes do not match the operator or each other."""


class ParameterError(NltvSarError, ValueError):
    """A numeric parameter is outside its admissible range."""


class DivergenceError(NltvSarError, ArithmeticError):
    """An iterative solve blew up."""


class DataError(NltvSarError):
    """Dataset content is missing or degenerate."""


def as_image(arr, *, name: str = "image") -> np.ndarray:
    """Validate and return ``arr`` as a 2-D ``complex128`` array."""
    out = np.asarray(arr)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise DimensionError(f"{name} has zero-size dims {out.shape}")
    out = out.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(out)):
        raise ParameterError(f"{name} contains non-finite values")
    return out


def magnitude(img: np.ndarray) -> np.ndarray:
    """Elementwise modulus of a complex (or real) grid."""
    return np.abs(np.asarray(img))


def write_image(img: np.ndarray, path: PathLike) -> None:
    """Write ``img`` in the SPHC format, replacing any existing file.

    The write goes through a temporary sibling file so an interrupted
    call never leaves a half-written image behind.
    """
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"cannot write image with shape {arr.shape}")
    rows, cols = arr.shape
    payload = np.empty((rows, cols, 2), dtype="<f4")
    payload[..., 0] = np.real(arr)
    payload[..., 1] = np.imag(arr)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, rows, cols))
            fh.write(payload.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write image {path}: {exc}") from exc


def read_image(path: PathLike) -> np.ndarray:
    """Read an SPHC file into a ``complex128`` array."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: zero-size dims {rows}x{cols}")
    need = rows * cols * 8
    body = raw[_HEADER.size:]
    if len(body) < need:
        raise TruncationError(f"{path}: payload has {len(body)} bytes, expected {need}")
    if len(body) > need:
        raise FormatError(f"{path}: {len(body) - need} trailing bytes")
    pairs = np.frombuffer(body, dtype="<f4").reshape(rows, cols, 2)
    out = np.empty((rows, cols), dtype=np.complex128)
    out.real = pairs[..., 0]
    out.imag = pairs[..., 1]
    return out


def hyperbolic_range(t_m, r0, x, velocity: float):
    """Broadside slant range ``sqrt(r0**2 + (v*t_m - x)**2)``."""
    return np.sqrt(np.square(r0) + np.square(velocity * t_m - x))


@dataclass(frozen=True)
class RadarParams:
    """Platform and waveform geometry for the observation model.

    ``ref_range`` is the closest-approach range of the scene centre. The
    fast-time axis is centred on its two-way delay; scene pixels sit on a
    grid of ``azimuth_spacing`` by ``range_spacing`` around that point.

    The sliding factor follows the convention A=0 spotlight, A=1 stripmap,
    0<A<1 sliding spotlight: the beam centre on the ground moves at
    ``A * velocity``.
    """

    velocity: float
    track_length: float
    scene_length: float
    pulse_width: float
    wavelength: float
    chirp_rate: float
    sliding_factor: float
    prf: float
    sample_rate: float
    ref_range: float
    light_speed: float = SPEED_OF_LIGHT
    slant_range_fn: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("velocity", "track_length", "scene_length", "pulse_width",
                     "wavelength", "chirp_rate", "prf", "sample_rate",
                     "ref_range", "light_speed"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive and finite, got {value!r}")
        if not 0.0 <= self.sliding_factor <= 1.0:
            raise ParameterError(f"sliding_factor must lie in [0, 1], got {self.sliding_factor!r}")

    @classmethod
    def for_grid(
        cls,
        n_azimuth: int,
        n_range: int,
        *,
        wavelength: float = 0.031,
        azimuth_spacing: float = 4.0,
        range_spacing: float = 4.0,
        velocity: float = 7500.0,
        sliding_factor: float = 0.0,
    ) -> "RadarParams":
        """Geometry whose sampling matches an ``n_azimuth`` x ``n_range`` grid.

        The PRF gives one azimuth pixel per pulse, the reference range makes
        the azimuth FM rate equal ``prf**2 / n_azimuth`` and the chirp fills
        the receive window with bandwidth equal to the sample rate. Under
        these choices both chirps are periodic on the grid, which is what
        lets the FFT chain act as an almost exact matched filter.
        """
        prf = velocity / azimuth_spacing
        sample_rate = SPEED_OF_LIGHT / (2.0 * range_spacing)
        pulse_width = n_range / sample_rate
        return cls(
            velocity=velocity,
            track_length=n_azimuth * azimuth_spacing,
            scene_length=n_azimuth * azimuth_spacing,
            pulse_width=pulse_width,
            wavelength=wavelength,
            chirp_rate=sample_rate / pulse_width,
            sliding_factor=sliding_factor,
            prf=prf,
            sample_rate=sample_rate,
            ref_range=2.0 * n_azimuth * azimuth_spacing**2 / wavelength,
        )

    @property
    def azimuth_spacing(self) -> float:
        return self.velocity / self.prf

    @property
    def range_spacing(self) -> float:
        return self.light_speed / (2.0 * self.sample_rate)

    @property
    def bandwidth(self) -> float:
        return self.chirp_rate * self.pulse_width

    def doppler_rate(self, r0):
        """Azimuth FM rate ``2 v**2 / (lambda * r0)``."""
        return 2.0 * self.velocity**2 / (self.wavelength * np.asarray(r0))

    def slant_range(self, t_m, r0, x):
        if self.slant_range_fn is not None:
            return self.slant_range_fn(t_m, r0, x)
        return hyperbolic_range(t_m, r0, x, self.velocity)

    def slow_time(self, n_azimuth: int) -> np.ndarray:
        return (np.arange(n_azimuth) - n_azimuth // 2) / self.prf

    def fast_time(self, n_range: int) -> np.ndarray:
        """Absolute fast time of each range sample."""
        rel = (np.arange(n_range) - n_range // 2) / self.sample_rate
        return 2.0 * self.ref_range / self.light_speed + rel

    def pixel_azimuth(self, n_rows: int) -> np.ndarray:
        return (np.arange(n_rows) - n_rows // 2) * self.azimuth_spacing

    def pixel_range(self, n_cols: int) -> np.ndarray:
        return self.ref_range + (np.arange(n_cols) - n_cols // 2) * self.range_spacing


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Azimuth and range sample selectors for a downsampled echo."""

    azimuth_keep: np.ndarray
    range_keep: np.ndarray

    def __post_init__(self):
        az = np.asarray(self.azimuth_keep, dtype=bool)
        rg = np.asarray(self.range_keep, dtype=bool)
        if az.ndim != 1 or rg.ndim != 1 or az.size == 0 or rg.size == 0:
            raise DimensionError("mask vectors must be non-empty 1-D arrays")
        az.setflags(write=False)
        rg.setflags(write=False)
        object.__setattr__(self, "azimuth_keep", az)
        object.__setattr__(self, "range_keep", rg)

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (np.array_equal(self.azimuth_keep, other.azimuth_keep)
                and np.array_equal(self.range_keep, other.range_keep))

    def __hash__(self):
        return hash((self.azimuth_keep.tobytes(), self.range_keep.tobytes()))

    @classmethod
    def full(cls, shape) -> "SamplingMask":
        return cls(np.ones(shape[0], bool), np.ones(shape[1], bool))

    @classmethod
    def from_indicator(cls, indicator: np.ndarray) -> "SamplingMask":
        """Recover the selectors from a 0/1 outer-product indicator grid."""
        ind = np.real(np.asarray(indicator)) > 0.5
        mask = cls(ind.any(axis=1), ind.any(axis=0))
        if not np.array_equal(mask.indicator > 0.5, ind):
            raise FormatError("indicator is not a separable azimuth x range mask")
        return mask

    @property
    def shape(self) -> tuple:
        return (self.azimuth_keep.size, self.range_keep.size)

    @property
    def indicator(self) -> np.ndarray:
        """1.0 where both the pulse and the range sample are kept."""
        return np.outer(self.azimuth_keep, self.range_keep).astype(np.float64)

    @property
    def is_full(self) -> bool:
        return bool(self.azimuth_keep.all() and self.range_keep.all())

    @property
    def kept_fraction(self) -> float:
        na, nr = self.shape
        return (int(self.azimuth_keep.sum()) / na) * (int(self.range_keep.sum()) / nr)

    @property
    def dsr(self) -> float:
        """Fraction of echo samples removed, ``1 - kept_fraction``."""
        return 1.0 - self.kept_fraction


@dataclass(frozen=True)
class LayerParams:
    """Scalars driving one ADMM iteration.

    ``delta == 0`` switches the non-convex threshold off (identity) and
    ``lambda_nltv == 0`` does the same for the NLTV branch.
    """

    rho: float
    lambda_nltv: float
    tau: float
    delta: float
    theta: float

    def __post_init__(self):
        for name in ("rho", "lambda_nltv", "tau", "delta", "theta"):
            value = getattr(self, name)
            if math.isnan(value):
                raise ParameterError(f"{name} is NaN")
        if not 0.0 < self.rho < 1.0:
            raise ParameterError(f"rho must lie in (0, 1), got {self.rho!r}")
        if not (math.isfinite(self.lambda_nltv) and self.lambda_nltv >= 0.0):
            raise ParameterError(f"lambda_nltv must be >= 0, got {self.lambda_nltv!r}")
        if not (math.isfinite(self.tau) and self.tau > 0.0):
            raise ParameterError(f"tau must be > 0, got {self.tau!r}")
        if not (math.isfinite(self.delta) and self.delta >= 0.0):
            raise ParameterError(f"delta must be >= 0, got {self.delta!r}")
        if not self.theta > 1.0:
            raise ParameterError(f"theta must be > 1, got {self.theta!r}")

    def as_tuple(self) -> tuple:
        return (self.rho, self.lambda_nltv, self.tau, self.delta, self.theta)
