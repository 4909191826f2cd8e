"""Fast spotlight imaging operator, its inverse, and a dense oracle.

The imaging chain is

    F_a^-1( Θ3 Θ4 · F_r^-1( Θ2 · F_r( Θ1 · F_a( Θramp · F_a(Y · Θderamp) ))))

and the inverse runs the same stages backwards with conjugated phases.
All FFTs are orthonormal, so every stage is unitary and the inverse is
the exact adjoint.

The first three stages (deramp, azimuth FFT, reramp) form a circular
convolution with the reference azimuth chirp: bulk azimuth compression
at the grid-matched FM rate ``prf**2 / Na``. Θ1..Θ4 are the chirp-scaling
stages: differential RCMC, range compression with bulk RCMC, the residual
azimuth matched filter and the residual phase correction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    ConfigurationError,
    DimensionError,
    RadarParams,
    SamplingMask,
    as_image,
)

DENSE_PIXEL_CAP = 1024
_PHASE_NAMES = ("deramp", "ramp", "theta1", "theta2", "theta3", "theta4")


def _fa(x):
    return np.fft.fft(x, axis=0, norm="ortho")


def _ifa(x):
    return np.fft.ifft(x, axis=0, norm="ortho")


def _fr(x):
    return np.fft.fft(x, axis=1, norm="ortho")


def _ifr(x):
    return np.fft.ifft(x, axis=1, norm="ortho")


@dataclass(frozen=True)
class OperatorPlan:
    """Precomputed unit-modulus phase grids for one radar/grid pairing.

    ``conjugated`` marks a plan whose phases are the conjugates of the
    forward plan, i.e. the phases the inverse operator applies.
    """

    radar: RadarParams
    shape: tuple
    deramp: np.ndarray
    ramp: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    theta4: np.ndarray
    conjugated: bool = False

    @property
    def scene_shape(self) -> tuple:
        return self.shape

    def phases(self) -> dict:
        return {name: getattr(self, name) for name in _PHASE_NAMES}

    def conj(self) -> "OperatorPlan":
        """Plan holding the elementwise conjugate of every phase grid."""
        fields = {name: np.conj(arr) for name, arr in self.phases().items()}
        return replace(self, conjugated=not self.conjugated, **fields)


def _check_grid(radar: RadarParams, shape) -> tuple:
    try:
        na, nr = (int(n) for n in shape)
    except (TypeError, ValueError):
        raise ConfigurationError(f"grid dims must be a pair of integers, got {shape!r}") from None
    if na < 2 or nr < 2:
        raise ConfigurationError(f"grid dims must be >= 2, got {(na, nr)}")
    if na % 2 or nr % 2:
        raise ConfigurationError(f"grid dims must be even for periodic chirps, got {(na, nr)}")
    window = nr / radar.sample_rate
    if radar.pulse_width > window * (1 + 1e-9):
        raise ConfigurationError(
            f"pulse of {radar.pulse_width * radar.sample_rate:.1f} samples does not fit "
            f"in a {nr}-sample range window"
        )
    if radar.bandwidth > radar.sample_rate * (1 + 1e-9):
        raise ConfigurationError("chirp bandwidth exceeds the range sample rate")
    grid_rate = radar.prf**2 / na
    if radar.doppler_rate(radar.ref_range) > grid_rate * (1 + 1e-6):
        raise ConfigurationError(
            "azimuth FM rate at the reference range exceeds prf**2/Na; "
            "the aperture is undersampled for this grid"
        )
    if radar.wavelength * radar.prf / (4 * radar.velocity) >= 1:
        raise ConfigurationError("Doppler band reaches the squint singularity")
    return na, nr


def build_plan(radar: RadarParams, shape) -> OperatorPlan:
    """Build the phase grids for an ``(Na, Nr)`` echo / scene grid."""
    na, nr = _check_grid(radar, shape)
    c = radar.light_speed
    lam = radar.wavelength
    v = radar.velocity
    ones = np.ones((na, nr))

    # deramp/reramp: circular convolution with the grid-matched azimuth chirp
    grid_rate = radar.prf**2 / na
    t_m = radar.slow_time(na)
    centred = np.arange(na) - na // 2
    deramp = np.exp(1j * np.pi * grid_rate * t_m**2)[:, None] * ones
    ramp = np.exp(1j * np.pi * centred**2 / na)[:, None] * ones

    impulse = np.zeros((na, 1), dtype=complex)
    impulse[0] = 1.0
    bulk_response = np.sqrt(na) * _fa(ramp[:, :1] * _fa(impulse * deramp[:, :1]))[:, 0]

    f_a = np.fft.fftfreq(na, d=1.0 / radar.prf)[:, None]
    f_r = np.fft.fftfreq(nr, d=1.0 / radar.sample_rate)[None, :]
    tau = ((np.arange(nr) - nr // 2) / radar.sample_rate)[None, :]
    r0 = radar.pixel_range(nr)[None, :]
    r_ref = radar.ref_range

    mig = np.sqrt(1.0 - (lam * f_a / (2.0 * v)) ** 2)
    scale = 1.0 / mig - 1.0
    f0 = c / lam
    src = radar.chirp_rate * c * r_ref * f_a**2 / (2.0 * v**2 * f0**3 * mig**3)
    k_m = radar.chirp_rate / (1.0 - src)

    theta1 = np.exp(1j * np.pi * k_m * scale * (tau - 2.0 * r_ref * scale / c) ** 2) * ones
    theta2 = (np.exp(1j * np.pi * mig * f_r**2 / k_m)
              * np.exp(1j * 4.0 * np.pi * f_r * r_ref * scale / c))
    theta3 = np.exp(1j * 4.0 * np.pi * r0 * mig / lam) * np.conj(bulk_response)[:, None]
    residual = 4.0 * np.pi * k_m * (1.0 - mig) * (r0 - r_ref) ** 2 / (c**2 * mig**2)
    theta4 = np.exp(-1j * residual) * ones

    return OperatorPlan(
        radar=radar,
        shape=(na, nr),
        deramp=deramp,
        ramp=ramp,
        theta1=theta1,
        theta2=theta2,
        theta3=theta3,
        theta4=theta4,
    )


def _check_shape(plan: OperatorPlan, arr: np.ndarray, what: str) -> np.ndarray:
    arr = as_image(arr, name=what)
    if arr.shape != plan.shape:
        raise DimensionError(f"{what} shape {arr.shape} does not match plan {plan.shape}")
    return arr


def image(plan: OperatorPlan, echo: np.ndarray) -> np.ndarray:
    """Focus an echo into a complex scene estimate."""
    y = _check_shape(plan, echo, "echo")
    s = _fa(y * plan.deramp)
    s = _fa(s * plan.ramp)
    s = _fr(s * plan.theta1)
    s = _ifr(s * plan.theta2)
    return _ifa(s * plan.theta3 * plan.theta4)


def inverse_image(plan: OperatorPlan, scene: np.ndarray) -> np.ndarray:
    """Synthesize the echo of a complex scene (adjoint of :func:`image`)."""
    x = _check_shape(plan, scene, "scene")
    inv = plan.conj()
    s = _fa(x) * inv.theta4 * inv.theta3
    s = _fr(s)
    s = _ifr(s * inv.theta2) * inv.theta1
    s = _ifa(s) * inv.ramp
    return _ifa(s) * inv.deramp


def apply_mask(mask: SamplingMask, echo: np.ndarray) -> np.ndarray:
    """Zero the echo samples dropped by ``mask``."""
    y = as_image(echo, name="echo")
    if mask.shape != y.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match echo {y.shape}")
    return y * mask.indicator


def _rect(u):
    return (np.abs(u) <= 0.5).astype(np.float64)


@dataclass(frozen=True)
class DenseObservation:
    """Explicit observation matrix; rows are (pulse, sample), columns pixels."""

    matrix: np.ndarray
    radar: RadarParams
    echo_shape: tuple
    scene_shape: tuple

    def forward(self, scene: np.ndarray) -> np.ndarray:
        """Echo of ``scene`` (unit-modulus entries, no normalisation)."""
        return (self.matrix @ np.asarray(scene).ravel()).reshape(self.echo_shape)

    def matched_filter(self, echo: np.ndarray) -> np.ndarray:
        return (self.matrix.conj().T @ np.asarray(echo).ravel()).reshape(self.scene_shape)

    @property
    def unit_scale(self) -> float:
        """Divide the matrix by this to compare with the unitary fast operators."""
        return float(np.sqrt(self.matrix.shape[0]))


def build_dense_observation(radar: RadarParams, shape) -> DenseObservation:
    """Materialise the observation matrix for a small grid.

    Fast-time delays are evaluated modulo the receive window (periodic
    chirp illumination), so every pixel keeps a full pulse inside the
    window the same way the FFT chain assumes.
    """
    na, nr = (int(n) for n in shape)
    if na * nr > DENSE_PIXEL_CAP:
        raise ConfigurationError(
            f"dense observation limited to {DENSE_PIXEL_CAP} pixels, got {na}x{nr}"
        )
    c = radar.light_speed
    t_m = radar.slow_time(na)
    t = radar.fast_time(nr)
    xs = radar.pixel_azimuth(na)
    r0 = radar.pixel_range(nr)
    vt = radar.velocity * t_m

    # axes: (pulse, sample, pixel row, pixel col)
    rng = radar.slant_range(t_m[:, None, None], r0[None, None, :], xs[None, :, None])
    beam = (_rect(vt / radar.track_length)[:, None]
            * _rect((radar.sliding_factor * vt[:, None] - xs[None, :]) / radar.scene_length))
    window = nr / radar.sample_rate
    delay = t[None, :, None, None] - 2.0 * rng[:, None, :, :] / c
    delay = np.mod(delay + window / 2.0, window) - window / 2.0
    phi = (beam[:, None, :, None]
           * _rect(delay / radar.pulse_width)
           * np.exp(-4j * np.pi * rng[:, None, :, :] / radar.wavelength)
           * np.exp(1j * np.pi * radar.chirp_rate * delay**2))
    return DenseObservation(
        matrix=phi.reshape(na * nr, na * nr),
        radar=radar,
        echo_shape=(na, nr),
        scene_shape=(na, nr),
    )
