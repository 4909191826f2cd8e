"""Unrolled ADMM network with per-layer scalars trained by SPSA.

Each layer owns ``(rho, lambda, tau, delta, theta)``. Training works on an
unconstrained vector ``u`` of length ``5K`` mapped into the admissible
ranges:

    rho   = sigmoid(u0)
    lam   = scale * softplus(u1)
    tau   = softplus(u2)
    delta = scale * softplus(u3)
    theta = 1 + softplus(u4)

where ``scale`` is the median matched-filter magnitude of the training
echoes, so thresholds follow the data's amplitude.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DataError,
    DimensionError,
    FormatError,
    LayerParams,
    NltvSarError,
    ParameterError,
    SamplingMask,
    TruncationError,
)
from .operators import OperatorPlan, apply_mask, image
from .regularization import NLTVConfig
from .solver import DEFAULT_INNER_ITERS, Mode, SolverConfig, admm_solve, default_nltv_config

CHECKPOINT_MAGIC = b"SPHP"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sII")
N_LAYER_PARAMS = 5

INIT_RHO = 0.5
INIT_LAMBDA_REL = 0.05
INIT_TAU = 0.2
INIT_DELTA_REL = 0.1
INIT_THETA = 4.0

_U_CLIP = 30.0


class TrainingError(NltvSarError):
    """Training produced a non-finite loss; ``snapshot`` holds the state."""

    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass(frozen=True)
class NetworkParams:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ParameterError("network needs at least one layer")
        if not all(isinstance(p, LayerParams) for p in layers):
            raise ParameterError("layers must be LayerParams")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    K = depth

    def to_array(self) -> np.ndarray:
        """``(K, 5)`` array in the order rho, lambda, tau, delta, theta."""
        return np.array([p.as_tuple() for p in self.layers], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "NetworkParams":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, N_LAYER_PARAMS)
        return cls(tuple(LayerParams(*map(float, row)) for row in arr))

    @classmethod
    def uniform(cls, depth: int, layer: LayerParams) -> "NetworkParams":
        return cls((layer,) * depth)


def default_network(depth: int, scale: float) -> NetworkParams:
    """Scale-tied initialisation shared by all layers."""
    return NetworkParams.uniform(depth, LayerParams(
        rho=INIT_RHO, lambda_nltv=INIT_LAMBDA_REL * scale, tau=INIT_TAU,
        delta=INIT_DELTA_REL * scale, theta=INIT_THETA))


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def to_unconstrained(params: NetworkParams, scale: float) -> np.ndarray:
    a = params.to_array()
    u = np.empty_like(a)
    u[:, 0] = np.log(a[:, 0] / (1.0 - a[:, 0]))
    u[:, 1] = _softplus_inv(a[:, 1] / scale)
    u[:, 2] = _softplus_inv(a[:, 2])
    u[:, 3] = _softplus_inv(a[:, 3] / scale)
    u[:, 4] = _softplus_inv(a[:, 4] - 1.0)
    return np.clip(u, -_U_CLIP, _U_CLIP).ravel()


def from_unconstrained(u, scale: float) -> NetworkParams:
    """Map any real vector of length 5K to valid network parameters."""
    u = np.clip(np.asarray(u, dtype=np.float64), -_U_CLIP, _U_CLIP).reshape(-1, N_LAYER_PARAMS)
    a = np.empty_like(u)
    a[:, 0] = _sigmoid(u[:, 0])
    a[:, 1] = scale * _softplus(u[:, 1])
    a[:, 2] = _softplus(u[:, 2])
    a[:, 3] = scale * _softplus(u[:, 3])
    a[:, 4] = 1.0 + _softplus(u[:, 4])
    return NetworkParams.from_array(a)


def forward(params: NetworkParams, echo: np.ndarray, plan: OperatorPlan,
            mask: Optional[SamplingMask] = None, *, nltv: Optional[NLTVConfig] = None,
            inner_iters: int = DEFAULT_INNER_ITERS) -> np.ndarray:
    """Run the K-layer network: the solver in layer-varying mode."""
    if not isinstance(params, NetworkParams):
        raise ParameterError("params must be NetworkParams")
    if nltv is None:
        nltv = default_nltv_config()
    cfg = SolverConfig(layers=params.depth, params=params.layers, nltv=nltv,
                       mode=Mode.NLTV_NC, inner_iters=inner_iters, track_objective=False)
    x, _ = admm_solve(echo, plan, mask, cfg)
    return x


def loss(outputs: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    """Mean relative squared error of magnitudes, also divided by pixel count."""
    if len(outputs) != len(labels) or not outputs:
        raise DimensionError(f"{len(outputs)} outputs for {len(labels)} labels")
    total = 0.0
    pixels = None
    for out, lab in zip(outputs, labels):
        mag = np.abs(np.asarray(out))
        lab = np.asarray(lab, dtype=np.float64)
        if mag.shape != lab.shape:
            raise DimensionError(f"output {mag.shape} vs label {lab.shape}")
        if pixels is None:
            pixels = lab.size
        elif lab.size != pixels:
            raise DimensionError("all labels must share one size")
        denom = float(np.sum(lab**2))
        if denom == 0.0:
            raise DataError("label with zero norm")
        total += float(np.sum((mag - lab) ** 2)) / denom
    return total / (len(labels) * pixels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    spsa_step: float = 0.3
    spsa_perturb: float = 0.1
    alpha: float = 0.602
    gamma: float = 0.101
    seed: int = 0
    calibration_samples: int = 4
    max_step: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        for name in ("spsa_step", "spsa_perturb", "max_step"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.alpha <= 0 or self.gamma <= 0:
            raise ParameterError("decay exponents must be positive")
        if self.calibration_samples < 1:
            raise ParameterError("calibration_samples must be >= 1")


@dataclass
class TrainResult:
    params: NetworkParams
    history: list
    initial_loss: float
    best_loss: float
    scale: float
    step_gain: float = math.nan
    batch_history: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.history))


@dataclass(frozen=True)
class Sample:
    echo: np.ndarray
    label: np.ndarray
    mask: Optional[SamplingMask] = None


def _as_samples(data) -> list:
    out = []
    for item in data:
        if isinstance(item, Sample):
            out.append(item)
        else:
            out.append(Sample(*item))
    return out


def data_scale(samples, plan: OperatorPlan) -> float:
    """Median matched-filter magnitude pooled over all training echoes."""
    mags = []
    for s in samples:
        y = s.echo if s.mask is None else apply_mask(s.mask, s.echo)
        mags.append(np.abs(image(plan, y)).ravel())
    med = float(np.median(np.concatenate(mags)))
    return med if med > 0 else 1.0


def _batch_loss(params, samples, plan, nltv, inner_iters) -> float:
    outs = [forward(params, s.echo, plan, s.mask, nltv=nltv, inner_iters=inner_iters)
            for s in samples]
    return loss(outs, [s.label for s in samples])


def spsa_gradient(fn, u, c: float, rng: np.random.Generator, free=None):
    """Two-sided simultaneous-perturbation gradient estimate of ``fn`` at ``u``.

    ``free`` optionally masks which coordinates are perturbed. Returns the
    estimate and the mean of the two evaluations.
    """
    delta = rng.choice((-1.0, 1.0), size=u.size)
    if free is not None:
        delta = delta * np.asarray(free, dtype=np.float64)
    lp = fn(u + c * delta)
    lm = fn(u - c * delta)
    return (lp - lm) / (2.0 * c) * delta, 0.5 * (lp + lm)


def train(data, cfg: TrainConfig, init: NetworkParams, plan: OperatorPlan, *,
          nltv: Optional[NLTVConfig] = None, inner_iters: int = DEFAULT_INNER_ITERS,
          scale: Optional[float] = None, log=None) -> TrainResult:
    """SPSA over the unconstrained parameter vector.

    Each batch costs two perturbed forward passes per sample. After every
    epoch the full training loss is evaluated at the current parameters;
    the best parameters seen (including the initial ones) are returned.
    """
    samples = _as_samples(data)
    if not samples:
        raise DataError("training data is empty")
    if scale is None:
        scale = data_scale(samples, plan)
    rng = np.random.default_rng(cfg.seed)
    u = to_unconstrained(init, scale)

    def full_loss(uu):
        return _batch_loss(from_unconstrained(uu, scale), samples, plan, nltv, inner_iters)

    def check(value, what, uu, epoch):
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {what} at epoch {epoch}",
                                {"epoch": epoch, "u": uu.copy(), "scale": scale})
        return value

    initial = check(full_loss(u), "initial loss", u, 0)
    result = TrainResult(params=init, history=[], initial_loss=initial, best_loss=initial,
                         scale=scale)
    if cfg.epochs == 0:
        return result

    n_batches = math.ceil(len(samples) / cfg.batch_size)
    stability = 0.1 * cfg.epochs * n_batches

    def grad_estimate(uu, batch, ck):
        def fn(v):
            return _batch_loss(from_unconstrained(v, scale), batch, plan, nltv, inner_iters)
        return spsa_gradient(fn, uu, ck, rng)

    # gain calibration: the first step moves the largest coordinate by spsa_step on average
    calib = samples[:cfg.batch_size]
    mags = [np.max(np.abs(grad_estimate(u, calib, cfg.spsa_perturb)[0]))
            for _ in range(cfg.calibration_samples)]
    g0 = float(np.mean(mags))
    gain = cfg.spsa_step * (stability + 1.0) ** cfg.alpha / g0 if g0 > 0 else 0.0
    result.step_gain = gain

    best_u = u.copy()

    def _best(uu):
        return from_unconstrained(uu, scale) if result.best_loss < initial else init

    k = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        for b in range(n_batches):
            batch = [samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            ak = gain / (k + 1.0 + stability) ** cfg.alpha
            ck = cfg.spsa_perturb / (k + 1.0) ** cfg.gamma
            g, mean_loss = grad_estimate(u, batch, ck)
            check(mean_loss, "batch loss", u, epoch)
            step = np.clip(ak * g, -cfg.max_step, cfg.max_step)
            u = np.clip(u - step, -_U_CLIP, _U_CLIP)
            result.batch_history.append(mean_loss)
            k += 1
        current = check(full_loss(u), "epoch loss", u, epoch)
        result.history.append(current)
        if current < result.best_loss:
            result.best_loss = current
            best_u = u.copy()
        if log is not None:
            log(epoch, current, _best(best_u))
    result.params = _best(best_u)
    return result


def save_checkpoint(params: NetworkParams, path) -> None:
    """Atomic write of the SPHP checkpoint."""
    arr = params.to_array()
    payload = _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.depth)
    payload += arr.astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise TruncationError(f"{path}: checkpoint shorter than header")
    magic, version, depth = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if depth == 0:
        raise FormatError(f"{path}: zero layers")
    need = depth * N_LAYER_PARAMS * 8
    body = raw[_CK_HEADER.size:]
    if len(body) < need:
        raise TruncationError(f"{path}: {len(body)} payload bytes, expected {need}")
    if len(body) > need:
        raise FormatError(f"{path}: {len(body) - need} trailing bytes")
    try:
        return NetworkParams.from_array(np.frombuffer(body, dtype="<f8"))
    except ParameterError as exc:
        raise FormatError(f"{path}: invalid parameters: {exc}") from exc


def write_loss_csv(history: Sequence[float], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history, start=1):
            out.writerow([i, repr(float(v))])
