"""Simulated distributed-target scenes, echoes, noise and sampling masks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DataError,
    DimensionError,
    FormatError,
    ParameterError,
    SamplingMask,
    read_image,
    write_image,
)
from .operators import OperatorPlan, inverse_image

TARGET_KINDS = ("rectangle", "disk", "strip")
SPECKLE_MODELS = ("gaussian", "phase")


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a random piecewise-constant scene.

    ``speckle="gaussian"`` multiplies the label by a unit-mean-amplitude
    circular Gaussian field (fully developed speckle, Rayleigh amplitude);
    ``"phase"`` keeps the label as the modulus and only randomises phase.
    ``size_range=None`` scales target sizes with the grid (10 to 40 pixels
    at 128).
    """

    dims: tuple = (128, 128)
    target_count: tuple = (3, 8)
    kinds: tuple = TARGET_KINDS
    size_range: Optional[tuple] = None
    reflectivity_range: tuple = (0.4, 1.0)
    background: float = 0.15
    seed: int = 0
    speckle: str = "gaussian"

    def __post_init__(self):
        rows, cols = self.dims
        if rows < 1 or cols < 1:
            raise ParameterError(f"dims must be positive, got {self.dims}")
        lo, hi = self.target_count
        if lo < 0 or hi < lo:
            raise ParameterError(f"bad target_count range {self.target_count}")
        if not self.kinds or any(k not in TARGET_KINDS for k in self.kinds):
            raise ParameterError(f"kinds must be a non-empty subset of {TARGET_KINDS}")
        if self.size_range is None:
            side = min(rows, cols)
            object.__setattr__(self, "size_range", (max(1, side // 12), max(1, (5 * side) // 16)))
        if self.size_range[0] < 1 or self.size_range[1] < self.size_range[0]:
            raise ParameterError(f"bad size_range {self.size_range}")
        if self.reflectivity_range[0] < 0 or self.reflectivity_range[1] < self.reflectivity_range[0]:
            raise ParameterError(f"bad reflectivity_range {self.reflectivity_range}")
        if self.background < 0:
            raise ParameterError("background must be >= 0")
        if self.speckle not in SPECKLE_MODELS:
            raise ParameterError(f"speckle must be one of {SPECKLE_MODELS}")


def make_label(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    rows, cols = spec.dims
    label = np.full((rows, cols), float(spec.background))
    rr, cc = np.mgrid[0:rows, 0:cols]
    lo, hi = spec.size_range
    n_targets = int(rng.integers(spec.target_count[0], spec.target_count[1] + 1))
    for _ in range(n_targets):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        value = float(rng.uniform(*spec.reflectivity_range))
        if kind == "rectangle":
            h = min(int(rng.integers(lo, hi + 1)), rows)
            w = min(int(rng.integers(lo, hi + 1)), cols)
            r0 = int(rng.integers(0, rows - h + 1))
            c0 = int(rng.integers(0, cols - w + 1))
            label[r0:r0 + h, c0:c0 + w] = value
        elif kind == "disk":
            radius = max(1, min(int(rng.integers(lo, hi + 1)) // 2, min(rows, cols) // 2))
            cr = int(rng.integers(radius, max(radius + 1, rows - radius)))
            cc0 = int(rng.integers(radius, max(radius + 1, cols - radius)))
            label[(rr - cr) ** 2 + (cc - cc0) ** 2 <= radius**2] = value
        else:
            width = max(1, int(rng.integers(lo, hi + 1)) // 4)
            if rng.random() < 0.5:
                width = min(width, rows)
                r0 = int(rng.integers(0, rows - width + 1))
                label[r0:r0 + width, :] = value
            else:
                width = min(width, cols)
                c0 = int(rng.integers(0, cols - width + 1))
                label[:, c0:c0 + width] = value
    return label


def make_scene(spec: SceneSpec):
    """Return ``(complex scene, real label)``; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    label = make_label(spec, rng)
    shape = label.shape
    if spec.speckle == "gaussian":
        g = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
        # E|g| = sqrt(pi)/2, so this keeps the mean amplitude equal to the label
        scene = label * g * (2.0 / math.sqrt(math.pi))
    else:
        scene = label * np.exp(1j * rng.uniform(-np.pi, np.pi, shape))
    return scene, label


def make_echo(scene: np.ndarray, plan: OperatorPlan) -> np.ndarray:
    scene = np.asarray(scene)
    if scene.shape != plan.shape:
        raise DimensionError(f"scene shape {scene.shape} does not match plan {plan.shape}")
    return inverse_image(plan, scene)


def make_noise(echo: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Circular Gaussian noise scaled so the echo/noise energy ratio is exact."""
    echo = np.asarray(echo)
    if math.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(echo, dtype=np.complex128)
    if math.isnan(snr_db):
        raise ParameterError("snr_db is NaN")
    energy = float(np.vdot(echo, echo).real)
    if energy == 0.0:
        raise DataError("cannot set an SNR relative to a zero echo")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(echo.shape) + 1j * rng.standard_normal(echo.shape)
    target = energy / 10.0 ** (snr_db / 10.0)
    return noise * math.sqrt(target / float(np.vdot(noise, noise).real))


def add_noise(echo: np.ndarray, snr_db: float, seed) -> np.ndarray:
    echo = np.asarray(echo)
    if math.isinf(snr_db) and snr_db > 0:
        return echo.copy()
    return echo + make_noise(echo, snr_db, seed)


def measured_snr_db(echo: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(float(np.vdot(echo, echo).real) / float(np.vdot(noise, noise).real))


def make_mask(dims, az_drop: float, rg_drop: float, seed) -> SamplingMask:
    """Random mask keeping exactly ``round(N * (1 - drop))`` samples per axis."""
    for name, frac in (("az_drop", az_drop), ("rg_drop", rg_drop)):
        if not 0.0 <= frac < 1.0:
            raise ParameterError(f"{name} must lie in [0, 1), got {frac!r}")
    rng = np.random.default_rng(seed)
    keeps = []
    for n, frac in zip(dims, (az_drop, rg_drop)):
        n = int(n)
        kept = max(1, int(round(n * (1.0 - frac))))
        keep = np.zeros(n, dtype=bool)
        keep[rng.choice(n, size=kept, replace=False)] = True
        keeps.append(keep)
    return SamplingMask(keeps[0], keeps[1])


# dataset layout ---------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
SPLIT_NAME = "split.txt"


@dataclass(frozen=True)
class DatasetItem:
    item_id: str
    seed: int
    snr_db: float
    az_drop: float
    rg_drop: float
    kept_fraction: float
    dsr: float

    def to_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_line(cls, line: str) -> "DatasetItem":
        try:
            fields = dict(tok.split("=", 1) for tok in line.split())
            return cls(
                item_id=fields["item_id"],
                seed=int(fields["seed"]),
                snr_db=float(fields["snr_db"]),
                az_drop=float(fields["az_drop"]),
                rg_drop=float(fields["rg_drop"]),
                kept_fraction=float(fields["kept_fraction"]),
                dsr=float(fields["dsr"]),
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad manifest line {line!r}: {exc}") from exc


@dataclass
class Dataset:
    root: Path
    dims: tuple
    items: list
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def path(self, kind: str, item_id: str) -> Path:
        return self.root / kind / f"{item_id}.sphc"

    def load(self, item_id: str):
        """``(scene, label, echo, mask)`` for one item."""
        scene = read_image(self.path("scenes", item_id))
        label = read_image(self.path("labels", item_id)).real
        echo = read_image(self.path("echoes", item_id))
        mask = SamplingMask.from_indicator(read_image(self.path("masks", item_id)))
        return scene, label, echo, mask


def item_seeds(seed: int, count: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_dataset(root, plan: OperatorPlan, count: int, *, snr_db: float = 5.0,
                     az_drop: float = 0.0, rg_drop: float = 0.0, seed: int = 0,
                     split: float = 0.9, scene_spec: Optional[SceneSpec] = None) -> Dataset:
    """Write ``count`` scene/label/echo/mask items plus manifest and split."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    if not 0.0 <= split <= 1.0:
        raise ParameterError(f"split must lie in [0, 1], got {split!r}")
    root = Path(root)
    for kind in ("scenes", "labels", "echoes", "masks"):
        (root / kind).mkdir(parents=True, exist_ok=True)
    base = scene_spec or SceneSpec(dims=plan.shape)
    if tuple(base.dims) != plan.shape:
        raise DimensionError(f"scene dims {base.dims} do not match plan {plan.shape}")

    items = []
    for idx, s in enumerate(item_seeds(seed, count)):
        item_id = f"{idx:04d}"
        ss = np.random.SeedSequence(s)
        scene_seed, noise_seed, mask_seed = (int(v) for v in ss.generate_state(3))
        spec = SceneSpec(**{**asdict(base), "seed": scene_seed})
        scene, label = make_scene(spec)
        echo = add_noise(make_echo(scene, plan), snr_db, noise_seed)
        mask = make_mask(plan.shape, az_drop, rg_drop, mask_seed)
        write_image(scene, root / "scenes" / f"{item_id}.sphc")
        write_image(label, root / "labels" / f"{item_id}.sphc")
        write_image(echo, root / "echoes" / f"{item_id}.sphc")
        write_image(mask.indicator, root / "masks" / f"{item_id}.sphc")
        items.append(DatasetItem(item_id, s, float(snr_db), float(az_drop), float(rg_drop),
                                 mask.kept_fraction, mask.dsr))

    n_train = int(round(split * count))
    ids = [it.item_id for it in items]
    header = f"# dims={plan.shape[0]}x{plan.shape[1]} count={count} seed={seed}\n"
    (root / MANIFEST_NAME).write_text(header + "".join(it.to_line() + "\n" for it in items))
    (root / SPLIT_NAME).write_text(
        "".join(f"train {i}\n" for i in ids[:n_train])
        + "".join(f"test {i}\n" for i in ids[n_train:])
    )
    return Dataset(root, plan.shape, items, ids[:n_train], ids[n_train:])


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no dataset manifest at {manifest}")
    dims = None
    items = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("dims="):
                    dims = tuple(int(v) for v in tok[5:].split("x"))
            continue
        items.append(DatasetItem.from_line(line))
    if dims is None:
        raise FormatError(f"{manifest}: missing dims header")
    train, test = [], []
    split_path = root / SPLIT_NAME
    if split_path.exists():
        for line in split_path.read_text().splitlines():
            if not line.strip():
                continue
            kind, item_id = line.split()
            (train if kind == "train" else test).append(item_id)
    else:
        train = [it.item_id for it in items]
    return Dataset(root, dims, items, train, test)


__all__: Sequence[str] = (
    "SceneSpec", "make_label", "make_scene", "make_echo", "make_noise", "add_noise",
    "measured_snr_db", "make_mask", "DatasetItem", "Dataset", "generate_dataset",
    "load_dataset",
)
