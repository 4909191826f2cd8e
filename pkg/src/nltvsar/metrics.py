"""Image-quality indices for despeckled SAR magnitudes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import DataError, DimensionError, ParameterError

ENL_COEF = 0.5227
MIN_REGION_AREA = 16
CSV_COLUMNS = ("scene_id", "method", "ENL", "gamma_dB", "ESI", "PSNR_dB", "SSIM",
               "PSNR_conv_dB", "time_s")


@dataclass(frozen=True)
class Region:
    row: int
    col: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def check(self, shape) -> None:
        if self.row < 0 or self.col < 0 or self.height < 1 or self.width < 1:
            raise ParameterError(f"invalid region {self}")
        if self.row + self.height > shape[0] or self.col + self.width > shape[1]:
            raise ParameterError(f"region {self} exceeds image {shape}")
        if self.area < MIN_REGION_AREA:
            raise ParameterError(f"region area {self.area} below {MIN_REGION_AREA}")

    def take(self, img: np.ndarray) -> np.ndarray:
        img = np.abs(np.asarray(img))
        self.check(img.shape)
        return img[self.row:self.row + self.height, self.col:self.col + self.width]


def _stats(img, reg: Region):
    vals = reg.take(img).astype(np.float64)
    return float(vals.mean()), float(vals.std())


def enl(img, reg: Region) -> float:
    """Equivalent number of looks; ``inf`` for a constant region."""
    mu, sigma = _stats(img, reg)
    if sigma == 0.0:
        return math.inf
    return (ENL_COEF * mu / sigma) ** 2


def radiometric_resolution(img, reg: Region) -> float:
    """Radiometric resolution in dB."""
    mu, sigma = _stats(img, reg)
    if mu <= 0.0:
        raise DataError("radiometric resolution undefined for a zero-mean region")
    return 10.0 * math.log10((ENL_COEF * mu + sigma) / (ENL_COEF * mu))


def _pair(recon, label):
    a = np.abs(np.asarray(recon)).astype(np.float64)
    b = np.abs(np.asarray(label)).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _edge_sum(x: np.ndarray) -> float:
    dv = x[:-1, :-1] - x[1:, :-1]
    dh = x[:-1, :-1] - x[:-1, 1:]
    return float(np.sqrt(dv**2 + dh**2).sum())


def esi(recon, label) -> float:
    """Edge saving index: summed gradient magnitude, recon over label."""
    a, b = _pair(recon, label)
    den = _edge_sum(b)
    if den == 0.0:
        raise DataError("label has no gradient")
    return _edge_sum(a) / den


def psnr(recon, label) -> float:
    """Peak of the reconstruction over the un-normalised squared error."""
    a, b = _pair(recon, label)
    err = float(np.sum((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.max(a**2)) / err)


def psnr_conventional(recon, label) -> float:
    """Usual PSNR: label peak over the mean squared error."""
    a, b = _pair(recon, label)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.max(b**2)) / mse)


def _unit_range(x: np.ndarray) -> np.ndarray:
    peak = float(x.max())
    return x / peak if peak > 0 else x


def ssim(recon, label, dynamic_range: float = 1.0) -> float:
    """Single-window SSIM of the two max-normalised magnitudes."""
    a, b = _pair(recon, label)
    a, b = _unit_range(a), _unit_range(b)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = float(np.mean((a - mu_a) * (b - mu_b)))
    return float(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                 / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))


def find_uniform_region(label, margin: int = 3, min_area: int = 64) -> Region:
    """Largest axis-aligned rectangle of constant label value, shrunk by ``margin``.

    The shrink keeps the region clear of edge blur so it measures speckle
    rather than structure.
    """
    lab = np.asarray(label)
    rows, cols = lab.shape
    best = None
    best_area = 0
    for value in np.unique(lab):
        hist = np.zeros(cols, dtype=np.int64)
        for r in range(rows):
            hist = np.where(lab[r] == value, hist + 1, 0)
            stack = []
            for c in range(cols + 1):
                h = hist[c] if c < cols else 0
                start = c
                while stack and stack[-1][1] >= h:
                    start, sh = stack.pop()
                    area = sh * (c - start)
                    if area > best_area:
                        best_area = area
                        best = (r - sh + 1, start, sh, c - start)
                stack.append((start, h))
    if best is None:
        raise DataError("label has no uniform region")
    r0, c0, h, w = best
    h2, w2 = h - 2 * margin, w - 2 * margin
    if h2 * w2 < max(min_area, MIN_REGION_AREA) or h2 < 1 or w2 < 1:
        raise DataError(f"largest uniform region {h}x{w} too small after margin {margin}")
    return Region(r0 + margin, c0 + margin, h2, w2)


def evaluate(recon, label, reg: Optional[Region]) -> dict:
    """All metrics for one scene; region metrics are NaN when ``reg`` is None."""
    mag = np.abs(np.asarray(recon))
    out = {
        "ENL": enl(mag, reg) if reg is not None else math.nan,
        "gamma_dB": radiometric_resolution(mag, reg) if reg is not None else math.nan,
        "PSNR_dB": psnr(mag, label),
        "SSIM": ssim(mag, label),
        "PSNR_conv_dB": psnr_conventional(mag, label),
    }
    try:
        out["ESI"] = esi(mag, label)
    except DataError:
        out["ESI"] = math.nan
    return out


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def aggregate(rows: Iterable[dict]) -> dict:
    """Mean of each numeric column over finite entries."""
    rows = list(rows)
    out = {}
    for col in CSV_COLUMNS[2:]:
        vals = [float(r[col]) for r in rows if col in r and math.isfinite(float(r[col]))]
        out[col] = float(np.mean(vals)) if vals else math.nan
    return out


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_COLUMNS)
        for r in rows:
            out.writerow([_fmt(r.get(c, math.nan)) for c in CSV_COLUMNS])
