"""Nonlocal TV machinery and the two proximal maps used by the solver.

Weights live on a sparse directed graph stored as parallel edge arrays
sorted by ``src * n + dst``. Every edge has its reverse in the graph,
so ``rev[e]`` indexes the opposite direction and the stored weights are
symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .core import DimensionError, ParameterError


@dataclass(frozen=True)
class NLTVConfig:
    patch_size: int = 5
    search_radius: int = 7
    filter_h: Optional[float] = None
    gaussian_sigma: float = 1.5
    neighbors_kept: int = 10
    h_factor: float = 1.0

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ParameterError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.search_radius < 1:
            raise ParameterError("search_radius must be >= 1")
        if self.filter_h is not None and not (math.isfinite(self.filter_h) and self.filter_h > 0):
            raise ParameterError(f"filter_h must be positive, got {self.filter_h!r}")
        if not self.gaussian_sigma > 0:
            raise ParameterError("gaussian_sigma must be positive")
        if not (math.isfinite(self.h_factor) and self.h_factor > 0):
            raise ParameterError("h_factor must be positive")
        window = (2 * self.search_radius + 1) ** 2 - 1
        if not 1 <= self.neighbors_kept <= window:
            raise ParameterError(f"neighbors_kept must lie in [1, {window}]")

    def patch_kernel(self) -> np.ndarray:
        """Separable 1-D Gaussian whose outer product sums to one."""
        half = self.patch_size // 2
        g = np.exp(-0.5 * (np.arange(-half, half + 1) / self.gaussian_sigma) ** 2)
        return g / g.sum()


@dataclass(frozen=True)
class NLWeights:
    shape: tuple
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    rev: np.ndarray

    def __post_init__(self):
        n = self.shape[0] * self.shape[1]
        indptr = np.searchsorted(self.src, np.arange(n + 1))
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "_sqrt_w", np.sqrt(self.weight))

    @property
    def n_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_edges(self) -> int:
        return self.src.size

    @property
    def keys(self) -> np.ndarray:
        return self.src * self.n_pixels + self.dst

    @property
    def sqrt_weight(self) -> np.ndarray:
        return self._sqrt_w

    def neighbors(self, pixel: int) -> list:
        """(neighbour index, weight) pairs stored for one flat pixel index."""
        lo, hi = np.searchsorted(self.src, [pixel, pixel + 1])
        return list(zip(self.dst[lo:hi].tolist(), self.weight[lo:hi].tolist()))

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.weight, minlength=self.n_pixels)

    def norm_bound(self) -> float:
        """Upper bound on the squared operator norm of the NL gradient."""
        if self.n_edges == 0:
            return 0.0
        d = self.degree()
        return float(2.0 * np.max(d[self.src] + d[self.dst]))


@dataclass(frozen=True)
class DualField:
    """Per-edge dual variables tagged with the edge keys they belong to."""

    keys: np.ndarray
    values: np.ndarray

    @classmethod
    def zeros(cls, w: NLWeights) -> "DualField":
        return cls(w.keys, np.zeros(w.n_edges))

    def remap(self, w: NLWeights) -> "DualField":
        """Carry values over to a new graph; edges without a match start at 0."""
        keys = w.keys
        if keys.size == self.keys.size and np.array_equal(keys, self.keys):
            return self
        out = np.zeros(keys.size)
        if self.keys.size:
            pos = np.searchsorted(self.keys, keys)
            pos = np.minimum(pos, self.keys.size - 1)
            hit = self.keys[pos] == keys
            out[hit] = self.values[pos[hit]]
        return DualField(keys, out)


@numba.njit(cache=True, nogil=True)
def _knn_weights(padded, rows, cols, sr, g1, k, inv2h2):
    hp = g1.shape[0] // 2
    n = rows * cols
    bd = np.full((n, k), np.inf)
    bj = np.full((n, k), -1, np.int64)
    worst = np.zeros(n, np.int64)
    maxval = np.full(n, np.inf)
    hh = rows + 2 * hp
    ww = cols + 2 * hp
    d2 = np.empty((hh, ww))
    tmp = np.empty((hh, cols))
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            if dy == 0 and dx == 0:
                continue
            r0 = max(0, -dy)
            r1 = min(rows, rows - dy)
            c0 = max(0, -dx)
            c1 = min(cols, cols - dx)
            if r0 >= r1 or c0 >= c1:
                continue
            for a in range(hh):
                for b in range(ww):
                    t = padded[a + sr, b + sr] - padded[a + sr + dy, b + sr + dx]
                    d2[a, b] = t * t
            for a in range(hh):
                for c in range(cols):
                    s = 0.0
                    for v in range(g1.shape[0]):
                        s += g1[v] * d2[a, c + v]
                    tmp[a, c] = s
            for r in range(r0, r1):
                for c in range(c0, c1):
                    s = 0.0
                    for u in range(g1.shape[0]):
                        s += g1[u] * tmp[r + u, c]
                    i = r * cols + c
                    if s < maxval[i]:
                        m = worst[i]
                        bd[i, m] = s
                        bj[i, m] = (r + dy) * cols + c + dx
                        mv = bd[i, 0]
                        mp = 0
                        for q in range(1, k):
                            if bd[i, q] > mv:
                                mv = bd[i, q]
                                mp = q
                        maxval[i] = mv
                        worst[i] = mp
    bw = np.where(bj >= 0, np.exp(-bd * inv2h2), -1.0)
    return bj, bw


@numba.njit(cache=True, nogil=True)
def _symmetrize(bj, bw):
    """Union of the k-NN lists with their reverses, as CSR sorted by (src, dst)."""
    n, k = bj.shape
    own = np.zeros(n, np.int64)
    count = np.zeros(n + 1, np.int64)
    for i in range(n):
        for q in range(k):
            j = bj[i, q]
            if j >= 0:
                own[i] += 1
                count[i + 1] += 1
                count[j + 1] += 1
    ptr = np.cumsum(count)
    cand = np.empty(ptr[-1], np.int64)
    cw = np.empty(ptr[-1])
    # each row holds its own sorted list, then the reverse entries (ascending in i)
    fill = ptr[:-1] + own
    for i in range(n):
        lo = ptr[i]
        t = lo
        for q in range(k):
            j = bj[i, q]
            if j >= 0:
                wj = bw[i, q]
                b = t - 1
                while b >= lo and cand[b] > j:
                    cand[b + 1] = cand[b]
                    cw[b + 1] = cw[b]
                    b -= 1
                cand[b + 1] = j
                cw[b + 1] = wj
                t += 1
                cand[fill[j]] = i
                cw[fill[j]] = wj
                fill[j] += 1
    # merge the two sorted runs of each row, dropping duplicates
    # (patch distance is symmetric, so duplicate weights agree)
    m = 0
    for i in range(n):
        m = max(m, ptr[i + 1] - ptr[i])
    rc = np.empty(m, np.int64)
    rw = np.empty(m)
    indptr = np.zeros(n + 1, np.int64)
    out = 0
    for i in range(n):
        lo, hi = ptr[i], ptr[i + 1]
        size = hi - lo
        rc[:size] = cand[lo:hi]
        rw[:size] = cw[lo:hi]
        a, b, mid = 0, own[i], own[i]
        last = -1
        while a < mid or b < size:
            if b >= size or (a < mid and rc[a] <= rc[b]):
                j, wj = rc[a], rw[a]
                a += 1
            else:
                j, wj = rc[b], rw[b]
                b += 1
            if j != last:
                cand[out] = j
                cw[out] = max(wj, 2.2250738585072014e-308)
                out += 1
                last = j
        indptr[i + 1] = out
    dst = cand[:out].copy()
    wgt = cw[:out].copy()
    src = np.empty(out, np.int64)
    for i in range(n):
        src[indptr[i]:indptr[i + 1]] = i
    # edges come in increasing src order, so each row's reverse slots fill in order
    cursor = indptr[:-1].copy()
    rev = np.empty(out, np.int64)
    for e in range(out):
        j = dst[e]
        rev[e] = cursor[j]
        cursor[j] += 1
    return src, dst, wgt, rev


def estimate_filter_h(guide: np.ndarray) -> float:
    """Noise level of ``guide`` from the MAD of a discrete Laplacian."""
    g = np.asarray(guide, dtype=np.float64)
    if min(g.shape) < 3:
        sigma = float(np.std(g))
    else:
        lap = (4.0 * g[1:-1, 1:-1] - g[:-2, 1:-1] - g[2:, 1:-1]
               - g[1:-1, :-2] - g[1:-1, 2:])
        sigma = float(np.median(np.abs(lap - np.median(lap)))) / 0.6745 / math.sqrt(20.0)
    if not sigma > 0:
        sigma = float(np.std(g))
    return sigma if sigma > 0 else 1.0


def compute_weights(guide: np.ndarray, cfg: NLTVConfig = NLTVConfig()) -> NLWeights:
    """Sparse symmetric patch-similarity weights of a magnitude image.

    Each pixel keeps its ``neighbors_kept`` most similar neighbours in the
    search window; the graph is then symmetrised by union.
    """
    g = np.asarray(guide)
    if np.iscomplexobj(g):
        raise ParameterError("guide must be real")
    g = g.astype(np.float64)
    if g.ndim != 2:
        raise DimensionError(f"guide must be 2-D, got shape {g.shape}")
    rows, cols = g.shape
    if rows < cfg.patch_size or cols < cfg.patch_size:
        raise DimensionError(f"guide {g.shape} smaller than patch size {cfg.patch_size}")
    if not np.all(np.isfinite(g)):
        raise ParameterError("guide contains non-finite values")
    if np.any(g < 0):
        raise ParameterError("guide must be nonnegative")

    if cfg.filter_h is not None:
        h = cfg.filter_h
    else:
        h = cfg.h_factor * estimate_filter_h(g)
    g1 = cfg.patch_kernel()
    pad = cfg.search_radius + cfg.patch_size // 2
    padded = np.pad(g, pad, mode="symmetric")
    k = min(cfg.neighbors_kept, rows * cols - 1)
    bj, bw = _knn_weights(padded, rows, cols, cfg.search_radius, g1, k,
                          1.0 / (2.0 * h * h))

    src, dst, wgt, rev = _symmetrize(bj, bw)
    return NLWeights(shape=(rows, cols), src=src, dst=dst, weight=wgt, rev=rev)


def _check_grid(arr, w: NLWeights, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != w.shape:
        raise DimensionError(f"{what} shape {arr.shape} does not match weights {w.shape}")
    return arr


def nl_gradient(mag: np.ndarray, w: NLWeights) -> np.ndarray:
    """Edge field ``sqrt(w_ij) * (u_i - u_j)``."""
    u = _check_grid(mag, w, "image").ravel()
    return w.sqrt_weight * (u[w.src] - u[w.dst])


def nl_divergence(field: np.ndarray, w: NLWeights) -> np.ndarray:
    """Negative adjoint of :func:`nl_gradient`."""
    p = np.asarray(field, dtype=np.float64)
    if p.shape != (w.n_edges,):
        raise DimensionError(f"field has {p.shape} entries, weights have {w.n_edges} edges")
    flux = w.sqrt_weight * (p[w.rev] - p)
    return np.bincount(w.src, weights=flux, minlength=w.n_pixels).reshape(w.shape)


def _pixel_norm(field: np.ndarray, w: NLWeights) -> np.ndarray:
    return np.sqrt(np.bincount(w.src, weights=field * field, minlength=w.n_pixels))


@numba.njit(cache=True, nogil=True)
def _chambolle_step(indptr, dst, rev, sw, scaled, p, tau, div):
    n = indptr.size - 1
    for i in range(n):
        s = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            s += sw[e] * (p[rev[e]] - p[e])
        div[i] = s - scaled[i]
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        nrm = 0.0
        for e in range(lo, hi):
            g = sw[e] * (div[i] - div[dst[e]])
            nrm += g * g
            p[e] += tau * g
        den = 1.0 + tau * np.sqrt(nrm)
        for e in range(lo, hi):
            p[e] /= den


def nltv_energy(mag: np.ndarray, w: NLWeights) -> float:
    """Isotropic nonlocal TV: sum over pixels of the gradient's edge norm."""
    return float(_pixel_norm(nl_gradient(mag, w), w).sum())


def nltv_objective(z: np.ndarray, v: np.ndarray, lambda_nltv: float, w: NLWeights) -> float:
    z = np.asarray(z, dtype=np.float64)
    return lambda_nltv * nltv_energy(z, w) + 0.5 * float(np.sum((z - v) ** 2))


def nltv_prox(v, lambda_nltv: float, tau: float, p_init, w: NLWeights,
              inner_iters: int = 10, history: Optional[list] = None):
    """Chambolle's dual projection for the nonlocal ROF problem.

    Minimises ``lambda * NLTV(z) + 0.5 * ||z - v||**2``. Real input is
    denoised as is; complex input is denoised on its modulus and the
    phase is put back. ``p_init`` is a :class:`DualField` (or None) for
    warm starts; the final dual field is returned alongside ``z``.
    When ``history`` is a list, the primal objective after every inner
    iteration is appended to it.
    """
    if inner_iters < 1:
        raise ParameterError("inner_iters must be >= 1")
    if not (math.isfinite(lambda_nltv) and lambda_nltv >= 0):
        raise ParameterError(f"lambda_nltv must be >= 0, got {lambda_nltv!r}")
    vv = np.asarray(v)
    if vv.shape != w.shape:
        raise DimensionError(f"input shape {vv.shape} does not match weights {w.shape}")
    bound = w.norm_bound()
    if not (tau > 0 and tau * bound < 1.0 + 1e-12):
        raise ParameterError(f"tau={tau!r} outside (0, 1/{bound:.4g})")

    phase = None
    if np.iscomplexobj(vv):
        f = np.abs(vv)
        phase = np.exp(1j * np.angle(vv))
    else:
        f = vv.astype(np.float64)

    p = DualField.zeros(w) if p_init is None else p_init.remap(w)
    if lambda_nltv == 0.0 or w.n_edges == 0:
        return (vv.copy() if phase is not None else f.copy()), p

    pv = p.values.copy()
    scaled = np.ascontiguousarray((f / lambda_nltv).ravel())
    buf = np.empty(w.n_pixels)
    for _ in range(inner_iters):
        _chambolle_step(w.indptr, w.dst, w.rev, w.sqrt_weight, scaled, pv, float(tau), buf)
        if history is not None:
            history.append(nltv_objective(f - lambda_nltv * nl_divergence(pv, w),
                                          f, lambda_nltv, w))
    z = f - lambda_nltv * nl_divergence(pv, w)
    out = z * phase if phase is not None else z
    return out, DualField(p.keys, pv)


def gmc_threshold(b, delta: float, theta: float):
    """Firm threshold: zero below ``delta``, identity above ``theta*delta``.

    Real input keeps its sign, complex input its phase. ``delta == 0``
    is the identity and ``theta == inf`` gives soft thresholding.
    """
    if math.isnan(theta) or theta <= 1.0:
        raise ParameterError(f"theta must be > 1, got {theta!r}")
    if math.isnan(delta) or delta < 0:
        raise ParameterError(f"delta must be >= 0, got {delta!r}")
    b = np.asarray(b)
    if delta == 0.0:
        return b.copy()
    mag = np.abs(b)
    r1 = np.maximum(mag - delta, 0.0)
    if math.isinf(theta):
        shrunk = r1
    else:
        r2 = np.maximum(mag - theta * delta, 0.0)
        shrunk = r1 * (theta * delta + r2) / ((theta - 1.0) * delta + r2)
    if np.iscomplexobj(b):
        unit = np.divide(b, mag, out=np.zeros_like(b), where=mag > 0)
        return shrunk * unit
    return np.sign(b) * shrunk


def gmc_penalty(x, b_weight: float) -> float:
    """Scalar-B GMC penalty summed over ``x``.

    Per entry this is the minimax-concave function: ``|x| - B**2 x**2 / 2``
    up to ``|x| = 1/B**2`` and the constant ``1/(2 B**2)`` beyond.
    """
    a = np.abs(np.asarray(x, dtype=np.float64))
    b2 = float(b_weight) ** 2
    if b2 == 0.0:
        return float(a.sum())
    knee = 1.0 / b2
    vals = np.where(a <= knee, a - 0.5 * b2 * a * a, 0.5 * knee)
    return float(vals.sum())
