"""Quantization grids (codebooks) for standard-normal data.

Builders
--------
* :func:`clvq_build` - competitive-learning VQ on N(0, I_p) samples followed by
  a batch Lloyd polish.  Works for any dimension.
* :func:`lloyd_max_1d` - deterministic scalar Lloyd-Max using exact Gaussian
  conditional means.  This is the oracle for the p = 1 case.
* :func:`build_uniform_constrained` - symmetric uniform grid whose step is
  tuned for minimal Gaussian MSE (the "CH8" style grid when n = 256).
* :func:`build_nf_grid`, :func:`build_af_grid` - the NormalFloat (equal-mass
  quantiles) and AbnormalFloat (L1-optimal) baselines.

One-dimensional grids are always stored sorted ascending, so point index
order is value order.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import solve_banded
from scipy.spatial import cKDTree
from scipy.special import ndtr, ndtri

from .errors import (
    BadMagic, BadVersion, ChecksumMismatch, ConvergenceError, InvalidArgument, Truncated,
)

GRID_MAGIC = b"HGRD"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sHIIBd")
METRICS = ("L2", "L1")

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SHARD = 1 << 16


@dataclass(frozen=True, eq=False)
class Grid:
    """An ``n``-point codebook in ``p`` dimensions."""

    points: np.ndarray
    metric: str = "L2"
    mse_per_dim: float = float("nan")
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidArgument(f"grid points must be an (n, p) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("grid points must be finite")
        if pts.shape[0] > 1:
            if pts.shape[1] == 1:
                dup = np.any(np.diff(np.sort(pts[:, 0])) <= 1e-12)
            else:
                dup = bool(cKDTree(pts).query_pairs(1e-12))
            if dup:
                raise InvalidArgument("grid points must be distinct (within 1e-12)")
        if self.metric not in METRICS:
            raise InvalidArgument(f"unknown metric {self.metric!r}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def p(self) -> int:
        return self.points.shape[1]

    def with_mse(self, mse: float, **extra) -> "Grid":
        prov = dict(self.provenance)
        prov.update(extra)
        return Grid(self.points, self.metric, float(mse), prov)

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        body = _HEADER.pack(
            GRID_MAGIC, GRID_VERSION, self.p, self.n, METRICS.index(self.metric),
            float(self.mse_per_dim),
        ) + self.points.astype("<f8").tobytes()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Grid":
        if len(data) < 4 or data[:4] != GRID_MAGIC:
            raise BadMagic("not an HGRD grid file")
        if len(data) < _HEADER.size + 4:
            raise Truncated("grid file shorter than its header")
        _, version, p, n, metric, mse = _HEADER.unpack_from(data)
        if version != GRID_VERSION:
            raise BadVersion(f"unsupported grid format version {version}")
        expected = _HEADER.size + 8 * n * p + 4
        if len(data) < expected:
            raise Truncated(f"grid file truncated: {len(data)} < {expected} bytes")
        if len(data) > expected:
            raise ChecksumMismatch("trailing bytes after grid checksum")
        (crc,) = struct.unpack_from("<I", data, expected - 4)
        if zlib.crc32(data[: expected - 4]) != crc:
            raise ChecksumMismatch("grid CRC mismatch")
        if metric >= len(METRICS):
            raise ChecksumMismatch(f"invalid metric tag {metric}")
        pts = np.frombuffer(data, dtype="<f8", count=n * p, offset=_HEADER.size).reshape(n, p)
        return cls(pts.astype(np.float64), METRICS[metric], mse, {"builder": "file"})

    def crc(self) -> int:
        """CRC-32 of the metric tag and points; binds quantized tensors to grids.

        The MSE annotation is excluded so re-estimating it keeps the binding.
        """
        tag = struct.pack("<BII", METRICS.index(self.metric), self.p, self.n)
        return zlib.crc32(tag + self.points.astype("<f8").tobytes())

    def to_json(self) -> str:
        return json.dumps(
            {
                "p": self.p,
                "n": self.n,
                "metric": self.metric,
                "mse_per_dim": self.mse_per_dim,
                "provenance": self.provenance,
                "points": self.points.tolist(),
            },
            indent=1,
        )


# ---------------------------------------------------------------------------
# nearest-point search


def nearest(grid: Grid, v) -> tuple[int, float]:
    """Brute-force nearest grid point; ties go to the lowest index.

    Returns the index and the squared Euclidean distance to that point, even
    for L1 grids (whose *selection* uses the L1 distance).
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != grid.p:
        raise InvalidArgument(f"vector has dimension {v.shape[0]}, grid has p={grid.p}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("cannot round a non-finite vector")
    diff = grid.points - v
    sq = np.einsum("ij,ij->i", diff, diff)
    score = np.abs(diff).sum(axis=1) if grid.metric == "L1" else sq
    idx = int(np.argmin(score))
    return idx, float(sq[idx])


def nearest_many(points: np.ndarray, x: np.ndarray, metric: str = "L2", *, fast: bool = False) -> np.ndarray:
    """Vectorized nearest-point indices for the rows of ``x``.

    With ``fast=False`` distances are formed explicitly so ties resolve to the
    lowest index exactly as in :func:`nearest`.  ``fast=True`` uses the
    k-d tree, which is much quicker for large Monte-Carlo batches but may
    break exact ties differently.
    """
    points = np.asarray(points, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, p = points.shape
    out = np.empty(x.shape[0], dtype=np.int64)
    if p == 1 and n > 1 and np.all(np.diff(points[:, 0]) > 0):
        # sorted 1-D grid: for L1 and L2 alike the cells are split at midpoints
        mids = 0.5 * (points[1:, 0] + points[:-1, 0])
        out[:] = np.searchsorted(mids, x[:, 0], side="left")
        return out
    chunk = max(1, (1 << 22) // max(n * p, 1))
    if fast and metric == "L2" and n > 16:
        out[:] = cKDTree(points).query(x)[1]
        return out
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - points[None, :, :]
        if metric == "L1":
            score = np.abs(diff).sum(axis=2)
        else:
            score = np.einsum("ijk,ijk->ij", diff, diff)
        out[s : s + chunk] = np.argmin(score, axis=1)
    return out


# ---------------------------------------------------------------------------
# exact 1-D Gaussian cell integrals


def _pdf(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", under="ignore"):
        return np.where(np.isfinite(x), np.exp(-0.5 * x * x) / _SQRT_2PI, 0.0)


def _xpdf(x):
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    xf = np.where(finite, x, 0.0)
    return np.where(finite, xf * _pdf(xf), 0.0)


def _mass(lo, hi):
    # upper-tail cells use the mirrored CDF to avoid cancellation near 1
    upper = ndtr(-lo) - ndtr(-hi)
    lower = ndtr(hi) - ndtr(lo)
    return np.where(lo > 0, upper, lower)


def _cell_edges(points_1d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mids = 0.5 * (points_1d[1:] + points_1d[:-1])
    lo = np.concatenate(([-np.inf], mids))
    hi = np.concatenate((mids, [np.inf]))
    return lo, hi


def gaussian_mse_1d(points) -> float:
    """Exact E[(Z - q(Z))^2] for Z ~ N(0,1) and nearest rounding to ``points``."""
    pts = np.sort(np.asarray(points, dtype=np.float64).reshape(-1))
    lo, hi = _cell_edges(pts)
    mass = _mass(lo, hi)
    first = _pdf(lo) - _pdf(hi)
    second = mass + _xpdf(lo) - _xpdf(hi)
    return float(np.sum(second - 2.0 * pts * first + pts * pts * mass))


def gaussian_l1_error_1d(points) -> float:
    """Exact E|Z - q(Z)| for Z ~ N(0,1) and nearest rounding to ``points``."""
    pts = np.sort(np.asarray(points, dtype=np.float64).reshape(-1))
    lo, hi = _cell_edges(pts)

    def part(a, b, c, sign):
        # integral over (a, b) of sign * (z - c) * pdf(z)
        mass = _mass(a, b)
        return sign * ((_pdf(a) - _pdf(b)) - c * mass)

    return float(np.sum(part(lo, pts, pts, -1.0) + part(pts, hi, pts, 1.0)))


def _check_n(n: int, minimum: int = 1) -> None:
    if int(n) != n or n < minimum:
        raise InvalidArgument(f"grid size n must be an integer >= {minimum}, got {n}")


def _centroids(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = _cell_edges(pts)
    mass = _mass(lo, hi)
    return (_pdf(lo) - _pdf(hi)) / mass, lo, hi, mass


def _newton_step(pts: np.ndarray) -> np.ndarray:
    """One Newton step on ``centroid(x) - x = 0`` (tridiagonal Jacobian)."""
    c, lo, hi, mass = _centroids(pts)
    da = _pdf(lo) * (c - np.where(np.isfinite(lo), lo, 0.0)) / mass
    db = _pdf(hi) * (np.where(np.isfinite(hi), hi, 0.0) - c) / mass
    n = pts.shape[0]
    # d c_i / d x_{i-1} = da/2, d c_i / d x_i = (da + db)/2, d c_i / d x_{i+1} = db/2
    ab = np.zeros((3, n))
    ab[0, 1:] = 0.5 * db[:-1]
    ab[1, :] = 0.5 * (da + db) - 1.0
    ab[2, :-1] = 0.5 * da[1:]
    return solve_banded((1, 1), ab, -(c - pts))


def lloyd_max_1d(n: int, tol: float = 1e-12, max_iters: int = 10_000) -> Grid:
    """MSE-optimal scalar quantizer of N(0, 1) by exact Lloyd-Max iteration.

    Plain Lloyd steps are slow to settle for large ``n``; once they stall the
    fixed point is finished with safeguarded Newton steps on the same
    centroid condition.
    """
    _check_n(n)
    pts = ndtri((np.arange(n) + 0.5) / n)
    it = 0
    move = np.inf
    for it in range(1, min(max_iters, 500) + 1):
        new = _centroids(pts)[0]
        move = np.max(np.abs(new - pts))
        pts = new
        if move < tol:
            break
    while move >= tol and it < max_iters:
        it += 1
        step = _newton_step(pts)
        scale = 1.0
        while scale > 1e-6 and np.any(np.diff(pts + scale * step) <= 0):
            scale *= 0.5
        pts = pts + scale * step
        new = _centroids(pts)[0]
        move = np.max(np.abs(new - pts))
        pts = new
    if move >= tol:
        raise ConvergenceError(f"Lloyd-Max did not reach tol={tol} for n={n} in {max_iters} iterations")
    if n % 2 == 1:
        pts[n // 2] = 0.0
    pts = 0.5 * (pts - pts[::-1])
    return Grid(
        pts, "L2", gaussian_mse_1d(pts),
        {"builder": "lloydmax", "n": n, "tol": tol, "iterations": it},
    )


def _golden_section(f, a: float, b: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def uniform_points(n: int, step: float) -> np.ndarray:
    return step * (np.arange(n) - (n - 1) / 2.0)


def build_uniform_constrained(n: int, tol: float = 1e-10) -> Grid:
    """Symmetric uniform grid with the Gaussian-MSE-optimal step."""
    _check_n(n, 2)
    mse = lambda c: gaussian_mse_1d(uniform_points(n, c))
    # the clipping range of a useful grid never exceeds +-9 sigma
    hi = 18.0 / (n - 1)
    scan = np.linspace(hi / 400, hi, 400)
    k = int(np.argmin([mse(c) for c in scan]))
    a = scan[max(k - 1, 0)] if k > 0 else scan[0] / 2
    b = scan[min(k + 1, len(scan) - 1)]
    step = _golden_section(mse, a, b, tol)
    pts = uniform_points(n, step)
    return Grid(pts, "L2", mse(step), {"builder": "uniform", "n": n, "step": step})


def build_nf_grid(n: int) -> Grid:
    """Equal-probability-mass quantile grid (NormalFloat construction)."""
    _check_n(n)
    pts = ndtri((np.arange(n) + 0.5) / n)
    pts = 0.5 * (pts - pts[::-1])
    return Grid(pts, "L2", gaussian_mse_1d(pts), {"builder": "nf", "n": n})


def build_af_grid(n: int, tol: float = 1e-12, max_iters: int = 200_000) -> Grid:
    """L1-optimal scalar grid: centroids are conditional medians of N(0, 1)."""
    _check_n(n)
    pts = ndtri((np.arange(n) + 0.5) / n)
    it = 0
    for it in range(1, max_iters + 1):
        lo, hi = _cell_edges(pts)
        new = ndtri(0.5 * (ndtr(lo) + ndtr(hi)))
        move = np.max(np.abs(new - pts))
        pts = new
        if move < tol:
            break
    pts = 0.5 * (pts - pts[::-1])
    return Grid(
        pts, "L1", gaussian_mse_1d(pts),
        {"builder": "af", "n": n, "tol": tol, "iterations": it,
         "l1_error": gaussian_l1_error_1d(pts)},
    )


# ---------------------------------------------------------------------------
# Monte-Carlo machinery


def _shard_samples(seed: int, shard: int, size: int, p: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(shard)]))
    return rng.standard_normal((size, p))


def _shard_sums(points, metric, seed, shard, size, p):
    z = _shard_samples(seed, shard, size, p)
    idx = nearest_many(points, z, metric, fast=(metric == "L2"))
    err = np.sum((z - points[idx]) ** 2, axis=1) / p
    return float(err.sum()), float(np.sum(err * err))


def estimate_grid_mse(grid: Grid, sample_count: int = 1_000_000, seed: int = 0,
                      workers: int = 1) -> tuple[float, float]:
    """Monte-Carlo per-dimension MSE of rounding N(0, I_p) to ``grid``.

    Samples are drawn in fixed shards of 65536 with per-shard derived seeds,
    so the estimate does not depend on ``workers``.  Returns the mean and its
    standard error.
    """
    if sample_count < 1000:
        raise InvalidArgument("sample_count must be at least 1000")
    sizes = [min(_SHARD, sample_count - s) for s in range(0, sample_count, _SHARD)]
    args = [(grid.points, grid.metric, seed, i, size, grid.p) for i, size in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _shard_sums(*a), args))
    else:
        parts = [_shard_sums(*a) for a in args]
    total = math.fsum(s for s, _ in parts)
    total_sq = math.fsum(q for _, q in parts)
    m = sample_count
    mean = total / m
    var = max(total_sq / m - mean * mean, 0.0) * m / (m - 1)
    return mean, math.sqrt(var / m)


def grid_mse(grid: Grid, sample_count: int = 1 << 20, seed: int = 0) -> float:
    """Exact integral for p = 1, Monte-Carlo otherwise."""
    if grid.p == 1 and grid.metric == "L2":
        return gaussian_mse_1d(grid.points)
    if grid.p == 1:
        # L1 cells are midpoint-split in 1-D as well
        return gaussian_mse_1d(grid.points)
    return estimate_grid_mse(grid, sample_count, seed)[0]


def lloyd_refine(grid: Grid, sample_count: int | None = None, max_iters: int = 50,
                 tol: float = 1e-7, seed: int = 0) -> Grid:
    """Batch Lloyd iterations on one fixed N(0, I_p) sample.

    Empty cells are re-seeded at the samples with the largest current
    distortion, so the build never aborts.  The per-iteration distortion
    history is stored in ``provenance["lloyd_history"]``.
    """
    n, p = grid.n, grid.p
    m = sample_count if sample_count is not None else 4096 * n
    if m < 10 * n:
        raise InvalidArgument(f"sample_count must be >= 10 n = {10 * n}")
    z = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4C4C])).standard_normal((m, p))
    pts = np.array(grid.points)
    history: list[float] = []
    for _ in range(max_iters):
        idx = nearest_many(pts, z, "L2", fast=True)
        err = np.sum((z - pts[idx]) ** 2, axis=1)
        dist = float(err.mean()) / p
        history.append(dist)
        if len(history) > 1 and history[-2] - dist <= tol * history[-2]:
            break
        counts = np.bincount(idx, minlength=n)
        sums = np.stack([np.bincount(idx, z[:, k], n) for k in range(p)], axis=1)
        new = pts.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            worst = np.argsort(err, kind="stable")[::-1][: empty.size]
            new[empty] = z[worst]
        pts = new
    if p == 1:
        pts = np.sort(pts, axis=0)
    prov = dict(grid.provenance)
    prov.update({"lloyd_samples": m, "lloyd_tol": tol, "lloyd_history": history})
    return Grid(pts, grid.metric, grid.mse_per_dim, prov)


def clvq_build(p: int, n: int, seed: int = 0, steps: int | None = None,
               schedule: tuple[float, float] | None = None, *,
               refine: bool = True, refine_samples: int | None = None,
               refine_iters: int | None = None, refine_tol: float = 1e-7,
               coarse_iters: int = 300, mse_samples: int = 1 << 20) -> Grid:
    """Competitive-learning VQ grid for N(0, I_p), polished by Lloyd.

    Each step draws ``z`` and moves the nearest point toward it by
    ``a / (b + t)``; defaults are ``a = 1``, ``b = n`` and ``200 n`` steps.
    The polish runs Lloyd first on a small sample (``256 n`` draws) where
    iterations are cheap, then on the full ``refine_samples`` sample
    (default ``4096 n``).  Unless given, the full-sample iteration cap
    scales down with the per-iteration cost (200 for small grids, 20 for the
    2-D 256-point grid).
    """
    _check_n(n)
    if int(p) != p or p < 1:
        raise InvalidArgument(f"grid dimension p must be >= 1, got {p}")
    steps = 200 * n if steps is None else int(steps)
    if steps < n:
        raise InvalidArgument(f"steps must be >= n ({n}), got {steps}")
    a, b = schedule if schedule is not None else (1.0, float(n))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC17C]))
    pts = rng.standard_normal((n, p))
    z = rng.standard_normal((steps, p))
    for t in range(steps):
        diff = pts - z[t]
        k = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        pts[k] -= (a / (b + t)) * diff[k]
    if p == 1:
        pts = np.sort(pts, axis=0)
    prov = {"builder": "clvq", "p": p, "n": n, "seed": int(seed), "steps": steps,
            "schedule": [a, b]}
    grid = Grid(pts, "L2", float("nan"), prov)
    if refine:
        m = refine_samples if refine_samples is not None else 4096 * n
        if refine_iters is None:
            refine_iters = int(np.clip((1 << 31) // (m * n), 20, 200))
        coarse = lloyd_refine(grid, max(256 * n, 10 * n), coarse_iters, refine_tol, int(seed) + 2)
        grid = lloyd_refine(coarse, m, refine_iters, refine_tol, seed)
        grid.provenance["coarse_history"] = coarse.provenance["lloyd_history"]
    if p == 1:
        return grid.with_mse(gaussian_mse_1d(grid.points))
    mse, se = estimate_grid_mse(grid, mse_samples, seed=int(seed) + 1)
    return grid.with_mse(mse, mse_stderr=se)


def zero_grid(p: int = 1) -> Grid:
    """The single-point grid {0}: every vector rounds to zero (t^2 = 1)."""
    return Grid(np.zeros((1, p)), "L2", 1.0, {"builder": "zero", "p": p})


BUILDERS = ("clvq", "lloydmax", "uniform", "nf", "af")


def build_grid(builder: str, p: int, n: int, seed: int = 0) -> Grid:
    """Dispatch by builder name; only CLVQ supports p > 1."""
    if builder not in BUILDERS:
        raise InvalidArgument(f"unknown builder {builder!r}; choose from {BUILDERS}")
    if builder != "clvq" and p != 1:
        raise InvalidArgument(f"builder {builder!r} only produces 1-D grids")
    if builder == "clvq":
        return clvq_build(p, n, seed)
    if builder == "lloydmax":
        return lloyd_max_1d(n)
    if builder == "uniform":
        return build_uniform_constrained(n)
    if builder == "nf":
        return build_nf_grid(n)
    return build_af_grid(n)
