"""RHT vector quantization of flat weight tensors.

Encoding: split the tensor into groups of
``g`` consecutive values, normalize each group to unit L2 norm, rotate it with
the seeded Hadamard transform (entries become roughly N(0, 1)), then round
consecutive ``p``-chunks of the rotated values to the nearest grid point.

Stored scales are ``||w_group|| / sqrt(g)``.  Chunking runs contiguously over
the whole rotated tensor; when ``p`` does not divide ``D`` the last chunk is
zero padded and ``pad_len`` records how many padded slots to drop.

HQTZ container (little-endian)::

    "HQTZ"  u16 version  u8 rank  rank * u64 dims  u64 D  u32 g  u16 p
    u32 n  u8 scale_bits  u16 pad_len  u64 seed  u32 grid_crc
    scales block     D/g values as float16/32/64 (scale_bits)
    index block      ceil(D/p) codes, ceil(log2 n) bits each, LSB-first
    u32 CRC-32 of everything above

Codes are 0-based.  A lossless tensor (debug mode, rounding bypassed) is
written with ``n = 0`` and its index block holds ``D`` float64 rotated values.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagic, BadVersion, ChecksumMismatch, CorruptionError, InvalidArgument, Truncated,
)
from .grids import Grid, nearest_many
from .hadamard import is_power_of_two, rht_forward, rht_inverse

QTZ_MAGIC = b"HQTZ"
QTZ_VERSION = 1
_SCALE_DTYPES = {16: "<f2", 32: "<f4", 64: "<f8"}
_HEAD_A = struct.Struct("<4sHB")
_HEAD_B = struct.Struct("<QIHIBHQI")


def code_bits(n: int) -> int:
    """Bits per stored index: ceil(log2 n), zero for a single-point grid."""
    return (int(n) - 1).bit_length()


@dataclass(frozen=True)
class QuantConfig:
    g: int
    p: int
    n: int
    seed: int = 0
    scale_bits: int = 16
    lossless: bool = False

    def __post_init__(self):
        if not is_power_of_two(self.g):
            raise InvalidArgument(f"group size g must be a power of two, got {self.g}")
        if self.p < 1 or self.n < 1:
            raise InvalidArgument("p and n must be >= 1")
        if self.p > self.g:
            raise InvalidArgument(f"grid dimension p={self.p} exceeds group size g={self.g}")
        if self.scale_bits not in _SCALE_DTYPES:
            raise InvalidArgument(f"scale_bits must be one of {sorted(_SCALE_DTYPES)}")
        if not 0 <= self.seed < 1 << 64:
            raise InvalidArgument("seed must be a 64-bit unsigned integer")

    @classmethod
    def for_grid(cls, grid: Grid, g: int, seed: int = 0, scale_bits: int = 16) -> "QuantConfig":
        return cls(g=g, p=grid.p, n=grid.n, seed=seed, scale_bits=scale_bits)

    @property
    def bits_per_code(self) -> int:
        return code_bits(self.n)

    def payload_bits(self, D: int) -> int:
        """Exact index + scale bits for a length-``D`` tensor."""
        if self.lossless:
            return 64 * D + (D // self.g) * self.scale_bits
        return -(-D // self.p) * self.bits_per_code + (D // self.g) * self.scale_bits


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, ...]
    config: QuantConfig
    scales: np.ndarray
    packed: bytes
    pad_len: int
    grid_crc: int = 0
    values: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_len(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def code_count(self) -> int:
        return -(-self.total_len // self.config.p)

    def codes(self) -> np.ndarray:
        if self.config.lossless:
            raise InvalidArgument("lossless tensors carry no grid codes")
        return unpack_indices(self.packed, self.code_count, self.config.n, validate=False)

    @property
    def payload_bits(self) -> int:
        return self.config.payload_bits(self.total_len)

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.config
        head = _HEAD_A.pack(QTZ_MAGIC, QTZ_VERSION, len(self.shape))
        head += struct.pack(f"<{len(self.shape)}Q", *self.shape)
        head += _HEAD_B.pack(
            self.total_len, cfg.g, cfg.p, 0 if cfg.lossless else cfg.n, cfg.scale_bits,
            self.pad_len, cfg.seed, self.grid_crc,
        )
        scales = np.asarray(self.scales).astype(_SCALE_DTYPES[cfg.scale_bits]).tobytes()
        body = self.values.astype("<f8").tobytes() if cfg.lossless else self.packed
        blob = head + scales + body
        return blob + struct.pack("<I", zlib.crc32(blob))

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedTensor":
        if len(data) < 4 or data[:4] != QTZ_MAGIC:
            raise BadMagic("not an HQTZ quantized-tensor file")
        if len(data) < _HEAD_A.size:
            raise Truncated("file shorter than its header")
        _, version, rank = _HEAD_A.unpack_from(data)
        if version != QTZ_VERSION:
            raise BadVersion(f"unsupported HQTZ version {version}")
        off = _HEAD_A.size
        if len(data) < off + 8 * rank + _HEAD_B.size + 4:
            raise Truncated("file shorter than its header")
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        D, g, p, n, scale_bits, pad_len, seed, grid_crc = _HEAD_B.unpack_from(data, off)
        off += _HEAD_B.size
        if scale_bits not in _SCALE_DTYPES or g == 0 or p == 0:
            raise ChecksumMismatch("header fields out of range")
        lossless = n == 0
        n_groups = D // g
        scale_len = n_groups * scale_bits // 8
        if lossless:
            body_len = 8 * D
        else:
            body_len = (-(-D // p) * code_bits(n) + 7) // 8
        expected = off + scale_len + body_len + 4
        if len(data) < expected:
            raise Truncated(f"file truncated: {len(data)} < {expected} bytes")
        if len(data) > expected:
            raise ChecksumMismatch("trailing bytes after checksum")
        (crc,) = struct.unpack_from("<I", data, expected - 4)
        if zlib.crc32(data[: expected - 4]) != crc:
            raise ChecksumMismatch("HQTZ CRC mismatch")
        if int(np.prod(shape, dtype=np.int64)) != D:
            raise CorruptionError("shape does not match element count")
        cfg = QuantConfig(g=g, p=p, n=max(n, 1), seed=seed, scale_bits=scale_bits, lossless=lossless)
        scales = np.frombuffer(data, _SCALE_DTYPES[scale_bits], n_groups, off).astype(np.float64)
        off += scale_len
        body = data[off : off + body_len]
        values = np.frombuffer(body, "<f8").astype(np.float64) if lossless else None
        return cls(tuple(shape), cfg, scales, b"" if lossless else bytes(body), pad_len, grid_crc, values)


# ---------------------------------------------------------------------------
# bit packing


def pack_indices(codes, n: int) -> bytes:
    """Pack each code into exactly ceil(log2 n) bits, LSB-first."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= n):
        raise InvalidArgument(f"codes must lie in [0, {n})")
    b = code_bits(n)
    if b == 0 or codes.size == 0:
        return b""
    bits = (codes[:, None] >> np.arange(b)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_indices(data: bytes, count: int, n: int, *, validate: bool = True) -> np.ndarray:
    """Inverse of :func:`pack_indices`; raises on codes ``>= n``."""
    b = code_bits(n)
    if b == 0:
        return np.zeros(count, dtype=np.int64)
    need = (count * b + 7) // 8
    if len(data) < need:
        raise Truncated(f"index block holds {len(data)} bytes, need {need}")
    bits = np.unpackbits(np.frombuffer(data, np.uint8, need), bitorder="little", count=count * b)
    codes = bits.reshape(count, b).astype(np.int64) @ (1 << np.arange(b, dtype=np.int64))
    if validate and codes.size and codes.max() >= n:
        raise CorruptionError(f"unpacked code {int(codes.max())} >= n={n}")
    return codes


# ---------------------------------------------------------------------------
# encode / decode


def _round_scales(scales: np.ndarray, scale_bits: int) -> np.ndarray:
    dt = np.dtype(_SCALE_DTYPES[scale_bits])
    with np.errstate(over="ignore", under="ignore"):
        stored = scales.astype(dt).astype(np.float64)
    bad = (scales > 0) & ((stored == 0) | ~np.isfinite(stored))
    if np.any(bad):
        raise InvalidArgument(
            f"group scale {scales[bad][0]:.3g} not representable in {scale_bits}-bit float"
        )
    return stored


def _check_grid(grid: Grid | None, config: QuantConfig, crc: int | None = None) -> None:
    if config.lossless:
        return
    if grid is None:
        raise InvalidArgument("a grid is required unless lossless mode is used")
    if grid.p != config.p or grid.n != config.n:
        raise InvalidArgument(
            f"grid (p={grid.p}, n={grid.n}) does not match config (p={config.p}, n={config.n})"
        )
    if crc is not None and crc != 0 and grid.crc() != crc:
        raise InvalidArgument("grid CRC does not match the one recorded at encode time")


def encode(w, grid: Grid | None, config: QuantConfig) -> QuantizedTensor:
    """Quantize ``w`` (any shape, flattened row-major) with RHT + grid rounding."""
    w = np.asarray(w, dtype=np.float64)
    shape = tuple(int(s) for s in w.shape) or (1,)
    flat = w.reshape(-1)
    D, g, p = flat.size, config.g, config.p
    if D == 0 or D % g:
        raise InvalidArgument(f"tensor length {D} is not a positive multiple of g={g}")
    if not np.all(np.isfinite(flat)):
        raise InvalidArgument("weights must be finite")
    if config.lossless and config.scale_bits != 64:
        config = replace(config, scale_bits=64)
    _check_grid(grid, config)

    groups = flat.reshape(-1, g)
    norms = np.sqrt(np.einsum("ij,ij->i", groups, groups))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    rotated = rht_forward(groups / safe[:, None], config.seed)
    rotated[zero] = 0.0
    scales = _round_scales(norms / math.sqrt(g), config.scale_bits)

    if config.lossless:
        return QuantizedTensor(shape, config, scales, b"", 0, 0, rotated.reshape(-1).copy())

    n_codes = -(-D // p)
    pad = n_codes * p - D
    chunks = np.concatenate((rotated.reshape(-1), np.zeros(pad))).reshape(n_codes, p)
    codes = nearest_many(grid.points, chunks, grid.metric)
    # chunks lying entirely inside zero-norm groups get code 0
    group_of = np.minimum(np.arange(n_codes * p) // g, D // g - 1).reshape(n_codes, p)
    codes[np.all(zero[group_of], axis=1)] = 0
    return QuantizedTensor(shape, config, scales, pack_indices(codes, grid.n), pad, grid.crc())


def rotated_values(q: QuantizedTensor, grid: Grid | None) -> np.ndarray:
    """Unit-scale rotated-space reconstruction, shape ``(D/g, g)``."""
    cfg = q.config
    D = q.total_len
    if cfg.lossless:
        return np.asarray(q.values, dtype=np.float64).reshape(-1, cfg.g)
    _check_grid(grid, cfg, q.grid_crc)
    codes = unpack_indices(q.packed, q.code_count, cfg.n)
    return grid.points[codes].reshape(-1)[:D].reshape(-1, cfg.g)


def decode(q: QuantizedTensor, grid: Grid | None) -> np.ndarray:
    """Dequantize back to the original shape."""
    rot = rotated_values(q, grid)
    g = q.config.g
    out = rht_inverse(rot, q.config.seed) * (q.scales * math.sqrt(g))[:, None]
    return out.reshape(q.shape)


def measure_relative_error(w, q: QuantizedTensor, grid: Grid | None) -> float:
    """``||decode(q) - w||^2 / ||w||^2`` (the layer's t^2)."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    denom = float(w @ w)
    if denom == 0:
        raise InvalidArgument("relative error is undefined for an all-zero tensor")
    err = decode(q, grid).reshape(-1) - w
    return float(err @ err) / denom


def rotated_matvec(q: QuantizedTensor, x, grid: Grid | None) -> np.ndarray:
    """Compute ``decode(q) @ x`` without dequantizing the matrix.

    The activation is rotated group-wise with the same seed, and the dot
    products are taken directly against the rotated-space reconstruction.
    """
    if len(q.shape) != 2:
        raise InvalidArgument("rotated_matvec needs a 2-D quantized matrix")
    rows, cols = q.shape
    g = q.config.g
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != cols:
        raise InvalidArgument(f"activation length {x.shape[0]} != matrix input dim {cols}")
    if cols % g:
        raise InvalidArgument(f"input dimension {cols} not divisible by g={g}")
    k = cols // g
    rot = rotated_values(q, grid).reshape(rows, k, g)
    xr = rht_forward(x.reshape(k, g), q.config.seed) / math.sqrt(g)
    return np.einsum("rkg,kg,rk->r", rot, xr, q.scales.reshape(rows, k))
