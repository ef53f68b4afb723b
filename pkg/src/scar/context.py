"""Multi-resolution hashed 3D feature grid and its 1-bit transmission form."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import CodecConfig, DataError, ParameterError, Rng

PRIMES = (1, 2654435761, 805459861)

# corner offsets in (x, y, z) bit order: corner c has offset ((c>>0)&1, (c>>1)&1, (c>>2)&1)
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def is_dense(resolution: int, table_size: int) -> bool:
    return (resolution + 1) ** 3 <= table_size


def hash_index(cell, resolution: int, table_size: int):
    """Table slot of integer corner coordinates ``cell`` (..., 3).

    Levels whose ``(resolution + 1)^3`` corners fit in the table use dense
    row-major addressing; finer levels use the XOR-of-primes spatial hash.
    """
    c = np.asarray(cell, dtype=np.int64)
    if is_dense(resolution, table_size):
        n = resolution + 1
        return c[..., 0] + n * (c[..., 1] + n * c[..., 2])
    u = c.astype(np.uint64)
    h = (u[..., 0] * np.uint64(PRIMES[0])) ^ (u[..., 1] * np.uint64(PRIMES[1])) ^ \
        (u[..., 2] * np.uint64(PRIMES[2]))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class SpatialGrid:
    resolutions: tuple
    tables: np.ndarray  # (L, T, F)
    bbox: np.ndarray  # (2, 3)

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ParameterError("grid resolutions must be strictly increasing")
        if self.tables.ndim != 3 or self.tables.shape[0] != len(self.resolutions):
            raise ParameterError("tables must be L x T x F")
        t = self.tables.shape[1]
        if t & (t - 1):
            raise ParameterError("table size must be a power of two")

    @classmethod
    def create(cls, config: CodecConfig, bbox, rng: Rng) -> "SpatialGrid":
        shape = (config.grid_levels, config.grid_table_size, config.grid_features)
        return cls(config.resolutions, rng.uniform(-1e-4, 1e-4, shape), bbox)

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def table_size(self) -> int:
        return self.tables.shape[1]

    @property
    def features(self) -> int:
        return self.tables.shape[2]

    @property
    def width(self) -> int:
        return self.levels * self.features

    def normalize(self, x):
        """Map world positions into [0, 1]^3 of the bbox; points outside are clamped."""
        lo, hi = self.bbox
        ext = np.where(hi > lo, hi - lo, 1.0)
        return np.clip((np.asarray(x, dtype=np.float64) - lo) / ext, 0.0, 1.0)

    def lookup(self, x):
        """Slots (N, L, 8) and trilinear weights (N, L, 8) for positions (N, 3)."""
        u = self.normalize(np.atleast_2d(x))
        n = len(u)
        slots = np.empty((n, self.levels, 8), dtype=np.int64)
        weights = np.empty((n, self.levels, 8))
        for lvl, res in enumerate(self.resolutions):
            p = u * res
            base = np.minimum(np.floor(p).astype(np.int64), res - 1)
            frac = p - base
            corners = base[:, None, :] + _CORNERS[None]
            slots[:, lvl] = hash_index(corners, res, self.table_size)
            w = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
            weights[:, lvl] = w.prod(axis=-1)
        return slots, weights

    def embed(self, x, lookup=None):
        """Spatial embeddings (N, L*F): per level trilinear blend of 8 corners."""
        slots, weights = self.lookup(x) if lookup is None else lookup
        lvl = np.arange(self.levels)[None, :, None]
        corner = self.tables[lvl, slots]  # (N, L, 8, F)
        out = (weights[..., None] * corner).sum(axis=2)
        return out.reshape(len(slots), -1)

    def embed_backward(self, grad, lookup):
        """Scatter d(loss)/d(embedding) (N, L*F) into a table gradient."""
        slots, weights = lookup
        g = np.asarray(grad).reshape(len(slots), self.levels, 1, self.features) * weights[..., None]
        out = np.zeros_like(self.tables)
        lvl = np.broadcast_to(np.arange(self.levels)[None, :, None], slots.shape)
        np.add.at(out, (lvl.ravel(), slots.ravel()), g.reshape(-1, self.features))
        return out

    def copy(self) -> "SpatialGrid":
        return SpatialGrid(self.resolutions, self.tables.copy(), self.bbox.copy())


def grid_embed(x, grid: SpatialGrid):
    """Embedding of a single position (3,) or a batch (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    out = grid.embed(x.reshape(-1, 3))
    return out[0] if x.ndim == 1 else out


@dataclass
class BinarizedGrid:
    resolutions: tuple
    table_size: int
    features: int
    bits: bytes  # packed sign bits, 1 = non-negative, level-major then slot, feature
    scales: np.ndarray  # (L,) float32 values

    @property
    def n_params(self) -> int:
        return len(self.resolutions) * self.table_size * self.features

    def to_bytes(self) -> bytes:
        """``L u8 | res u32 * L | T u32 | F u8 | sign bits | scales f32 * L``."""
        head = struct.pack("<B", len(self.resolutions))
        head += struct.pack(f"<{len(self.resolutions)}I", *self.resolutions)
        head += struct.pack("<IB", self.table_size, self.features)
        return head + self.bits + np.asarray(self.scales, "<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BinarizedGrid":
        try:
            (L,) = struct.unpack_from("<B", data, 0)
            res = struct.unpack_from(f"<{L}I", data, 1)
            T, F = struct.unpack_from("<IB", data, 1 + 4 * L)
        except struct.error as exc:
            raise DataError("truncated grid header") from exc
        off = 1 + 4 * L + 5
        nbytes = -(-(L * T * F) // 8)
        if len(data) != off + nbytes + 4 * L:
            raise DataError("grid record size mismatch")
        bits = bytes(data[off:off + nbytes])
        scales = np.frombuffer(data, "<f4", L, off + nbytes).copy()
        return cls(tuple(res), T, F, bits, scales)


def binarize_grid(grid: SpatialGrid) -> BinarizedGrid:
    """One sign bit per parameter plus a per-level scale (mean magnitude)."""
    scales = np.abs(grid.tables).mean(axis=(1, 2)).astype(np.float32)
    signs = (grid.tables >= 0).ravel()
    return BinarizedGrid(grid.resolutions, grid.table_size, grid.features,
                         np.packbits(signs, bitorder="little").tobytes(), scales)


def dequantize_grid(b: BinarizedGrid, bbox) -> SpatialGrid:
    L = len(b.resolutions)
    signs = np.unpackbits(np.frombuffer(b.bits, np.uint8), count=b.n_params, bitorder="little")
    signs = signs.reshape(L, b.table_size, b.features).astype(np.float64) * 2.0 - 1.0
    scales = np.asarray(b.scales, dtype=np.float32).astype(np.float64)
    return SpatialGrid(b.resolutions, signs * scales[:, None, None], bbox)


def binarized_view(grid: SpatialGrid) -> SpatialGrid:
    """Grid as the decoder will see it after 1-bit transmission."""
    return dequantize_grid(binarize_grid(grid), grid.bbox)
