"""Layered container: header, base layer and refinement layers.

Layout (all integers little-endian)::

    "SCAR" | version u16 | header_len u32 | header | chunk*
    chunk  = layer u8 | payload_len u32 | crc32(payload) u32 | payload

Header::

    compressor u8 | config_len u32 | config JSON | N u64 | bbox 6 x f64
    | codebooks_len u32 | compressed codebooks
    | grid_len u32 | binarized grid
    | model_len u32 | compressed entropy-model weights

Layer 1 payload: ``pos_len u32 | positions | mask_len u32 | base mask bits | coded indices``.
Layer m > 1 payload: ``mask_len u32 | newly activated anchors (gap varints) | coded indices``.

Chunk ``m`` carries ``k_m`` for every anchor visible at level ``m``; an anchor
that first becomes visible at level ``m`` also gets ``k_1 .. k_{m-1}`` in the
same chunk, coded before any ``k_m``. Every index therefore appears exactly
once in the stream.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import coder
from .context import BinarizedGrid, SpatialGrid, binarize_grid, dequantize_grid
from .core import AnchorCloud, CodecConfig, DataError, IntegrityError, ParameterError
from .entropy import EntropyModel, HistoryState, advance, predict_distribution, start_history
from .rvq import CodebookPair, IndexTensor, dequantize, quantize

MAGIC = b"SCAR"
VERSION = 1
COMPRESSORS = {0: "none", 1: "deflate"}
POSITION_BITS = 16


# -- generic byte compressor ------------------------------------------------

def compress(data: bytes, compressor: int) -> bytes:
    if compressor == 0:
        return bytes(data)
    if compressor == 1:
        return zlib.compress(data, 9)
    raise ParameterError(f"unknown compressor id {compressor}")


def decompress(data: bytes, compressor: int) -> bytes:
    if compressor == 0:
        return bytes(data)
    if compressor == 1:
        try:
            return zlib.decompress(data)
        except zlib.error as exc:
            raise DataError(f"corrupt compressed record: {exc}") from exc
    raise DataError(f"unknown compressor id {compressor}")


# -- positions ---------------------------------------------------------------

def encode_positions(positions, bbox, bits_per_axis: int = POSITION_BITS) -> bytes:
    """``bbox 6 x f64 | u16 codes (N x 3)``; each axis uniformly quantized over the bbox."""
    if bits_per_axis != 16:
        raise ParameterError("only 16 bits per axis are supported")
    pos = np.asarray(positions, dtype=np.float64)
    lo, hi = np.asarray(bbox, dtype=np.float64)
    if np.any(pos < lo) or np.any(pos > hi):
        raise ParameterError("positions must lie inside the bbox")
    levels = (1 << bits_per_axis) - 1
    ext = hi - lo
    safe = np.where(ext > 0, ext, 1.0)
    codes = np.where(ext > 0, np.rint((pos - lo) / safe * levels), 0.0)
    codes = np.clip(codes, 0, levels).astype("<u2")
    return np.concatenate([lo, hi]).astype("<f8").tobytes() + codes.tobytes()


def decode_positions(data: bytes) -> np.ndarray:
    if len(data) < 48 or (len(data) - 48) % 6:
        raise DataError("malformed position record")
    box = np.frombuffer(data, "<f8", 6, 0)
    lo, hi = box[:3], box[3:]
    codes = np.frombuffer(data, "<u2", offset=48).reshape(-1, 3).astype(np.float64)
    pos = lo + codes / ((1 << POSITION_BITS) - 1) * (hi - lo)
    return np.clip(pos, lo, hi)


# -- visibility masks --------------------------------------------------------

@dataclass
class VisibilityMask:
    """Per-level visibility (levels x N booleans), nested across levels."""

    levels: np.ndarray

    def __post_init__(self):
        lv = np.atleast_2d(np.asarray(self.levels, dtype=bool))
        if np.any(lv[:-1] & ~lv[1:]):
            raise ParameterError("visibility masks must be monotone: level m must contain level m-1")
        self.levels = lv

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    def popcounts(self) -> list:
        return [int(v.sum()) for v in self.levels]

    def upto(self, level: int) -> "VisibilityMask":
        return VisibilityMask(self.levels[:level])


def importance_masks(stage1_norms, fractions) -> VisibilityMask:
    """Level ``m`` shows the top ``fractions[m]`` of anchors ranked by stage-1
    residual norm (largest first, ties by index)."""
    norms = np.asarray(stage1_norms, dtype=np.float64)
    n = len(norms)
    order = np.lexsort((np.arange(n), -norms))
    levels = np.zeros((len(fractions), n), dtype=bool)
    for m, f in enumerate(fractions):
        count = n if f >= 1.0 else max(1, int(np.floor(f * n + 0.5)))
        levels[m, order[:count]] = True
    return VisibilityMask(levels)


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def diff_mask_encode(prev, curr) -> bytes:
    """Newly visible anchor indices as ascending gap-coded LEB128 varints."""
    prev = np.asarray(prev, dtype=bool)
    curr = np.asarray(curr, dtype=bool)
    if prev.shape != curr.shape:
        raise ParameterError("mask shapes differ")
    if np.any(prev & ~curr):
        raise ParameterError("mask is not monotone: an anchor became invisible")
    out = bytearray()
    last = -1
    for i in np.flatnonzero(curr & ~prev):
        out += _varint(int(i) - last)
        last = int(i)
    return bytes(out)


def diff_mask_decode(prev, chunk: bytes) -> np.ndarray:
    curr = np.array(prev, dtype=bool, copy=True)
    pos, last, value, shift = 0, -1, 0, 0
    for b in chunk:
        value |= (b & 0x7F) << shift
        shift += 7
        if b & 0x80:
            continue
        pos = last + value
        if value < 1 or pos >= len(curr):
            raise DataError("differential mask entry out of range")
        if curr[pos]:
            raise DataError("differential mask re-activates a visible anchor")
        curr[pos] = True
        last, value, shift = pos, 0, 0
    if shift:
        raise DataError("differential mask ends inside a varint")
    return curr


def pack_mask(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool), bitorder="little").tobytes()


def unpack_mask(data: bytes, n: int) -> np.ndarray:
    if len(data) != -(-n // 8):
        raise DataError("base mask size mismatch")
    return np.unpackbits(np.frombuffer(data, np.uint8), count=n, bitorder="little").astype(bool)


# -- container ---------------------------------------------------------------

@dataclass
class Header:
    config: CodecConfig
    n: int
    bbox: np.ndarray
    codebooks: CodebookPair
    grid: BinarizedGrid
    model_bytes: bytes
    compressor: int = 1

    def to_bytes(self) -> bytes:
        cfg = self.config.to_json().encode()
        cb = compress(self.codebooks.to_bytes(), self.compressor)
        grid = self.grid.to_bytes()
        model = compress(self.model_bytes, self.compressor)
        return b"".join([
            struct.pack("<BI", self.compressor, len(cfg)), cfg,
            struct.pack("<Q", self.n), np.asarray(self.bbox, "<f8").tobytes(),
            struct.pack("<I", len(cb)), cb,
            struct.pack("<I", len(grid)), grid,
            struct.pack("<I", len(model)), model,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Header":
        try:
            comp, clen = struct.unpack_from("<BI", data, 0)
            off = 5
            config = CodecConfig.from_json(data[off:off + clen].decode())
            off += clen
            (n,) = struct.unpack_from("<Q", data, off)
            bbox = np.frombuffer(data, "<f8", 6, off + 8).reshape(2, 3).copy()
            off += 56
            sections = []
            for _ in range(3):
                (ln,) = struct.unpack_from("<I", data, off)
                if off + 4 + ln > len(data):
                    raise DataError("header section overruns header")
                sections.append(bytes(data[off + 4:off + 4 + ln]))
                off += 4 + ln
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise DataError(f"malformed header: {exc}") from exc
        if off != len(data):
            raise DataError("trailing bytes in header")
        codebooks = CodebookPair.from_bytes(decompress(sections[0], comp))
        grid = BinarizedGrid.from_bytes(sections[1])
        return cls(config, n, bbox, codebooks, grid, decompress(sections[2], comp), comp)

    def section_sizes(self) -> dict:
        return {
            "codebooks": len(compress(self.codebooks.to_bytes(), self.compressor)),
            "grid": len(self.grid.to_bytes()),
            "model": len(compress(self.model_bytes, self.compressor)),
        }


@dataclass
class Chunk:
    layer: int
    payload: bytes
    crc: int

    @property
    def valid(self) -> bool:
        return zlib.crc32(self.payload) == self.crc

    def to_bytes(self) -> bytes:
        return struct.pack("<BII", self.layer, len(self.payload), self.crc) + self.payload


@dataclass
class ProgressiveBitstream:
    header: Header
    chunks: list = field(default_factory=list)
    header_bytes: bytes = b""
    truncated_layer: int | None = None  # layer whose chunk was cut short, if any
    coded_bytes: list = field(default_factory=list)  # range-coded index bytes per layer

    def __post_init__(self):
        if not self.header_bytes:
            self.header_bytes = self.header.to_bytes()

    @property
    def preamble_size(self) -> int:
        return 10 + len(self.header_bytes)

    def to_bytes(self) -> bytes:
        return (MAGIC + struct.pack("<HI", VERSION, len(self.header_bytes)) + self.header_bytes
                + b"".join(c.to_bytes() for c in self.chunks))

    def layer_sizes(self) -> list:
        return [9 + len(c.payload) for c in self.chunks]

    def cumulative_sizes(self) -> list:
        return [int(v) for v in self.preamble_size + np.cumsum(self.layer_sizes())]

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProgressiveBitstream":
        """Parse a possibly truncated stream; CRCs are checked when layers are decoded."""
        data = bytes(data)
        if len(data) < 10 or data[:4] != MAGIC:
            raise DataError("not a SCAR bitstream")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported version {version}")
        if len(data) < 10 + hlen:
            raise IntegrityError("stream truncated inside the header", layer=0)
        header_bytes = data[10:10 + hlen]
        header = Header.from_bytes(header_bytes)
        chunks, off, truncated = [], 10 + hlen, None
        while off < len(data):
            if len(data) - off < 9:
                truncated = data[off] if len(data) > off else None
                break
            layer, ln, crc = struct.unpack_from("<BII", data, off)
            if off + 9 + ln > len(data):
                truncated = layer
                break
            chunks.append(Chunk(layer, data[off + 9:off + 9 + ln], crc))
            off += 9 + ln
        expected = list(range(1, len(chunks) + 1))
        if [c.layer for c in chunks] != expected:
            raise DataError(f"layers out of order: {[c.layer for c in chunks]}")
        return cls(header, chunks, header_bytes, truncated)


# -- shared encoder/decoder layer walk --------------------------------------

class _Histories:
    """Per-anchor autoregressive state, gathered into batches on demand."""

    def __init__(self, model: EntropyModel, n: int, M: int):
        self.model = model
        base = start_history(model, n)
        self.h = base.h.copy() if base.h is not None else None
        self.states = np.zeros((n, M, model.hidden)) if model.uses_gru else None
        self.emb_sum = base.emb_sum.copy()
        self.consumed = np.zeros(n, dtype=np.int64)

    def gather(self, rows) -> HistoryState:
        j = int(self.consumed[rows[0]]) if len(rows) else 0
        states = tuple(self.states[rows, t] for t in range(j)) if self.states is not None else ()
        h = self.h[:, rows] if self.h is not None else None
        return HistoryState(states, h, self.emb_sum[rows], len(rows), j)

    def scatter(self, rows, hist: HistoryState):
        if self.h is not None:
            self.h[:, rows] = hist.h
            self.states[rows, hist.consumed - 1] = hist.states[-1]
        self.emb_sum[rows] = hist.emb_sum
        self.consumed[rows] = hist.consumed


def _walk_layer(m: int, prev_mask, curr_mask, hs, hist: _Histories, symbols, M: int, step):
    """Visit every index coded in chunk ``m`` in stream order.

    ``step(stage, rows, cdfs)`` returns the indices for ``rows`` at ``stage``
    (encoder: looks them up and codes them; decoder: decodes them).
    """
    new = np.flatnonzero(curr_mask & ~prev_mask)
    model = hist.model
    groups = [(j, new) for j in range(1, m)] + [(m, np.flatnonzero(curr_mask))]
    for stage, rows in groups:
        if len(rows) == 0:
            continue
        h = hist.gather(rows)
        probs = predict_distribution(model, hs[rows], h, stage)
        k = step(stage, rows, coder.quantize_cdfs(probs))
        symbols[rows, stage - 1] = k
        if stage < M:
            hist.scatter(rows, advance(h, k, stage, model))


def _transmitted(grid: SpatialGrid | BinarizedGrid, bbox) -> SpatialGrid:
    b = grid if isinstance(grid, BinarizedGrid) else binarize_grid(grid)
    return dequantize_grid(b, bbox)


def encode_scene(cloud: AnchorCloud, codebooks: CodebookPair, grid: SpatialGrid, model: EntropyModel,
                 masks: VisibilityMask, M: int, config: CodecConfig,
                 indices: IndexTensor | None = None) -> ProgressiveBitstream:
    """Code a scene into ``M`` layers using the transmitted (1-bit) grid, the
    float32-rounded model and the decoder-side quantized positions."""
    if M != config.M:
        raise ParameterError(f"M={M} disagrees with config.M={config.M}")
    if masks.n_levels != M or masks.levels.shape[1] != cloud.n:
        raise ParameterError("need one visibility mask of length N per layer")
    if not masks.levels[-1].any():
        raise ParameterError("top level mask is empty")
    if indices is None:
        indices, _ = quantize(cloud.features, codebooks, M)
    if indices.shape != (cloud.n, M):
        raise ParameterError("index tensor does not match the cloud")
    if model.K_base != codebooks.sizes[0] or model.K_res != codebooks.sizes[1]:
        raise ParameterError("entropy model and codebooks disagree on codebook sizes")
    bgrid = binarize_grid(grid)
    model_bytes = model.to_bytes()
    header = Header(config, cloud.n, cloud.bbox, codebooks, bgrid, model_bytes, config.compressor)

    tx_model = model.load_bytes(model_bytes)
    pos_bytes = encode_positions(cloud.positions, cloud.bbox)
    hs = _transmitted(bgrid, cloud.bbox).embed(decode_positions(pos_bytes))
    hist = _Histories(tx_model, cloud.n, M)
    idx = indices.indices
    seen = np.full((cloud.n, M), -1, dtype=np.int64)
    chunks, coded = [], []
    prev = np.zeros(cloud.n, dtype=bool)
    for m in range(1, M + 1):
        curr = masks.levels[m - 1]
        enc = coder.RangeEncoder()

        def step(stage, rows, cdfs):
            k = idx[rows, stage - 1]
            for s, c in zip(k, cdfs):
                enc.encode(int(s), c)
            return k

        _walk_layer(m, prev, curr, hs, hist, seen, M, step)
        stream = enc.finish()
        if m == 1:
            mask_bytes = pack_mask(curr)
            payload = (struct.pack("<I", len(pos_bytes)) + pos_bytes
                       + struct.pack("<I", len(mask_bytes)) + mask_bytes + stream)
        else:
            mask_bytes = diff_mask_encode(prev, curr)
            payload = struct.pack("<I", len(mask_bytes)) + mask_bytes + stream
        chunks.append(Chunk(m, payload, zlib.crc32(payload)))
        coded.append(len(stream))
        prev = curr
    return ProgressiveBitstream(header, chunks, coded_bytes=coded)


@dataclass
class DecodedScene:
    cloud: AnchorCloud
    mask: VisibilityMask
    indices: np.ndarray  # N x layers, -1 where not visible
    layers: int
    coded_bytes: list


def _split(payload: bytes, off: int):
    if len(payload) < off + 4:
        raise DataError("chunk payload too short")
    (ln,) = struct.unpack_from("<I", payload, off)
    if len(payload) < off + 4 + ln:
        raise DataError("chunk section overruns payload")
    return payload[off + 4:off + 4 + ln], off + 4 + ln


def decode_layers(stream, upto_layer: int | None = None) -> DecodedScene:
    """Decode the first ``upto_layer`` layers (all complete ones when None)."""
    bs = stream if isinstance(stream, ProgressiveBitstream) else ProgressiveBitstream.from_bytes(stream)
    h = bs.header
    cfg = h.config
    M = cfg.M
    available = len(bs.chunks)
    if upto_layer is None:
        upto_layer = available
        if upto_layer == 0:
            raise IntegrityError("stream holds no complete layer", layer=bs.truncated_layer or 1)
    if not 1 <= upto_layer <= M:
        raise ParameterError(f"upto_layer must be in [1, {M}]")
    if upto_layer > available:
        raise IntegrityError(f"layer {available + 1} is missing or truncated", layer=available + 1)
    for c in bs.chunks[:upto_layer]:
        if not c.valid:
            raise IntegrityError(f"CRC mismatch in layer {c.layer}", layer=c.layer)

    bbox = h.bbox
    grid = dequantize_grid(h.grid, bbox)
    model = EntropyModel.from_config(cfg, grid.width, zero=True).load_bytes(h.model_bytes)
    n = h.n
    hist = _Histories(model, n, M)
    symbols = np.full((n, M), -1, dtype=np.int64)
    levels = []
    coded = []
    prev = np.zeros(n, dtype=bool)
    positions = hs = None
    for m in range(1, upto_layer + 1):
        payload = bs.chunks[m - 1].payload
        try:
            if m == 1:
                pos_bytes, off = _split(payload, 0)
                positions = decode_positions(pos_bytes)
                if len(positions) != n:
                    raise DataError("position count does not match header")
                hs = grid.embed(positions)
                mask_bytes, off = _split(payload, off)
                curr = unpack_mask(mask_bytes, n)
            else:
                mask_bytes, off = _split(payload, 0)
                curr = diff_mask_decode(prev, mask_bytes)
        except DataError as exc:
            raise IntegrityError(f"layer {m}: {exc}", layer=m) from exc
        dec = coder.RangeDecoder(payload[off:])

        def step(stage, rows, cdfs):
            return np.array([dec.decode(c) for c in cdfs], dtype=np.int64)

        try:
            _walk_layer(m, prev, curr, hs, hist, symbols, M, step)
        except IntegrityError as exc:
            raise IntegrityError(f"layer {m}: {exc}", layer=m) from exc
        if not dec.exhausted and len(payload) > off:
            raise IntegrityError(f"layer {m}: trailing bytes after coded indices", layer=m)
        coded.append(len(payload) - off)
        levels.append(curr)
        prev = curr

    idx = symbols[:, :upto_layer]
    feats = np.zeros((n, h.codebooks.dim))
    vis = levels[-1]
    if vis.any():
        feats[vis] = dequantize(idx[vis], h.codebooks, upto_layer)
    cloud = AnchorCloud(positions, feats, bbox)
    return DecodedScene(cloud, VisibilityMask(np.stack(levels)), idx, upto_layer, coded)


def decode_scene(stream, upto_layer: int | None = None):
    """``(reconstructed cloud, visibility masks)`` from the first ``upto_layer`` layers.

    Invisible anchors decode to zero features.
    """
    out = decode_layers(stream, upto_layer)
    return out.cloud, out.mask
