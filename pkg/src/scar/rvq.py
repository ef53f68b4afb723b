"""Dual-codebook residual vector quantization.

Stage 1 searches a coarse codebook; every later stage searches one shared
residual codebook whose entry 0 is pinned to the zero vector, so refinement
can never increase the residual norm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import CodecConfig, DataError, ParameterError, Rng

_CHUNK = 256


@dataclass
class CodebookPair:
    coarse: np.ndarray
    residual: np.ndarray
    ema_counts: list = field(default_factory=list)
    ema_sums: list = field(default_factory=list)
    reseeded: tuple = (0, 0)  # dead entries reseeded in the final epoch (coarse, residual)
    trained: bool = True

    def __post_init__(self):
        self.coarse = np.asarray(self.coarse, dtype=np.float64)
        self.residual = np.asarray(self.residual, dtype=np.float64)
        if self.coarse.ndim != 2 or self.residual.ndim != 2 or self.coarse.shape[1] != self.residual.shape[1]:
            raise ParameterError("codebooks must be K x D matrices of equal D")
        if not (np.all(np.isfinite(self.coarse)) and np.all(np.isfinite(self.residual))):
            raise ParameterError("codebooks contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.coarse.shape[1]

    @property
    def sizes(self) -> tuple:
        return self.coarse.shape[0], self.residual.shape[0]

    def to_bytes(self) -> bytes:
        """Both codebooks as ``K u32 | D u32 | float32 rows`` records."""
        out = b""
        for book in (self.coarse, self.residual):
            out += struct.pack("<II", *book.shape) + book.astype("<f4").tobytes()
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodebookPair":
        books, off = [], 0
        for _ in range(2):
            if len(data) < off + 8:
                raise DataError("truncated codebook record")
            k, d = struct.unpack_from("<II", data, off)
            off += 8
            if len(data) < off + 4 * k * d:
                raise DataError("truncated codebook record")
            books.append(np.frombuffer(data, "<f4", k * d, off).reshape(k, d).astype(np.float64))
            off += 4 * k * d
        if off != len(data):
            raise DataError("trailing bytes after codebooks")
        return cls(books[0], books[1])


@dataclass
class IndexTensor:
    indices: np.ndarray  # N x M, int64
    K_base: int
    K_res: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 2 or idx.shape[1] < 1:
            raise ParameterError(f"indices must be N x M, got {idx.shape}")
        self.indices = idx.astype(np.int64)
        if np.any(self.indices < 0) or np.any(self.indices[:, 0] >= self.K_base) or \
                np.any(self.indices[:, 1:] >= self.K_res):
            raise ParameterError("index out of range")

    @property
    def shape(self) -> tuple:
        return self.indices.shape

    @property
    def M(self) -> int:
        return self.indices.shape[1]


def _sq_dists(x, book):
    # Direct differences so that ties and the zero codeword compare exactly.
    diff = x[:, None, :] - book[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(x, book):
    """Lowest-index argmin of squared distance, evaluated exactly in chunks."""
    idx = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        d = _sq_dists(x[s:s + _CHUNK], book)
        idx[s:s + _CHUNK] = d.argmin(axis=1)
        dist[s:s + _CHUNK] = d[np.arange(len(d)), idx[s:s + _CHUNK]]
    return idx, dist


def _nearest_fast(x, book):
    # Matmul expansion; only used inside training where exact ties do not matter.
    d = (x * x).sum(1)[:, None] - 2.0 * x @ book.T + (book * book).sum(1)[None, :]
    return d.argmin(axis=1)


def quantize(features, cb: CodebookPair, M: int):
    """Residual-quantize ``features`` into ``M`` stage indices.

    Returns the :class:`IndexTensor` and the N x M matrix of residual norms
    ``||r_m||`` after each stage.
    """
    if cb is None or not cb.trained:
        raise ParameterError("codebooks are not trained")
    if M < 1:
        raise ParameterError("M must be >= 1")
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cb.dim:
        raise ParameterError(f"feature dim {z.shape} does not match codebook dim {cb.dim}")
    n = len(z)
    idx = np.zeros((n, M), dtype=np.int64)
    norms = np.zeros((n, M))
    r = z.copy()
    for m in range(M):
        book = cb.coarse if m == 0 else cb.residual
        k, _ = _nearest(r, book)
        r = r - book[k]
        idx[:, m] = k
        norms[:, m] = np.sqrt((r * r).sum(axis=1))
    return IndexTensor(idx, *cb.sizes), norms


def dequantize(indices, cb: CodebookPair, upto: int):
    """Sum of the selected codewords of stages ``1..upto``."""
    idx = indices.indices if isinstance(indices, IndexTensor) else np.asarray(indices, dtype=np.int64)
    if not 1 <= upto <= idx.shape[1]:
        raise ParameterError(f"upto must be in [1, {idx.shape[1]}], got {upto}")
    kb, kr = cb.sizes
    if np.any(idx < 0) or np.any(idx[:, 0] >= kb) or np.any(idx[:, 1:upto] >= kr):
        raise ParameterError("index out of range")
    out = cb.coarse[idx[:, 0]].copy()
    for m in range(1, upto):
        out += cb.residual[idx[:, m]]
    return out


def _kmeans_pp(x, k, rng: Rng, first=None):
    """k-means++ seeding; ``first`` optionally fixes the first centre."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    start = 0
    if first is not None:
        centers[0] = first
        start = 1
    else:
        centers[0] = x[rng.integers(n)]
        start = 1
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(start, k):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than entries: pad with random training vectors
            centers[j] = x[rng.integers(n)]
        else:
            u = rng.uniform() * total
            i = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            centers[j] = x[min(i, n - 1)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))
    return centers


class _EmaBook:
    """EMA k-means state for one codebook."""

    def __init__(self, centers, x, pinned_zero=False):
        k = len(centers)
        self.pinned_zero = pinned_zero
        # first pass is a plain Lloyd step so the running statistics start consistent
        assign = _nearest_fast(x, centers)
        self.counts = np.bincount(assign, minlength=k).astype(np.float64)
        self.sums = np.zeros_like(centers)
        np.add.at(self.sums, assign, x)
        self.centers = centers.copy()
        live = self.counts > 0
        self.centers[live] = self.sums[live] / self.counts[live, None]
        self._pin()

    def _pin(self):
        if self.pinned_zero:
            self.centers[0] = 0.0
            self.counts[0] = 0.0
            self.sums[0] = 0.0

    def epoch(self, x, decay, batch_size, rng: Rng) -> int:
        """One pass of mini-batch EMA updates; dead entries are reseeded to
        random training vectors. Returns the number reseeded."""
        k = len(self.centers)
        order = rng.permutation(len(x))
        hits = np.zeros(k, dtype=np.int64)
        for s in range(0, len(x), batch_size):
            xb = x[order[s:s + batch_size]]
            a = _nearest_fast(xb, self.centers)
            bc = np.bincount(a, minlength=k)
            hits += bc
            bsum = np.zeros_like(self.centers)
            np.add.at(bsum, a, xb)
            # batch statistics are rescaled to full-data magnitude
            scale = len(x) / len(xb)
            self.counts = decay * self.counts + (1 - decay) * bc * scale
            self.sums = decay * self.sums + (1 - decay) * bsum * scale
            ok = self.counts > 1e-12
            self.centers[ok] = self.sums[ok] / self.counts[ok, None]
            self._pin()
        dead = np.flatnonzero(hits == 0)
        if self.pinned_zero:
            dead = dead[dead != 0]
        if len(dead):
            pick = rng.integers(0, len(x), size=len(dead))
            self.centers[dead] = x[pick]
            self.counts[dead] = 1.0
            self.sums[dead] = x[pick]
        return len(dead)


def _stage_residuals(z, coarse, residual, M):
    """Pooled inputs to stages 2..M (at least stage 2 so the book is always fitted)."""
    r = z - coarse[_nearest_fast(z, coarse)]
    pooled = [r]
    for _ in range(2, max(M, 2)):
        r = r - residual[_nearest_fast(r, residual)]
        pooled.append(r)
    return np.concatenate(pooled, axis=0)


class CodebookTrainer:
    """Stepwise codebook fitting: k-means++ seeding, then EMA epochs.

    The coarse book follows the raw features; the shared residual book
    follows the pooled stage >= 2 residuals, recomputed every epoch, with
    entry 0 pinned to zero.
    """

    def __init__(self, features, config: CodecConfig, rng: Rng):
        z = np.asarray(features, dtype=np.float64)
        if z.ndim != 2 or len(z) == 0:
            raise DataError("cannot train codebooks on empty input")
        if z.shape[1] != config.D:
            raise ParameterError(f"feature dim {z.shape[1]} != config.D {config.D}")
        self.config = config
        self.rng = rng
        self.coarse = _EmaBook(_kmeans_pp(z, config.K_base, rng), z)
        r1 = z - self.coarse.centers[_nearest_fast(z, self.coarse.centers)]
        res0 = _kmeans_pp(r1, config.K_res, rng, first=np.zeros(z.shape[1]))
        self.residual = _EmaBook(res0, _stage_residuals(z, self.coarse.centers, res0, config.M),
                                 pinned_zero=True)
        self.reseeded = (0, 0)

    def epoch(self, features) -> None:
        z = np.asarray(features, dtype=np.float64)
        cfg = self.config
        dc = self.coarse.epoch(z, cfg.ema_decay, cfg.batch_size, self.rng)
        pooled = _stage_residuals(z, self.coarse.centers, self.residual.centers, cfg.M)
        dr = self.residual.epoch(pooled, cfg.ema_decay, cfg.batch_size, self.rng)
        self.reseeded = (dc, dr)

    def snapshot(self) -> CodebookPair:
        """Current codebooks rounded to float32 (exactly what gets serialized)."""
        coarse = self.coarse.centers.astype(np.float32).astype(np.float64)
        residual = self.residual.centers.astype(np.float32).astype(np.float64)
        residual[0] = 0.0
        return CodebookPair(coarse, residual,
                            [self.coarse.counts.copy(), self.residual.counts.copy()],
                            [self.coarse.sums.copy(), self.residual.sums.copy()], self.reseeded)


def train_codebooks(features, config: CodecConfig, rng: Rng) -> CodebookPair:
    """Fit the coarse codebook to the features and the shared residual codebook
    to the pooled residuals of stages >= 2 (``config.codebook_epochs`` EMA epochs)."""
    trainer = CodebookTrainer(features, config, rng)
    for _ in range(config.codebook_epochs):
        trainer.epoch(features)
    return trainer.snapshot()


@dataclass(frozen=True)
class RotationTransform:
    """Frozen map ``lam * R`` taking ``z`` onto ``e``.

    ``R`` is the product of two Householder reflections: ``(I - 2 v v^T)(I - 2 w w^T)``
    with ``w`` the unit bisector of ``z_hat`` and ``e_hat`` and ``v = e_hat``.
    """

    R: np.ndarray
    lam: float
    w: np.ndarray
    v: np.ndarray

    def apply(self, z):
        return self.lam * (self.R @ np.asarray(z, dtype=np.float64))

    def backward(self, g):
        return self.lam * (self.R.T @ np.asarray(g, dtype=np.float64))


def _householder_vectors(zh, eh):
    s = zh + eh
    ns = np.linalg.norm(s)
    if ns < 1e-12:
        # antiparallel: any unit vector orthogonal to z works as the first mirror
        basis = np.eye(len(zh))[np.argmin(np.abs(zh))]
        w = basis - (basis @ zh) * zh
        w /= np.linalg.norm(w)
    else:
        w = s / ns
    return w, eh


def rotation_transform(z, e) -> RotationTransform:
    """Rotation plus rescaling mapping ``z`` onto ``e``.

    A zero-norm input yields the identity with ``lam = 1``.
    """
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if z.shape != e.shape or z.ndim != 1:
        raise ParameterError("z and e must be vectors of equal length")
    d = len(z)
    nz, ne = np.linalg.norm(z), np.linalg.norm(e)
    if nz == 0.0 or ne == 0.0:
        return RotationTransform(np.eye(d), 1.0, np.zeros(d), np.zeros(d))
    w, v = _householder_vectors(z / nz, e / ne)
    R = (np.eye(d) - 2 * np.outer(v, v)) @ (np.eye(d) - 2 * np.outer(w, w))
    return RotationTransform(R, ne / nz, w, v)


def rotation_trick(z, e):
    """Batched forward: returns the codewords themselves plus the per-row
    ``(lam, w, v)`` needed by :func:`rotation_trick_backward`."""
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    nz = np.linalg.norm(z, axis=1)
    ne = np.linalg.norm(e, axis=1)
    lam = np.ones(len(z))
    w = np.zeros_like(z)
    v = np.zeros_like(z)
    for i in np.flatnonzero((nz > 0) & (ne > 0)):
        w[i], v[i] = _householder_vectors(z[i] / nz[i], e[i] / ne[i])
        lam[i] = ne[i] / nz[i]
    return e.copy(), (lam, w, v)


def rotation_trick_backward(grad, saved):
    """Gradient to the encoder output: ``(lam R)^T g`` with ``R`` held constant."""
    lam, w, v = saved
    g = np.asarray(grad, dtype=np.float64)
    # R^T = (I - 2 w w^T)(I - 2 v v^T); zero w, v rows give the identity
    g = g - 2 * v * (v * g).sum(1, keepdims=True)
    g = g - 2 * w * (w * g).sum(1, keepdims=True)
    return lam[:, None] * g


def vq_losses(z_cont, z_q):
    """Reconstruction (mean absolute) and commitment (mean squared) losses."""
    a = np.asarray(z_cont, dtype=np.float64)
    b = np.asarray(z_q, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def vq_losses_backward(z_cont, z_q):
    """Gradients of (L_rec, L_commit) with respect to ``z_cont``; the codeword is
    a constant for the commitment term."""
    diff = np.asarray(z_cont, dtype=np.float64) - np.asarray(z_q, dtype=np.float64)
    return np.sign(diff) / diff.size, 2.0 * diff / diff.size
