"""Domain types, configuration, seeded randomness and the synthetic scene generator."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCH_TAGS = ("mlp", "branched-mlp", "gru", "gru-attn")
ANC_MAGIC = b"ANC1"


class ScarError(Exception):
    """Base class for codec errors."""


class ParameterError(ScarError, ValueError):
    """An argument or configuration value is out of its valid range."""


class DataError(ScarError):
    """Input data is malformed."""


class IntegrityError(ScarError):
    """A stream failed a checksum or was truncated."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class Rng:
    """Seeded random stream backed by PCG64.

    PCG64 output is defined bit-for-bit independently of platform, so a seed
    fully determines every draw. ``child`` derives an independent stream for a
    worker without sharing state.
    """

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must fit in u64, got {seed}")
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def child(self, key: int) -> "Rng":
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        return Rng(int(ss.generate_state(2, np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.generator.permutation(n)


@dataclass(frozen=True)
class AnchorCloud:
    """Anchor positions (N x 3, world units) with latent features (N x D)."""

    positions: np.ndarray
    features: np.ndarray
    bbox: np.ndarray = None  # (2, 3): min corner, max corner

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        feat = np.ascontiguousarray(self.features, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise DataError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0] or feat.shape[1] < 1:
            raise DataError(f"features must be N x D matching positions, got {feat.shape}")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(feat)):
            raise DataError("positions and features must be finite")
        bbox = np.stack([pos.min(axis=0), pos.max(axis=0)]) if self.bbox is None else np.asarray(self.bbox, np.float64)
        if bbox.shape != (2, 3) or np.any(pos < bbox[0]) or np.any(pos > bbox[1]):
            raise DataError("every position must lie inside the bbox")
        pos.setflags(write=False)
        feat.setflags(write=False)
        bbox.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "bbox", bbox)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def to_bytes(self) -> bytes:
        """Serialize to the ``.anc`` layout (float32 payload)."""
        head = ANC_MAGIC + struct.pack("<QQ", self.n, self.d)
        return (head + self.positions.astype("<f4").tobytes()
                + self.features.astype("<f4").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AnchorCloud":
        if len(data) < 20 or data[:4] != ANC_MAGIC:
            raise DataError("not an ANC1 file")
        n, d = struct.unpack_from("<QQ", data, 4)
        need = 20 + 4 * n * 3 + 4 * n * d
        if len(data) != need:
            raise DataError(f"ANC1 size mismatch: expected {need} bytes, got {len(data)}")
        pos = np.frombuffer(data, "<f4", n * 3, 20).reshape(n, 3)
        feat = np.frombuffer(data, "<f4", n * d, 20 + 12 * n).reshape(n, d)
        return cls(pos.astype(np.float64), feat.astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AnchorCloud":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class CodecConfig:
    """All knobs of the codec.

    Defaults follow the full-size setting (4 stages, 1024-entry codebooks);
    ``CodecConfig.desk()`` gives the reduced preset used for CPU runs.
    """

    M: int = 4
    K_base: int = 1024
    K_res: int = 1024
    D: int = 16
    # spatial hash grid
    grid_levels: int = 8
    grid_min_res: int = 16
    grid_max_res: int = 512
    grid_table_size: int = 2**14
    grid_features: int = 4
    # entropy model
    arch: str = "gru-attn"
    hidden: int = 64
    embed: int = 32
    d_model: int = 64
    head_hidden: int = 128
    gru_layers: int = 2
    p_floor: float = 2.0**-16
    # training
    lambda_commit: float = 0.25
    t_start: int = 10_000
    t_end: int = 30_000
    total_steps: int = 40_000
    rate_weight: float = 1.0
    lr: float = 1e-3
    grid_lr: float = 1e-3
    batch_size: int = 256
    ema_decay: float = 0.99
    codebook_epochs: int = 30
    warmup_noise: float = 1e-2
    binarize_in_training: bool = False
    # scene + container
    n_anchors: int = 2000
    smoothness: float = 0.9
    mask_fractions: tuple = None
    compressor: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mask_fractions is not None:
            object.__setattr__(self, "mask_fractions", tuple(float(f) for f in self.mask_fractions))
        self.validate()

    def validate(self) -> None:
        positive = ("D", "grid_levels", "grid_min_res", "grid_max_res", "grid_table_size",
                    "grid_features", "hidden", "embed", "d_model", "head_hidden", "gru_layers",
                    "total_steps", "batch_size", "codebook_epochs", "n_anchors")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.M < 1:
            raise ParameterError(f"M must be >= 1, got {self.M}")
        if self.K_base < 2 or self.K_res < 2:
            raise ParameterError("codebook sizes must be >= 2")
        if max(self.K_base, self.K_res) > 2**15:
            raise ParameterError("codebook sizes above 2^15 cannot be coded at 16-bit precision")
        if not 0 <= self.t_start < self.t_end:
            raise ParameterError(f"need 0 <= t_start < t_end, got {self.t_start}, {self.t_end}")
        if self.grid_table_size & (self.grid_table_size - 1):
            raise ParameterError("grid_table_size must be a power of two")
        if self.grid_max_res < self.grid_min_res or (self.grid_levels > 1 and self.grid_max_res == self.grid_min_res):
            raise ParameterError("grid resolutions must be strictly increasing")
        if self.arch not in ARCH_TAGS:
            raise ParameterError(f"unknown arch {self.arch!r}; expected one of {ARCH_TAGS}")
        if not 0 < self.smoothness <= 1:
            raise ParameterError("smoothness must be in (0, 1]")
        if not 0 < self.p_floor < 1.0 / max(self.K_base, self.K_res):
            raise ParameterError("p_floor must be below 1/K")
        for name in ("lambda_commit", "rate_weight", "lr", "grid_lr", "warmup_noise"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if not 0 < self.ema_decay < 1:
            raise ParameterError("ema_decay must be in (0, 1)")
        if self.compressor not in (0, 1):
            raise ParameterError("compressor id must be 0 (none) or 1 (deflate)")
        fr = self.mask_fractions
        if fr is not None:
            if len(fr) != self.M or any(not 0 < f <= 1 for f in fr) or list(fr) != sorted(fr):
                raise ParameterError("mask_fractions needs M non-decreasing values in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must fit in u64")

    @classmethod
    def desk(cls, **overrides) -> "CodecConfig":
        """Reduced preset: minutes-scale CPU runs, finite-difference-sized models."""
        base = dict(K_base=256, K_res=256, grid_levels=4, grid_min_res=2, grid_max_res=8,
                    grid_table_size=2**10, grid_features=8, t_start=50, t_end=150,
                    total_steps=1500, grid_lr=1e-2, codebook_epochs=30,
                    binarize_in_training=True)
        base.update(overrides)
        return cls(**base)

    @property
    def resolutions(self) -> tuple:
        if self.grid_levels == 1:
            return (self.grid_min_res,)
        g = np.geomspace(self.grid_min_res, self.grid_max_res, self.grid_levels)
        res = [int(np.floor(r + 0.5)) for r in g]
        for i in range(1, len(res)):
            res[i] = max(res[i], res[i - 1] + 1)
        return tuple(res)

    def fractions(self) -> tuple:
        if self.mask_fractions is not None:
            return self.mask_fractions
        if self.M == 4:
            return (0.6, 0.75, 0.9, 1.0)
        if self.M == 1:
            return (1.0,)
        return tuple(float(f) for f in np.linspace(0.6, 1.0, self.M))

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["mask_fractions"] is not None:
            d["mask_fractions"] = list(d["mask_fractions"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "CodecConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ParameterError("config JSON must be an object")
        return cls.from_dict(d)


_JSON_TYPES = {"int": "integer", "float": "number", "str": "string", "bool": "boolean",
               "tuple": ["array", "null"]}

# JSON schema for config files; every key is optional and falls back to its default.
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {f.name: {"type": _JSON_TYPES[f.type]} for f in dataclasses.fields(CodecConfig)},
}


def generate_synthetic_cloud(n: int, d: int, smoothness: float, rng: Rng,
                             noise: float = 0.02, n_waves: int = 32) -> AnchorCloud:
    """Anchors in the unit cube carrying a smooth random field of their position.

    Each channel is a sum of ``n_waves`` random sinusoids. Higher smoothness
    lowers the maximum spatial frequency, so nearby anchors carry more
    strongly correlated features.
    """
    if int(n) < 1 or int(d) < 1:
        raise ParameterError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if not 0 < smoothness <= 1:
        raise ParameterError(f"smoothness must be in (0, 1], got {smoothness}")
    pos = rng.uniform(0.0, 1.0, (n, 3))
    max_freq = 1.0 + 8.0 * (1.0 - smoothness)  # cycles per unit length
    direction = rng.normal(size=(d, n_waves, 3))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    freq = 2 * np.pi * max_freq * rng.uniform(0.25, 1.0, (d, n_waves, 1))
    phase = rng.uniform(0, 2 * np.pi, (d, n_waves))
    amp = rng.normal(size=(d, n_waves)) / np.sqrt(n_waves)
    arg = np.einsum("nk,dwk->ndw", pos, direction * freq) + phase
    feat = np.einsum("ndw,dw->nd", np.sin(arg), amp) * np.sqrt(2.0)
    feat += noise * rng.normal(size=(n, d))
    return AnchorCloud(pos, feat)


def curriculum_beta(step: int, t_start: int, t_end: int) -> float:
    """Warm-up factor: 0 up to ``t_start``, 1 from ``t_end``, linear between."""
    if t_start >= t_end:
        raise ParameterError(f"t_start must be < t_end, got {t_start} >= {t_end}")
    if step <= t_start:
        return 0.0
    if step >= t_end:
        return 1.0
    return (step - t_start) / (t_end - t_start)


def blend_features(f_cont, f_q, beta: float):
    """Value of the soft-quantization mix ``(1 - beta) f_cont + beta f_q``.

    Under backpropagation the quantized branch acts as a straight-through
    path, so the gradient with respect to ``f_cont`` is the identity; see
    ``blend_features_backward``.
    """
    f_cont = np.asarray(f_cont, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_cont.shape != f_q.shape:
        raise ParameterError(f"dimension mismatch: {f_cont.shape} vs {f_q.shape}")
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        return f_cont.copy()
    if beta == 1.0:
        return f_q.copy()
    return (1.0 - beta) * f_cont + beta * f_q


def blend_features_backward(grad_out, beta: float):
    """Gradient delivered to ``f_cont``: both branches pass it through unchanged."""
    return (1.0 - beta) * np.asarray(grad_out) + beta * np.asarray(grad_out)
