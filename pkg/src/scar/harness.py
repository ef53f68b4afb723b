"""End-to-end driver: curriculum training, coding, prefix evaluation, ablation
and container inspection.

Random streams are split by purpose (cloud, codebooks, model init, batches,
noise) so that changing the entropy architecture never perturbs the cloud,
the codebooks or the index tensor.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitstream import (ProgressiveBitstream, decode_layers, decode_positions, encode_positions, encode_scene,
                        importance_masks)
from .context import SpatialGrid, dequantize_grid
from .core import (ARCH_TAGS, CodecConfig, DataError, IntegrityError, ParameterError, Rng, ScarError, AnchorCloud,
                   blend_features, curriculum_beta, generate_synthetic_cloud)
from .entropy import AdamState, EntropyModel, build_ablation_model, rate_loss, train_step
from .rvq import CodebookPair, CodebookTrainer, IndexTensor, dequantize, quantize, vq_losses

# child-stream keys of the run seed
CLOUD, CODEBOOKS, MODEL, BATCHES, NOISE = 1, 2, 3, 4, 5

LOG_EVERY = 100


class PipelineError(ScarError):
    """A failure inside the curriculum, tagged with where it happened."""

    def __init__(self, message: str, phase: int, step: int):
        super().__init__(f"phase {phase}, step {step}: {message}")
        self.phase = phase
        self.step = step


@dataclass
class TrainedCodec:
    config: CodecConfig
    codebooks: CodebookPair
    grid: SpatialGrid
    model: EntropyModel
    indices: IndexTensor
    norms: np.ndarray
    log: list = field(default_factory=list)


def scene_cloud(config: CodecConfig, seed: int) -> AnchorCloud:
    """The synthetic scene a (config, seed) pair denotes, rounded to the
    float32 ``.anc`` precision so a saved copy is the same scene."""
    cloud = generate_synthetic_cloud(config.n_anchors, config.D, config.smoothness, Rng(seed).child(CLOUD))
    return AnchorCloud.from_bytes(cloud.to_bytes())


def train_codec(cloud: AnchorCloud, config: CodecConfig, seed: int, arch: str | None = None) -> TrainedCodec:
    """Run the three-phase curriculum on a fixed cloud.

    phase 1, steps [0, t_start): codebook EMA epochs on features plus uniform
        noise of amplitude ``warmup_noise``; the entropy model is idle.
    phase 2, steps [t_start, t_end): codebook EMA epochs on clean features;
        the entropy model trains on the current indices with its rate term
        scaled by beta, and the beta-blended features feed the logged VQ losses.
    phase 3, steps [t_end, total_steps): codebooks frozen, full rate loss.
    """
    if cloud.d != config.D:
        raise ParameterError(f"cloud has D={cloud.d}, config expects D={config.D}")
    arch = arch or config.arch
    root = Rng(seed)
    cb_rng, noise_rng, batch_rng = root.child(CODEBOOKS), root.child(NOISE), root.child(BATCHES)
    init_rng = root.child(MODEL)
    z = cloud.features
    n = cloud.n
    amp = config.warmup_noise

    grid = SpatialGrid.create(config, cloud.bbox, init_rng.child(0))
    model = build_ablation_model(arch, config, grid.width, init_rng.child(1))
    adam = AdamState(lr=config.lr, grid_lr=config.grid_lr)
    log = []

    phase, step = 1, 0
    try:
        noisy = z + noise_rng.uniform(-amp, amp, z.shape) if config.t_start > 0 else z
        trainer = CodebookTrainer(noisy, config, cb_rng)
        books = frozen = None
        for step in range(config.total_steps):
            phase = 1 if step < config.t_start else 2 if step < config.t_end else 3
            if phase == 1:
                trainer.epoch(z + noise_rng.uniform(-amp, amp, z.shape))
                continue
            if phase == 2 or books is None:
                trainer.epoch(z)
                books = trainer.snapshot()
            beta = curriculum_beta(step, config.t_start, config.t_end)
            rows = batch_rng.integers(0, n, size=min(config.batch_size, n))
            if phase == 3:
                if frozen is None:
                    frozen, _ = quantize(z, books, config.M)
                idx = IndexTensor(frozen.indices[rows], *books.sizes)
            else:
                idx, _ = quantize(z[rows], books, config.M)
            weight = beta * config.rate_weight if phase == 2 else config.rate_weight
            _, _, bits = train_step(model, grid, (cloud.positions[rows], idx.indices), adam,
                                    weight=weight, binarize=config.binarize_in_training)
            if step % LOG_EVERY == 0 or step == config.total_steps - 1:
                f_q = dequantize(idx, books, config.M)
                blended = blend_features(z[rows], f_q, beta)
                rec, commit = vq_losses(blended, f_q)
                log.append({"step": step, "phase": phase, "beta": beta, "bits_per_anchor": bits,
                            "l_rec": rec, "l_commit": config.lambda_commit * commit})
        phase, step = 3, config.total_steps
        if books is None:
            books = trainer.snapshot()
        indices, norms = quantize(z, books, config.M)
    except ScarError as exc:
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(str(exc), phase, step) from exc
    except FloatingPointError as exc:
        raise PipelineError(str(exc), phase, step) from exc
    return TrainedCodec(config.replace(arch=arch), books, grid, model, indices, norms, log)


def save_codec(path, codec: TrainedCodec) -> None:
    """Trained state as an ``.npz`` bundle (float tables kept at full precision)."""
    np.savez(path, config=np.frombuffer(codec.config.to_json().encode(), np.uint8),
             codebooks=np.frombuffer(codec.codebooks.to_bytes(), np.uint8),
             model=np.frombuffer(codec.model.to_bytes(), np.uint8),
             grid_resolutions=np.array(codec.grid.resolutions), grid_tables=codec.grid.tables,
             grid_bbox=codec.grid.bbox)


def load_codec(path, cloud: AnchorCloud) -> TrainedCodec:
    """Inverse of :func:`save_codec`; indices are recomputed for ``cloud``."""
    try:
        with np.load(path) as z:
            config = CodecConfig.from_json(z["config"].tobytes().decode())
            books = CodebookPair.from_bytes(z["codebooks"].tobytes())
            grid = SpatialGrid(tuple(z["grid_resolutions"]), z["grid_tables"], z["grid_bbox"])
            model_bytes = z["model"].tobytes()
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise DataError(f"cannot read codec bundle {path}: {exc}") from exc
    model = EntropyModel.from_config(config, grid.width, zero=True).load_bytes(model_bytes)
    if cloud.d != books.dim:
        raise DataError(f"cloud has D={cloud.d}, codebooks expect {books.dim}")
    if not np.array_equal(grid.bbox, cloud.bbox):
        raise DataError("cloud bounding box differs from the one the grid was trained on")
    indices, norms = quantize(cloud.features, books, config.M)
    return TrainedCodec(config, books, grid, model, indices, norms)


@dataclass
class LayerRecord:
    layer: int
    cumulative_bytes: int
    coded_bytes: int  # range-coded index bytes of this layer alone
    active: int
    bits_per_anchor: float
    mse: float  # over all anchors, invisible ones reconstructed as zero
    mse_visible: float
    l1: float
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0


@dataclass
class RdReport:
    config: dict
    seed: int
    arch: str
    n_anchors: int
    file_bytes: int
    header_bytes: int
    model_bits: float  # teacher-forced code length under the transmitted model
    layers: list

    CSV_COLUMNS = ("layer", "cumulative_bytes", "coded_bytes", "active", "bits_per_anchor",
                   "mse", "mse_visible", "l1")

    def to_dict(self) -> dict:
        rows = [{k: getattr(r, k) for k in self.CSV_COLUMNS} for r in self.layers]
        return {"seed": self.seed, "arch": self.arch, "n_anchors": self.n_anchors,
                "file_bytes": self.file_bytes, "header_bytes": self.header_bytes,
                "model_bits": self.model_bits, "layers": rows, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.layers:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k)
                        for k in self.CSV_COLUMNS])
        return buf.getvalue()

    def timings(self) -> dict:
        # wall-clock numbers live apart from the report so the report stays byte-deterministic
        return {"layers": [{"layer": r.layer, "encode_seconds": r.encode_seconds,
                            "decode_seconds": r.decode_seconds} for r in self.layers]}

    @property
    def mse(self) -> list:
        return [r.mse for r in self.layers]

    @property
    def payload_bytes(self) -> int:
        return sum(r.coded_bytes for r in self.layers)


def encode_trained(cloud: AnchorCloud, codec: TrainedCodec) -> ProgressiveBitstream:
    masks = importance_masks(codec.norms[:, 0], codec.config.fractions())
    return encode_scene(cloud, codec.codebooks, codec.grid, codec.model, masks, codec.config.M,
                        codec.config, indices=codec.indices)


def transmitted_rate(cloud: AnchorCloud, codec: TrainedCodec, stream: ProgressiveBitstream) -> float:
    """Code length in bits the transmitted model assigns to every anchor's indices,
    evaluated exactly as the decoder sees it (1-bit grid, float32 weights,
    quantized positions)."""
    h = stream.header
    grid = dequantize_grid(h.grid, cloud.bbox)
    model = codec.model.load_bytes(h.model_bytes)
    pos = decode_positions(encode_positions(cloud.positions, cloud.bbox))
    return rate_loss(model, grid, cloud, codec.indices, positions=pos)


def evaluate(cloud: AnchorCloud, codec: TrainedCodec, seed: int):
    """Encode, decode every prefix and measure it. Returns (report, stream bytes)."""
    t0 = time.perf_counter()
    stream = encode_trained(cloud, codec)
    enc_s = time.perf_counter() - t0
    data = stream.to_bytes()
    preamble = stream.preamble_size
    cum = stream.cumulative_sizes()
    records = []
    for L in range(1, codec.config.M + 1):
        t0 = time.perf_counter()
        out = decode_layers(data, L)
        dec_s = time.perf_counter() - t0
        vis = out.mask.levels[-1]
        if not np.array_equal(out.indices[vis], codec.indices.indices[vis, :L]):
            raise IntegrityError(f"decoded indices differ from the encoder's at layer {L}", layer=L)
        err = out.cloud.features - cloud.features
        active = int(vis.sum())
        records.append(LayerRecord(
            layer=L, cumulative_bytes=cum[L - 1], coded_bytes=stream.coded_bytes[L - 1], active=active,
            bits_per_anchor=8.0 * (cum[L - 1] - preamble) / active,
            mse=float((err ** 2).mean()), mse_visible=float((err[vis] ** 2).mean()),
            l1=float(np.abs(err).mean()), encode_seconds=enc_s if L == 1 else 0.0, decode_seconds=dec_s))
    report = RdReport(codec.config.to_dict() | {"seed": seed}, seed, codec.config.arch, cloud.n,
                      len(data), preamble, transmitted_rate(cloud, codec, stream), records)
    return report, data


def write_outputs(out_dir, report: RdReport, data: bytes | None = None, stem: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.timings.json").write_text(json.dumps(report.timings(), indent=2) + "\n")
    if data is not None:
        (out / "scene.scar").write_bytes(data)


def load_config(path) -> CodecConfig:
    """Config file (JSON object of overrides on the desk preset); None gives the preset."""
    if path is None:
        return CodecConfig.desk()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    try:
        overrides = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ParameterError("config JSON must be an object")
    return CodecConfig.from_dict(CodecConfig.desk().to_dict() | overrides)


def cmd_pipeline(config: CodecConfig, seed: int, out_dir=None, cloud: AnchorCloud | None = None):
    """Generate (or take) a cloud, train, code, decode every prefix and report.

    Writes report.json, report.csv, report.timings.json and scene.scar when
    ``out_dir`` is given. Returns ``(report, stream bytes)``.
    """
    cloud = scene_cloud(config, seed) if cloud is None else cloud
    codec = train_codec(cloud, config, seed)
    report, data = evaluate(cloud, codec, seed)
    if out_dir is not None:
        write_outputs(out_dir, report, data)
    return report, data


@dataclass
class AblationRow:
    tag: str
    file_bytes: int
    payload_bytes: int
    mse: float
    model_bits: float
    indices: np.ndarray = field(repr=False, default=None)


def cmd_ablate(config: CodecConfig, tags, seed: int, out_dir=None) -> list:
    """One pipeline run per architecture tag on a shared cloud.

    Codebooks and indices depend only on the codebook stream of the seed, so
    every row sees the same index tensor; this is checked, not assumed.
    """
    tags = list(tags)
    if not tags:
        raise ParameterError("need at least one architecture tag")
    unknown = [t for t in tags if t not in ARCH_TAGS]
    if unknown:
        raise ParameterError(f"unknown architecture tags {unknown}; expected a subset of {ARCH_TAGS}")
    cloud = scene_cloud(config, seed)
    rows, reference = [], None
    for tag in tags:
        codec = train_codec(cloud, config, seed, arch=tag)
        if reference is None:
            reference = codec.indices.indices
        elif not np.array_equal(reference, codec.indices.indices):
            raise ScarError(f"index tensor of {tag} differs from the first row")
        report, data = evaluate(cloud, codec, seed)
        rows.append(AblationRow(tag, report.file_bytes, report.payload_bytes, report.mse[-1],
                                report.model_bits, codec.indices.indices))
        if out_dir is not None:
            write_outputs(Path(out_dir) / tag, report, data)
    if out_dir is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("tag", "file_bytes", "payload_bytes", "mse", "model_bits"))
        for r in rows:
            w.writerow((r.tag, r.file_bytes, r.payload_bytes, repr(r.mse), repr(r.model_bits)))
        Path(out_dir, "ablation.csv").write_text(buf.getvalue())
    return rows


@dataclass
class InspectSummary:
    lines: list
    ok: bool
    complete_layers: int
    bad_layers: list


def cmd_inspect(path_or_bytes) -> InspectSummary:
    """Describe a container: header fields, chunk sizes, CRC status, and
    whether the complete prefix actually decodes."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        try:
            data = Path(path_or_bytes).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {path_or_bytes}: {exc}") from exc
    stream = ProgressiveBitstream.from_bytes(data)
    h = stream.header
    cfg = h.config
    lines = [f"file bytes      {len(data)}",
             f"header bytes    {stream.preamble_size}",
             f"anchors         {h.n}",
             f"layers (M)      {cfg.M}",
             f"codebooks       K_base={cfg.K_base} K_res={cfg.K_res} D={cfg.D}",
             f"entropy model   {cfg.arch}",
             f"compressor      {h.compressor}",
             "bbox            " + " ".join(f"{v:.6g}" for v in h.bbox.ravel())]
    for name, size in h.section_sizes().items():
        lines.append(f"  {name:<14}{size}")
    bad = []
    for c in stream.chunks:
        status = "ok" if c.valid else "CRC MISMATCH"
        if not c.valid:
            bad.append(c.layer)
        lines.append(f"layer {c.layer}: {9 + len(c.payload)} bytes, crc {c.crc:08x} {status}")
    complete = len(stream.chunks)
    if stream.truncated_layer is not None:
        lines.append(f"layer {stream.truncated_layer}: truncated")
    ok = not bad and complete == cfg.M
    decodable = 0
    good_prefix = bad[0] - 1 if bad else complete
    if good_prefix > 0:
        decode_layers(stream, good_prefix)
        decodable = good_prefix
    lines.append(f"complete layers {complete} of {cfg.M}; decodable prefix {decodable}")
    return InspectSummary(lines, ok, complete, bad)
