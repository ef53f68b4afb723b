import json

import numpy as np
import pytest

from scar import harness
from scar.core import CodecConfig, DataError, ParameterError
from scar.entropy import TrainingError
from scar.harness import (PipelineError, cmd_ablate, cmd_inspect, cmd_pipeline, encode_trained, load_codec,
                          load_config, save_codec, scene_cloud, train_codec)

from conftest import tiny_config


@pytest.fixture(scope="module")
def run():
    cfg = tiny_config()
    return cfg, *cmd_pipeline(cfg, 5)


def test_pipeline_is_deterministic(run, tmp_path):
    cfg, report, data = run
    a, b = tmp_path / "a", tmp_path / "b"
    cmd_pipeline(cfg, 5, a)
    cmd_pipeline(cfg, 5, b)
    for name in ("scene.scar", "report.json", "report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "scene.scar").read_bytes() == data
    assert (a / "report.json").read_text() == report.to_json()


def test_report_consistency(run):
    cfg, report, data = run
    cum = [r.cumulative_bytes for r in report.layers]
    assert all(b > a for a, b in zip(cum, cum[1:]))
    assert cum[-1] == report.file_bytes == len(data)
    for r in report.layers:
        assert r.bits_per_anchor == pytest.approx(8 * (r.cumulative_bytes - report.header_bytes) / r.active)
    assert [r.active for r in report.layers] == [144, 180, 216, 240]
    mse = report.mse
    assert all(b <= a for a, b in zip(mse, mse[1:]))
    assert report.layers[-1].mse == report.layers[-1].mse_visible


def test_report_files(run, tmp_path):
    cfg, report, data = run
    harness.write_outputs(tmp_path, report, data)
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0].split(",") == list(report.CSV_COLUMNS) and len(rows) == 5
    js = json.loads((tmp_path / "report.json").read_text())
    assert js["seed"] == 5 and js["config"]["M"] == 4 and len(js["layers"]) == 4
    assert "encode_seconds" not in (tmp_path / "report.json").read_text()
    timings = json.loads((tmp_path / "report.timings.json").read_text())
    assert [t["layer"] for t in timings["layers"]] == [1, 2, 3, 4]


def test_trained_model_beats_uniform(run):
    cfg, report, _ = run
    uniform = cfg.n_anchors * cfg.M * np.log2(cfg.K_base)
    assert report.model_bits < uniform


def test_base_only_config_gives_one_row():
    report, _ = cmd_pipeline(tiny_config(M=1), 3)
    assert len(report.layers) == 1 and report.layers[0].active == report.n_anchors


def test_curriculum_log_covers_phases():
    cfg = tiny_config(total_steps=250)
    codec = train_codec(scene_cloud(cfg, 1), cfg, 1)
    phases = {e["step"]: e["phase"] for e in codec.log}
    assert phases[100] == 3 and phases[249] == 3
    assert codec.log[0]["step"] >= cfg.t_start


def test_failures_carry_phase_and_step(monkeypatch):
    cfg = tiny_config()

    def boom(*args, **kwargs):
        raise TrainingError("non-finite rate loss")

    monkeypatch.setattr(harness, "train_step", boom)
    with pytest.raises(PipelineError) as exc:
        train_codec(scene_cloud(cfg, 1), cfg, 1)
    assert (exc.value.phase, exc.value.step) == (2, cfg.t_start)
    assert "phase 2, step 5" in str(exc.value)


def test_codec_bundle_round_trip(tmp_path):
    cfg = tiny_config()
    cloud = scene_cloud(cfg, 4)
    codec = train_codec(cloud, cfg, 4)
    save_codec(tmp_path / "c.npz", codec)
    back = load_codec(tmp_path / "c.npz", cloud)
    assert encode_trained(cloud, back).to_bytes() == encode_trained(cloud, codec).to_bytes()
    with pytest.raises(DataError):
        load_codec(tmp_path / "missing.npz", cloud)


def test_load_config(tmp_path):
    assert load_config(None) == CodecConfig.desk()
    p = tmp_path / "c.json"
    p.write_text('{"M": 2, "K_base": 32}')
    cfg = load_config(p)
    assert (cfg.M, cfg.K_base, cfg.K_res) == (2, 32, 256)
    p.write_text("{not json")
    with pytest.raises(ParameterError):
        load_config(p)
    p.write_text('{"colour": "blue"}')
    with pytest.raises(ParameterError):
        load_config(p)


class TestAblation:
    def test_singleton_equals_pipeline(self, run):
        cfg, report, data = run
        rows = cmd_ablate(cfg, ["gru-attn"], 5)
        assert len(rows) == 1
        assert rows[0].file_bytes == report.file_bytes and rows[0].mse == report.mse[-1]
        assert rows[0].payload_bytes == report.payload_bytes

    def test_rows_share_indices(self, tmp_path):
        cfg = tiny_config()
        rows = cmd_ablate(cfg, ["mlp", "gru"], 6, tmp_path)
        assert np.array_equal(rows[0].indices, rows[1].indices)
        assert rows[0].mse == rows[1].mse
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("tag,") and [ln.split(",")[0] for ln in lines[1:]] == ["mlp", "gru"]

    def test_invalid_tags(self):
        with pytest.raises(ParameterError):
            cmd_ablate(tiny_config(), ["gru", "lstm"], 0)
        with pytest.raises(ParameterError):
            cmd_ablate(tiny_config(), [], 0)


class TestInspect:
    def test_valid_stream(self, run):
        cfg, _, data = run
        s = cmd_inspect(data)
        assert s.ok and s.complete_layers == cfg.M and s.bad_layers == []
        assert any(line.startswith("layers (M)      4") for line in s.lines)

    def test_flipped_byte_reports_that_layer(self, run):
        _, report, data = run
        bad = bytearray(data)
        bad[report.layers[1].cumulative_bytes + 20] ^= 0xFF  # inside layer 3's payload
        s = cmd_inspect(bytes(bad))
        assert not s.ok and s.bad_layers == [3]
        assert sum("CRC MISMATCH" in line for line in s.lines) == 1

    def test_truncated_after_layer_two(self, run):
        _, report, data = run
        s = cmd_inspect(data[:report.layers[1].cumulative_bytes + 3])
        assert not s.ok and s.complete_layers == 2
        assert s.lines[-1] == "complete layers 2 of 4; decodable prefix 2"

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "x.scar"
        p.write_bytes(b"garbage")
        with pytest.raises(DataError):
            cmd_inspect(p)
        with pytest.raises(DataError):
            cmd_inspect(tmp_path / "missing.scar")
