import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scar.core import (CONFIG_SCHEMA, AnchorCloud, CodecConfig, DataError, ParameterError, Rng, blend_features,
                       blend_features_backward, curriculum_beta, generate_synthetic_cloud)


def test_rng_is_reproducible_and_children_are_independent():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(size=5), b.normal(size=5))
    assert np.array_equal(Rng(42).child(1).uniform(size=4), Rng(42).child(1).uniform(size=4))
    assert not np.array_equal(Rng(42).child(1).uniform(size=4), Rng(42).child(2).uniform(size=4))
    assert not np.array_equal(Rng(1).uniform(size=4), Rng(2).uniform(size=4))


def test_rng_accepts_full_u64_seeds():
    assert np.isfinite(Rng(2**64 - 1).uniform())


class TestAnchorCloud:
    def test_bbox_derived_from_positions(self):
        pos = np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]])
        c = AnchorCloud(pos, np.zeros((2, 4)))
        assert np.array_equal(c.bbox, [[0.0, -1.0, 0.5], [3.0, 1.0, 2.0]])
        assert (c.n, c.d) == (2, 4)

    @pytest.mark.parametrize("pos, feat", [
        (np.zeros((0, 3)), np.zeros((0, 4))),
        (np.zeros((2, 2)), np.zeros((2, 4))),
        (np.zeros((2, 3)), np.zeros((3, 4))),
        (np.zeros((2, 3)), np.array([[np.nan] * 4, [0.0] * 4])),
    ])
    def test_invalid_clouds_rejected(self, pos, feat):
        with pytest.raises(DataError):
            AnchorCloud(pos, feat)

    def test_position_outside_bbox_rejected(self):
        with pytest.raises(DataError):
            AnchorCloud(np.ones((1, 3)), np.zeros((1, 2)), bbox=np.zeros((2, 3)))

    def test_anc_layout(self):
        pos = np.array([[0.5, 0.25, 1.0]])
        feat = np.array([[1.5, -2.0]])
        data = AnchorCloud(pos, feat).to_bytes()
        assert data[:4] == b"ANC1"
        assert struct.unpack_from("<QQ", data, 4) == (1, 2)
        assert struct.unpack_from("<3f", data, 20) == (0.5, 0.25, 1.0)
        assert struct.unpack_from("<2f", data, 32) == (1.5, -2.0)
        assert len(data) == 40

    def test_anc_round_trip(self, tmp_path):
        c = generate_synthetic_cloud(50, 3, 0.5, Rng(0))
        c.save(tmp_path / "a.anc")
        back = AnchorCloud.load(tmp_path / "a.anc")
        assert np.array_equal(back.positions, c.positions.astype(np.float32))
        assert np.array_equal(back.features, c.features.astype(np.float32))

    @pytest.mark.parametrize("data", [b"", b"XXXX" + bytes(16), b"ANC1" + struct.pack("<QQ", 2, 2) + bytes(8)])
    def test_malformed_anc_rejected(self, data):
        with pytest.raises(DataError):
            AnchorCloud.from_bytes(data)


class TestConfig:
    def test_defaults(self):
        c = CodecConfig()
        assert (c.M, c.K_base, c.K_res, c.D) == (4, 1024, 1024, 16)
        assert c.grid_levels == 8 and c.resolutions[0] == 16 and c.resolutions[-1] == 512
        assert c.fractions() == (0.6, 0.75, 0.9, 1.0)

    def test_desk_preset(self):
        c = CodecConfig.desk()
        assert (c.n_anchors, c.D, c.M, c.K_base, c.K_res, c.grid_levels) == (2000, 16, 4, 256, 256, 4)

    @pytest.mark.parametrize("kw", [
        {"M": 0}, {"K_base": 1}, {"K_res": 1}, {"t_start": 5, "t_end": 5}, {"grid_table_size": 100},
        {"hidden": 0}, {"arch": "transformer"}, {"smoothness": 0.0}, {"ema_decay": 1.0},
        {"compressor": 7}, {"mask_fractions": (0.5, 0.4, 0.9, 1.0)}, {"seed": -1},
    ])
    def test_invalid_configs_fail_fast(self, kw):
        with pytest.raises(ParameterError):
            CodecConfig(**kw)

    def test_resolutions_strictly_increase(self):
        res = CodecConfig(grid_levels=6, grid_min_res=2, grid_max_res=5).resolutions
        assert all(b > a for a, b in zip(res, res[1:]))

    def test_json_round_trip(self):
        c = CodecConfig.desk(mask_fractions=(0.5, 0.7, 0.9, 1.0), seed=9)
        assert CodecConfig.from_json(c.to_json()) == c

    def test_unknown_key_rejected(self):
        with pytest.raises(ParameterError):
            CodecConfig.from_dict({"bogus": 1})
        with pytest.raises(ParameterError):
            CodecConfig.from_json("[1, 2]")

    def test_schema_covers_every_field(self):
        assert set(CONFIG_SCHEMA["properties"]) == set(CodecConfig().to_dict())
        jsonschema = pytest.importorskip("jsonschema")
        jsonschema.validate(json.loads(CodecConfig.desk().to_json()), CONFIG_SCHEMA)

    def test_fractions_for_other_stage_counts(self):
        assert CodecConfig(M=1).fractions() == (1.0,)
        fr = CodecConfig(M=3).fractions()
        assert len(fr) == 3 and fr[-1] == 1.0


class TestSyntheticCloud:
    def test_single_anchor(self):
        c = generate_synthetic_cloud(1, 4, 1.0, Rng(0))
        assert (c.n, c.d) == (1, 4) and np.all(np.isfinite(c.features))

    def test_deterministic(self):
        a = generate_synthetic_cloud(2000, 16, 0.5, Rng(7))
        b = generate_synthetic_cloud(2000, 16, 0.5, Rng(7))
        assert a.to_bytes() == b.to_bytes()

    def test_positions_in_unit_cube(self):
        c = generate_synthetic_cloud(500, 2, 0.5, Rng(1))
        assert c.positions.min() >= 0.0 and c.positions.max() <= 1.0

    @pytest.mark.parametrize("n, d, s", [(0, 4, 0.5), (4, 0, 0.5), (4, 4, 0.0), (4, 4, 1.5)])
    def test_invalid_arguments(self, n, d, s):
        with pytest.raises(ParameterError):
            generate_synthetic_cloud(n, d, s, Rng(0))

    @staticmethod
    def _knn_feature_distance(cloud, k=5):
        p, f = cloud.positions, cloud.features
        d2 = ((p[:, None] - p[None]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nn = np.argsort(d2, axis=1)[:, :k]
        return np.linalg.norm(f[:, None] - f[nn], axis=-1).mean()

    def test_smoother_fields_have_closer_neighbours(self):
        smooth = generate_synthetic_cloud(2000, 16, 0.9, Rng(3))
        rough = generate_synthetic_cloud(2000, 16, 0.1, Rng(3))
        assert self._knn_feature_distance(smooth) < self._knn_feature_distance(rough)


class TestCurriculum:
    def test_boundaries_and_midpoint(self):
        assert curriculum_beta(10000, 10000, 30000) == 0.0
        assert curriculum_beta(30000, 10000, 30000) == 1.0
        assert curriculum_beta(20000, 10000, 30000) == 0.5

    def test_invalid_window(self):
        with pytest.raises(ParameterError):
            curriculum_beta(0, 5, 5)

    @given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 50), st.integers(1, 50))
    def test_monotone_and_bounded(self, s1, s2, t0, width):
        lo, hi = sorted((s1, s2))
        b1, b2 = curriculum_beta(lo, t0, t0 + width), curriculum_beta(hi, t0, t0 + width)
        assert 0.0 <= b1 <= b2 <= 1.0


class TestBlend:
    def test_endpoints_are_exact(self):
        f = np.array([0.1, 0.2, 0.3])
        q = np.array([1.0 / 3.0, 7.0, -2.0])
        assert np.array_equal(blend_features(f, q, 0.0), f)
        assert np.array_equal(blend_features(f, q, 1.0), q)

    def test_linear_interpolation(self):
        assert np.allclose(blend_features([2.0, 0.0], [0.0, 2.0], 0.25), [1.5, 0.5])

    def test_errors(self):
        with pytest.raises(ParameterError):
            blend_features([1.0, 2.0], [1.0], 0.5)
        with pytest.raises(ParameterError):
            blend_features([1.0], [1.0], 1.5)

    @given(st.floats(0, 1))
    def test_gradient_passes_straight_through(self, beta):
        g = np.array([1.0, -2.0, 0.5])
        assert np.allclose(blend_features_backward(g, beta), g, rtol=0, atol=1e-15)
