import numpy as np
import pytest

from conftest import NO_QUANT, W4A4KV16
from mxquant.calib import CalibConfig
from mxquant.errors import ShapeError
from mxquant.formats import FormatConfig
from mxquant.harness import (
    ToyBlockSpec,
    _block_forward,
    _kv_site,
    build_toy_block,
    calibrate_block,
    simulate_block,
)

SPEC = ToyBlockSpec(hidden=128, head_dim=32, n_heads=4, mlp_dim=256)


class TestBuild:
    def test_text_has_six_placements(self):
        block = build_toy_block(SPEC)
        assert len(block.placements) == 6
        assert {p.site for p in block.placements} == {"p_qkv", "p_o", "p_up", "p_down", "p_k", "p_v"}

    def test_vit_has_four_placements(self):
        block = build_toy_block(ToyBlockSpec(128, 32, 4, 256, template="vit"))
        assert len(block.placements) == 4
        assert {p.site for p in block.placements} == {"p_qkv", "p_o", "p_fc1", "p_fc2"}

    def test_per_head_flags(self):
        block = build_toy_block(SPEC)
        per_head = {p.site for p in block.placements if p.per_head}
        assert per_head == {"p_k", "p_v"}

    def test_kv_transform_is_one_block_per_head(self):
        block = build_toy_block(SPEC)
        for t in block.site_theta["p_k"].transforms:
            assert t.n == 32 and t.k == 1
        assert len(block.site_theta["p_k"].transforms) == SPEC.n_heads

    def test_every_linear_has_exactly_one_activation_placement(self):
        for template in ("text", "vit"):
            block = build_toy_block(ToyBlockSpec(128, 32, 4, 256, template=template))
            covered = [
                name
                for p in block.placements
                if not p.per_head
                for name in p.applies_to
            ]
            assert sorted(covered) == sorted(block.weights.keys())

    def test_misaligned_dims_rejected(self):
        with pytest.raises(ShapeError):
            ToyBlockSpec(hidden=120, head_dim=32, n_heads=4, mlp_dim=256)


class TestSimulate:
    def test_identity_no_quant_exact(self, rng):
        block = build_toy_block(SPEC, seed=1)
        x = rng.normal(size=(16, 128))
        y, report = simulate_block(block, x, NO_QUANT)
        ref = _block_forward(block, x, None)
        assert np.array_equal(y, ref)
        assert all(v == 0.0 for v in report.values())

    def test_e2m1_worse_than_e4m3_per_site(self, rng):
        block = build_toy_block(SPEC, seed=2)
        x = rng.normal(size=(64, 128))
        _, rep4 = simulate_block(block, x, W4A4KV16)
        _, rep8 = simulate_block(block, x, FormatConfig.from_name("W8A8KV16"))
        for site in rep4:
            assert rep4[site] > rep8[site]

    def test_kv_quantization_adds_error(self, rng):
        block = build_toy_block(SPEC, seed=3)
        x = rng.normal(size=(32, 128))
        _, kv16 = simulate_block(block, x, FormatConfig.from_name("W16A16KV16"))
        _, kv4 = simulate_block(block, x, FormatConfig.from_name("W16A16KV4"))
        assert kv4["output"] > kv16["output"]

    def test_per_head_independence(self, rng):
        block = build_toy_block(SPEC, seed=4)
        vals = [rng.normal(size=(8, 32)) for _ in range(4)]
        base = _kv_site(block, "p_k", vals, FormatConfig.from_name("W16A16KV4"))
        block.site_theta["p_k"].transforms[0].a *= 1.3
        pert = _kv_site(block, "p_k", vals, FormatConfig.from_name("W16A16KV4"))
        assert not np.array_equal(base[0], pert[0])
        for h in range(1, 4):
            assert np.array_equal(base[h], pert[h])


class TestCalibrateBlock:
    def test_calibration_beats_identity_rtn(self):
        rng = np.random.default_rng(11)
        block = build_toy_block(SPEC, seed=11)
        x = rng.normal(size=(64, 128))
        x[:, 40] *= 30.0  # persistent outlier channel feeding the block
        _, before = simulate_block(block, x, W4A4KV16)
        calibrate_block(block, x, CalibConfig(lr=0.02), W4A4KV16)
        _, after = simulate_block(block, x, W4A4KV16)
        assert after["output"] < before["output"]

    def test_calibrated_sites_have_non_identity_transforms(self):
        rng = np.random.default_rng(12)
        block = build_toy_block(SPEC, seed=12)
        x = rng.normal(size=(32, 128))
        x[:, 7] *= 30.0
        calibrate_block(block, x, CalibConfig(lr=0.02, epochs=2), W4A4KV16)
        a = block.site_theta["p_qkv"].transforms[0].a
        assert np.abs(a - np.eye(8)).max() > 1e-3
