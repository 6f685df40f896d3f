import json

import pytest

from corelower import models
from corelower.ir import GraphBuilder, image_spec, token_spec
from corelower.legalize import LegalizeConfig, legalize
from corelower.profiles import (
    ChipProfile, ProfileError, UnknownProfile, blocking_violations,
    builtin_profile_names, check_profile, count_macs, deployable, load_profile,
)
from corelower.quant import BitWidthConfig, attach_fakequant

ALL_PROFILES = ("ethos_n", "hi3559a", "mlu270_s4", "tensorrt", "movidius",
                "ssc336q", "rk3568")


class TestProfileData:
    def test_seven_builtins_ship(self):
        assert builtin_profile_names() == sorted(ALL_PROFILES)

    def test_unknown_profile_raises(self):
        with pytest.raises(UnknownProfile):
            load_profile("tpu_v9")

    def test_universal_core_column_is_strong(self):
        for name in ALL_PROFILES:
            p = load_profile(name)
            for op in ("conv3x3", "batch_norm", "fc"):
                assert p.op_support[op] == "strong", (name, op)

    def test_profile_invariant_enforced(self):
        with pytest.raises(ProfileError):
            ChipProfile(name="bogus", op_support={"conv3x3": "weak",
                                                  "batch_norm": "strong",
                                                  "fc": "strong"})

    def test_novel_profile_from_file_no_code_change(self, tmp_path):
        doc = {
            "name": "desk_npu",
            "op_support": {"conv3x3": "strong", "batch_norm": "strong",
                           "fc": "strong", "layer_norm": "unsupported"},
            "max_channels": 64,
            "conv_kernel_whitelist": [[3, 3, 1], [3, 3, 2]],
            "min_bits": 4,
            "notes": "golden-file test chip",
        }
        path = tmp_path / "desk_npu.json"
        path.write_text(json.dumps(doc))
        p = load_profile(str(path))
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 80, 8, 8))
        y = gb.conv(x, 80, kernel=3, name="wide")
        g = gb.graph([y])
        rules = {v.rule for v in blocking_violations(check_profile(g, p))}
        assert rules == {"channels"}

    def test_env_dir_lookup(self, tmp_path, monkeypatch):
        doc = {"name": "envchip",
               "op_support": {"conv3x3": "strong", "batch_norm": "strong",
                              "fc": "strong"}}
        (tmp_path / "envchip.json").write_text(json.dumps(doc))
        monkeypatch.setenv("CORELOWER_PROFILE_DIR", str(tmp_path))
        assert load_profile("envchip").name == "envchip"


class TestCheckProfile:
    def test_layernorm_flagged_on_hi3559a(self):
        g = models.build("tiny_transformer", seed=0)
        violations = blocking_violations(check_profile(g, load_profile("hi3559a")))
        msgs = " ".join(str(v) for v in violations)
        assert "layer_norm unsupported" in msgs
        assert "embedding unsupported" in msgs

    def test_core_graph_clean_everywhere(self):
        g = models.build("tiny_resnet", seed=0)
        lg, _ = legalize(g, LegalizeConfig(seed=0))
        lg = attach_fakequant(lg, BitWidthConfig.from_notation(
            "8W8A", first_last_full_precision=False))
        for name in ALL_PROFILES:
            assert deployable(lg, load_profile(name)), name

    def test_channel_limit_violation_ssc336q(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 3000, 4, 4))
        y = gb.conv(x, 16, kernel=3, name="fat")
        g = gb.graph([y])
        violations = blocking_violations(check_profile(g, load_profile("ssc336q")))
        assert any(v.rule == "channels" and "3000" in v.message for v in violations)

    def test_low_bits_flagged(self):
        g = models.build("tiny_resnet", seed=0)
        lg, _ = legalize(g, LegalizeConfig(seed=0))
        lg = attach_fakequant(lg, BitWidthConfig.from_notation(
            "2W4A", first_last_full_precision=False))
        violations = blocking_violations(check_profile(lg, load_profile("hi3559a")))
        assert any(v.rule == "bits" for v in violations)
        # but fine on the 4-bit chip at 4W4A
        lg2, _ = legalize(g, LegalizeConfig(seed=0))
        lg2 = attach_fakequant(lg2, BitWidthConfig.from_notation(
            "4W4A", first_last_full_precision=False))
        assert deployable(lg2, load_profile("mlu270_s4"))

    def test_unknown_levels_warn_not_block(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 4, 8, 8))
        y = gb.conv(x, 4, kernel=3, groups=4, name="dw")  # depthwise: '?' on ethos
        g = gb.graph([y])
        vs = check_profile(g, load_profile("ethos_n"))
        assert any(not v.blocking for v in vs)
        assert not blocking_violations(vs)

    def test_movidius_5x5_stride2_unsupported(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 4, 9, 9))
        y = gb.conv(x, 4, kernel=5, stride=2, padding=2, name="c")
        g = gb.graph([y])
        assert not deployable(g, load_profile("movidius"))
        assert deployable(g, load_profile("tensorrt"))

    def test_monotone_adding_node_never_removes_violation(self):
        gb = GraphBuilder(0)
        x = gb.input("x", token_spec(1, 4))
        y = gb.embedding(x, 8, 6, name="emb")
        g1 = gb.graph([y])
        p = load_profile("hi3559a")
        before = {(v.node_id, v.rule) for v in check_profile(g1, p)}
        z = gb.ln(y, name="norm")
        g2 = gb.graph([z])
        after = {(v.node_id, v.rule) for v in check_profile(g2, p)}
        assert before <= after


class TestCostModel:
    def test_single_fc(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 512, 4, 4))
        y = gb.avgpool(x)
        y = gb.fc(y, 1000, name="head")
        g = gb.graph([y])
        report = count_macs(g)
        assert report.per_node_macs["head"] == 512 * 1000

    def test_conv_formula(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 8, 16, 16))
        y = gb.conv(x, 4, kernel=3, stride=2, name="c")
        g = gb.graph([y])
        # floor((16+2-3)/2)+1 = 8 -> 8*8*4*8*9
        assert count_macs(g).per_node_macs["c"] == 8 * 8 * 4 * 8 * 9

    def test_grouped_conv_divides(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(1, 8, 8, 8))
        y = gb.conv(x, 8, kernel=3, groups=4, name="c")
        g = gb.graph([y])
        assert count_macs(g).per_node_macs["c"] == 8 * 8 * 8 * 2 * 9

    def test_zero_cost_ops(self):
        gb = GraphBuilder(0)
        x = gb.input("x", image_spec(2, 4, 8, 8))
        y = gb.bn(gb.relu(gb.maxpool(x, 2, 2)))
        g = gb.graph([y])
        assert count_macs(g).total_macs == 0

    def test_total_is_sum(self):
        g = models.build("tiny_resnet", seed=0)
        report = count_macs(g)
        assert report.total_macs == sum(report.per_node_macs.values())

    def test_batch_does_not_change_count(self):
        a = count_macs(models.build("tiny_resnet", batch=1, seed=0)).total_macs
        b = count_macs(models.build("tiny_resnet", batch=32, seed=0)).total_macs
        assert a == b
