import pytest

from corelower import models
from corelower.ir import Add, Conv2D, Embedding, LayerNorm, MaxPool, Softmax, validate
from corelower.legalize import LegalizeConfig, legalize
from corelower.ir import non_core_nodes
from corelower.profiles import count_macs

GIGA = 1e9


class TestTemplates:
    def test_registry(self):
        assert "resnet18" in models.template_names()
        assert models.family_of("tiny_transformer") == "transformer_like"

    def test_unknown_template(self):
        with pytest.raises(models.InvalidTemplate):
            models.build("resnet9000")

    def test_bad_option(self):
        with pytest.raises(models.InvalidTemplate):
            models.build("tiny_resnet", wingspan=3)

    @pytest.mark.parametrize("name", models.template_names())
    def test_all_templates_validate(self, name):
        g = models.build(name, seed=0)
        assert validate(g).ok, name

    def test_resnet_has_expected_constructs(self):
        g = models.build("resnet18", seed=0)
        assert any(isinstance(n.kind, Conv2D) and n.kind.kernel_h == 7 for n in g.nodes)
        assert any(isinstance(n.kind, MaxPool) and n.kind.kernel == 3 for n in g.nodes)
        assert sum(isinstance(n.kind, Add) for n in g.nodes) == 8

    def test_mobilenet_has_depthwise(self):
        g = models.build("mobilenet_v1", seed=0)
        assert any(isinstance(n.kind, Conv2D) and n.kind.groups > 1 for n in g.nodes)

    def test_transformer_constructs(self):
        g = models.build("tiny_transformer", seed=0)
        assert sum(isinstance(n.kind, Embedding) for n in g.nodes) == 2
        assert sum(isinstance(n.kind, LayerNorm) for n in g.nodes) == 10
        assert any(isinstance(n.kind, Softmax) and n.attrs.get("causal")
                   for n in g.nodes)

    def test_tiny_resnet_budget(self):
        g = models.build("tiny_resnet", seed=0)
        assert validate(g).ok
        assert count_macs(g).total_macs <= 5e7

    def test_builders_deterministic(self):
        a = models.build("tiny_resnet", seed=3)
        b = models.build("tiny_resnet", seed=3)
        from corelower.serialize import graphs_structurally_equal
        assert graphs_structurally_equal(a, b)


class TestMacAnchors:
    def test_resnet18_original(self):
        total = count_macs(models.build("resnet18", seed=0)).total_macs
        assert abs(total - 1.82 * GIGA) <= 0.02 * 1.82 * GIGA

    def test_mobilenet_v2_original(self):
        total = count_macs(models.build("mobilenet_v2", seed=0)).total_macs
        assert abs(total - 0.31 * GIGA) <= 0.05 * 0.31 * GIGA

    def test_resnet18_legalized(self):
        g, _ = legalize(models.build("resnet18", seed=0))
        total = count_macs(g).total_macs
        assert abs(total - 5.89 * GIGA) <= 0.05 * 5.89 * GIGA

    def test_mobilenet_v2_legalized(self):
        g, _ = legalize(models.build("mobilenet_v2", seed=0))
        total = count_macs(g).total_macs
        assert abs(total - 2.41 * GIGA) <= 0.10 * 2.41 * GIGA


class TestEndToEndLegalization:
    @pytest.mark.parametrize("name", ["resnet18", "resnet34", "resnet50",
                                      "mobilenet_v1", "mobilenet_v2",
                                      "tiny_resnet", "tiny_mobilenet"])
    def test_classification_templates_fully_lower(self, name):
        g = models.build(name, seed=0)
        out, _ = legalize(g)
        assert validate(out).ok
        assert non_core_nodes(out) == []

    def test_transformer_lowers_modulo_adds(self):
        g = models.build("tiny_transformer", seed=0)
        out, _ = legalize(g, LegalizeConfig.for_family("transformer_like"))
        assert validate(out).ok
        assert all(isinstance(n.kind, Add) for n in non_core_nodes(out))
