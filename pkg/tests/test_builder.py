import numpy as np
import pytest

from resattn.builder import (
    BUILTIN_SPECS,
    NetworkSpec,
    build_cifar,
    build_from_spec,
    build_imagenet,
    build_resnet,
    cost_model,
    parse_spec,
    serialize_spec,
)
from resattn.errors import BuildError, SpecParseError
from resattn.graph import trace_shapes
from resattn.tensor import Tensor, no_grad

# Published layout targets (params, flops, trunk depth); tolerances are
# +-3% params / +-5% flops, depth exact.
IMAGENET_TARGETS = {
    "attention-56": (31.9e6, 6.2e9, 56),
    "attention-92": (51.3e6, 10.4e9, 92),
}


@pytest.fixture(scope="module")
def reports():
    out = {}
    for name in IMAGENET_TARGETS:
        m = build_imagenet(name)
        out[name] = cost_model(m.graph, m.input_shape)
    m = build_resnet("152-imagenet")
    out["resnet-152"] = cost_model(m.graph, m.input_shape)
    m = build_resnet("164-cifar")
    out["resnet-164"] = cost_model(m.graph, m.input_shape)
    return out


class TestImagenetLayouts:
    @pytest.mark.parametrize("name", list(IMAGENET_TARGETS))
    def test_params_flops_depth(self, reports, name):
        params_t, flops_t, depth_t = IMAGENET_TARGETS[name]
        r = reports[name]
        assert abs(r.params - params_t) / params_t < 0.03
        assert abs(r.flops - flops_t) / flops_t < 0.05
        assert r.trunk_depth == depth_t

    def test_stage_output_sizes(self):
        m = build_imagenet("attention-56")
        shapes = trace_shapes(m.graph, m.input_shape)
        probe_shapes = {
            n.stage: shapes[n.idx] for n in m.graph.nodes if n.probe
        }
        assert probe_shapes["stage1"][1:] == (56, 56)
        assert probe_shapes["stage2"][1:] == (28, 28)
        assert probe_shapes["stage3"][1:] == (14, 14)
        assert probe_shapes["stage4"][1:] == (7, 7)

    def test_unknown_name_rejected(self):
        with pytest.raises(BuildError):
            build_imagenet("attention-77")

    def test_overrides_limited_surface(self):
        m = build_imagenet("attention-56", combine="nal", num_classes=100)
        assert m.spec.combine == "nal" and m.spec.num_classes == 100


class TestResnetBaselines:
    def test_resnet152_calibration(self, reports):
        r = reports["resnet-152"]
        assert abs(r.params - 60.2e6) / 60.2e6 < 0.03
        assert abs(r.flops - 11.3e9) / 11.3e9 < 0.05
        assert r.trunk_depth == 152

    def test_resnet164_cifar_params(self, reports):
        r = reports["resnet-164"]
        assert abs(r.params - 1.7e6) / 1.7e6 < 0.03
        assert r.trunk_depth == 164

    def test_resnet164_forward_logits_shape(self, rng):
        m = build_resnet("164-cifar")
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        with no_grad():
            y = m.forward(x, training=False)
        assert y.shape == (1, 10)

    def test_unsupported_depth_rejected(self):
        with pytest.raises(BuildError):
            build_resnet("101-imagenet")


class TestCifarFamily:
    @pytest.mark.parametrize("m", range(1, 7))
    def test_trunk_depth_formula(self, m):
        net = build_cifar(m)
        r = cost_model(net.graph, net.input_shape)
        assert r.trunk_depth == 36 * m + 20

    def test_m2_lands_near_published_params(self):
        # ~1.9M for the m=2 network; the CIFAR widths/stem are not fully
        # pinned upstream, so this is a coarse consistency check.
        net = build_cifar(2)
        r = cost_model(net.graph, net.input_shape)
        assert abs(r.params - 1.9e6) / 1.9e6 < 0.15

    def test_stage_resolutions(self):
        net = build_cifar(1)
        shapes = trace_shapes(net.graph, net.input_shape)
        probe = {n.stage: shapes[n.idx] for n in net.graph.nodes if n.probe}
        assert probe["stage1"] == (64, 32, 32)
        assert probe["stage2"] == (128, 16, 16)
        assert probe["stage3"] == (256, 8, 8)

    def test_mask_branch_bottoms_at_8x8(self):
        net = build_cifar(1)
        shapes = trace_shapes(net.graph, net.input_shape)
        pool_sizes = [
            shapes[n.idx][1:] for n in net.graph.nodes
            if n.kind == "maxpool" and n.branch == "mask"
        ]
        assert min(s[0] for s in pool_sizes) == 8

    def test_m_below_one_rejected(self):
        with pytest.raises(BuildError):
            build_cifar(0)

    def test_deep_override_variant_constructible(self):
        # {p=2, t=4, r=3} with 6 modules per stage gives trunk depth 452
        spec = NetworkSpec(family="cifar", m=6, p=2, t=4, r=3)
        net = build_from_spec(spec)
        r = cost_model(net.graph, net.input_shape)
        assert r.trunk_depth == 452


class TestCostModel:
    def test_single_conv_flops_formula(self):
        # 3x3 conv 64->64 over a 32x32 output: 64*64*9*1024 MACs
        from resattn.graph import GraphBuilder

        b = GraphBuilder()
        b.conv(0, 64, 64, 3, padding=1, leaf="conv")
        r = cost_model(b.g, (64, 32, 32))
        assert r.flops == 64 * 64 * 9 * 1024
        assert r.params == 64 * 64 * 9

    def test_totals_equal_sum_of_stages(self, reports):
        for r in reports.values():
            assert r.params == sum(s.params for s in r.stages)
            assert r.flops == sum(s.flops for s in r.stages)
            assert r.trunk_depth == sum(s.trunk_depth for s in r.stages)

    def test_partition_counts_sum_to_total(self, reports):
        for r in reports.values():
            assert sum(r.params_by_partition.values()) == r.params

    def test_mask_branch_excluded_from_depth(self, reports):
        # attention nets carry mask convs, depth still counts trunk only
        assert reports["attention-56"].trunk_depth == 56
        assert reports["attention-56"].params_by_partition["mask"] > 0

    @pytest.mark.parametrize(
        "builder", [
            lambda: build_cifar(1),
            lambda: build_imagenet("attention-56"),
            lambda: build_resnet("164-cifar"),
        ],
    )
    def test_every_graph_validates_and_runs(self, rng, builder):
        m = builder()
        trace_shapes(m.graph, m.input_shape)  # raises on inconsistency
        x = Tensor(rng.uniform(0, 1, (1,) + m.input_shape).astype(np.float32))
        with no_grad():
            y = m.forward(x, training=False)
        assert y.shape == (1, m.spec.num_classes)
        assert np.all(np.isfinite(y.data))


class TestSpecTextFormat:
    @pytest.mark.parametrize("name", sorted(BUILTIN_SPECS))
    def test_round_trip_identity(self, name):
        spec = BUILTIN_SPECS[name]
        assert parse_spec(serialize_spec(spec)) == spec

    def test_default_cifar_m3_serializes_hyperparameters(self):
        text = serialize_spec(NetworkSpec(family="cifar", m=3))
        assert "p = 1" in text and "t = 2" in text and "r = 1" in text

    def test_unknown_key_named_in_error(self):
        text = "[network]\nfamily = cifar\nm = 1\nbogus = 3\n"
        with pytest.raises(SpecParseError, match="bogus"):
            parse_spec(text)

    def test_parse_error_carries_line_number(self):
        text = "[network]\nfamily = cifar\nthis is not a key value\n"
        with pytest.raises(SpecParseError, match="line 3"):
            parse_spec(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(SpecParseError, match="mystery"):
            parse_spec("[mystery]\nx = 1\n")

    def test_key_outside_section_rejected(self):
        with pytest.raises(SpecParseError, match="line 1"):
            parse_spec("family = cifar\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(SpecParseError, match="duplicate"):
            parse_spec("[network]\nfamily = cifar\nfamily = resnet\n")

    def test_bad_value_rejected_with_line(self):
        with pytest.raises(SpecParseError, match="line 2"):
            parse_spec("[network]\nm = banana\nfamily = cifar\n")

    def test_comments_and_blank_lines_ignored(self):
        text = "# header\n[network]\n\nfamily = cifar  # inline\nm = 2\n"
        assert parse_spec(text).m == 2
