import json

import numpy as np
import pytest

from coforge.errors import ModelFormatError, SchemeParseError, WeightFormatError
from coforge.model_ir import (
    LayerKind,
    LayerSpec,
    ModelGraph,
    QuantGroup,
    QuantScheme,
    WeightVector,
    format_scheme,
    load_model,
    load_weights,
    parse_scheme,
    save_model,
    save_weights,
)


def conv(id, h, w, cin, cout, k=3, s=1, p=None, group=QuantGroup.MID_CONV):
    return LayerSpec(id, LayerKind.CONV, h, w, cin, cout, k, s, p, group)


class TestParseScheme:
    def test_hybrid_name(self):
        scheme = parse_scheme("Alexnet-8-8218")
        assert scheme == QuantScheme(8, 8, 2, 1, 8)

    def test_uniform_name(self):
        assert parse_scheme("Alexnet-8-8888") == QuantScheme(8, 8, 8, 8, 8)

    def test_multidigit_activation(self):
        assert parse_scheme("vgg-16-4444").act_bits == 16

    def test_netname_with_hyphen(self):
        scheme = parse_scheme("my-net-8-8218")
        assert scheme.mid_fc_bits == 1

    @pytest.mark.parametrize(
        "bad",
        ["x-8-8", "net-8-88888", "net--8888", "net-8-8a18", "net-zz-8888", "8-8888", "net-8-8088"],
    )
    def test_malformed(self, bad):
        with pytest.raises(SchemeParseError):
            parse_scheme(bad)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scheme = QuantScheme(
                int(rng.integers(1, 33)), *(int(rng.integers(1, 10)) for _ in range(4))
            )
            assert parse_scheme(format_scheme(scheme, "n")) == scheme

    def test_bits_for_groups(self):
        scheme = parse_scheme("n-4-8218")
        assert scheme.bits_for(QuantGroup.FIRST_CONV) == 8
        assert scheme.bits_for(QuantGroup.MID_CONV) == 2
        assert scheme.bits_for(QuantGroup.MID_FC) == 1
        assert scheme.bits_for(QuantGroup.LAST_FC) == 8
        assert scheme.bits_for(QuantGroup.NON_WEIGHTED) is None


class TestShapePropagation:
    def test_formula_against_enumeration(self):
        # independent oracle: count the valid window placements directly
        for h in range(1, 9):
            for k in range(1, 9):
                for s in range(1, k + 1):
                    for p in range(0, 3):
                        padded = h + 2 * p
                        if padded < k:
                            continue
                        positions = len(range(0, padded - k + 1, s))
                        layer = LayerSpec(
                            "c", LayerKind.CONV, h, h, 1, 1, k, s, p, QuantGroup.FIRST_CONV
                        )
                        assert layer.out_h == positions, (h, k, s, p)

    def test_default_padding_is_same_style(self):
        layer = conv("c", 16, 16, 3, 8, k=3, s=1, group=QuantGroup.FIRST_CONV)
        assert layer.padding == 1
        assert (layer.out_h, layer.out_w) == (16, 16)

    def test_fc_weight_count(self):
        fc = LayerSpec("f", LayerKind.FC, 1, 1, 10, 4, quant_group=QuantGroup.LAST_FC)
        assert fc.weight_count == 40

    def test_conv_weight_count(self):
        layer = conv("c", 8, 8, 2, 3, k=3, group=QuantGroup.FIRST_CONV)
        assert layer.weight_count == 54

    def test_kernel_smaller_than_stride_rejected(self):
        with pytest.raises(ModelFormatError):
            conv("c", 8, 8, 1, 1, k=1, s=2, group=QuantGroup.FIRST_CONV)


def toy_model_doc():
    return {
        "name": "toy",
        "layers": [
            {"id": "c1", "kind": "conv", "in": [8, 8, 3], "out_channels": 4, "kernel": 3, "stride": 1},
            {"id": "p1", "kind": "pool", "in": [8, 8, 4], "kernel": 2, "stride": 2, "padding": 0},
            {"id": "f1", "kind": "fc", "in": [1, 1, 64], "out_channels": 10},
        ],
    }


class TestLoadModel:
    def test_toy_roundtrip(self, tmp_path):
        path = tmp_path / "toy.json"
        path.write_text(json.dumps(toy_model_doc()))
        graph = load_model(path)
        assert len(graph.layers) == 3
        assert graph.layers[0].quant_group is QuantGroup.FIRST_CONV
        assert graph.layers[2].quant_group is QuantGroup.LAST_FC
        assert graph.layers[1].out_h == 4

        out = tmp_path / "again.json"
        save_model(graph, out)
        assert load_model(out) == graph

    def test_shape_mismatch_names_both_layers(self, tmp_path):
        doc = toy_model_doc()
        doc["layers"][1]["in"] = [7, 8, 4]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError) as err:
            load_model(path)
        assert "c1" in str(err.value) and "p1" in str(err.value)

    def test_unknown_kind(self, tmp_path):
        doc = toy_model_doc()
        doc["layers"][0]["kind"] = "attention"
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="attention"):
            load_model(path)

    def test_duplicate_ids(self, tmp_path):
        doc = toy_model_doc()
        doc["layers"][1]["id"] = "c1"
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="duplicate"):
            load_model(path)

    def test_yolo_like_fixture(self, fixtures):
        graph = load_model(fixtures / "yolo16.json")
        assert len(graph.layers) == 16
        # shape chain must already have validated; spot-check the downsampling
        assert graph.layers[0].out_h == 224
        assert graph.layers[-1].kind is LayerKind.FC
        groups = [l.quant_group for l in graph.weighted_layers]
        assert groups.count(QuantGroup.FIRST_CONV) == 1
        assert groups.count(QuantGroup.LAST_FC) == 1


class TestWeightFiles:
    def graph(self):
        return ModelGraph(
            "toy",
            (
                conv("c1", 8, 8, 2, 3, group=QuantGroup.FIRST_CONV),
                LayerSpec("f1", LayerKind.FC, 1, 1, 192, 4, quant_group=QuantGroup.LAST_FC),
            ),
        )

    def test_roundtrip_bit_exact(self, tmp_path):
        graph = self.graph()
        rng = np.random.default_rng(3)
        weights = {
            l.id: WeightVector(l.id, rng.normal(size=l.weight_count).astype(np.float32))
            for l in graph.weighted_layers
        }
        path = tmp_path / "w.cfw"
        save_weights(weights, path)
        loaded = load_weights(path, graph)
        for lid, vec in weights.items():
            assert np.array_equal(
                loaded[lid].values.view(np.uint32), vec.values.view(np.uint32)
            )

    def test_expected_element_counts(self):
        graph = self.graph()
        assert graph.layer("c1").weight_count == 54
        assert graph.layer("f1").weight_count == 192 * 4

    def test_short_payload_reports_counts(self, tmp_path):
        graph = self.graph()
        weights = {
            l.id: WeightVector(l.id, np.zeros(l.weight_count, dtype=np.float32))
            for l in graph.weighted_layers
        }
        path = tmp_path / "w.cfw"
        save_weights(weights, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])  # drop one f32 element
        with pytest.raises(WeightFormatError, match="promises"):
            load_weights(path, graph)

    def test_header_count_mismatch_names_layer(self, tmp_path):
        graph = self.graph()
        weights = {
            "c1": WeightVector("c1", np.zeros(53, dtype=np.float32)),
            "f1": WeightVector("f1", np.zeros(192 * 4, dtype=np.float32)),
        }
        path = tmp_path / "w.cfw"
        save_weights(weights, path)
        with pytest.raises(WeightFormatError, match="expected 54, got 53"):
            load_weights(path, graph)


class TestGraphInvariants:
    def test_mlp_without_conv_is_valid(self):
        graph = ModelGraph(
            "mlp",
            (
                LayerSpec("f1", LayerKind.FC, 1, 1, 2, 16, quant_group=QuantGroup.MID_FC),
                LayerSpec("a1", LayerKind.ACT, 1, 1, 16, 16),
                LayerSpec("f2", LayerKind.FC, 1, 1, 16, 2, quant_group=QuantGroup.LAST_FC),
            ),
        )
        assert len(graph.weighted_layers) == 2

    def test_two_first_convs_rejected(self):
        with pytest.raises(ModelFormatError):
            ModelGraph(
                "bad",
                (
                    conv("c1", 8, 8, 3, 3, group=QuantGroup.FIRST_CONV),
                    conv("c2", 8, 8, 3, 3, group=QuantGroup.FIRST_CONV),
                ),
            )

    def test_last_weighted_fc_must_be_last_fc(self):
        with pytest.raises(ModelFormatError):
            ModelGraph(
                "bad",
                (
                    LayerSpec("f1", LayerKind.FC, 1, 1, 4, 4, quant_group=QuantGroup.MID_FC),
                    LayerSpec("f2", LayerKind.FC, 1, 1, 4, 2, quant_group=QuantGroup.MID_FC),
                ),
            )

    def test_ops_count(self):
        layer = conv("c", 4, 4, 2, 3, k=3, s=1, group=QuantGroup.FIRST_CONV)
        # 2 * out_h * out_w * K^2 * N * M
        assert layer.mac_ops == 2 * 4 * 4 * 9 * 2 * 3
