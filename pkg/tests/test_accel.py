import numpy as np
import pytest

from coforge.accel import (
    BundleSpec,
    CalibrationParams,
    HardwareBudget,
    IpSpec,
    bundle_latency,
    bundle_resource,
    comp_latency,
    decompose_repetitions,
    dnn_latency,
    dnn_resource,
    layer_data_bytes,
    load_hw_config,
    repetition_latency,
    reuse_count,
    weight_bytes,
)
from coforge.errors import DecompositionError
from coforge.model_ir import (
    LayerKind,
    LayerSpec,
    ModelGraph,
    QuantGroup,
    QuantScheme,
    load_model,
    parse_scheme,
)

S8888 = QuantScheme(8, 8, 8, 8, 8)


def conv(id, h, w, cin, cout, k=3, s=1, p=None, group=QuantGroup.MID_CONV):
    return LayerSpec(id, LayerKind.CONV, h, w, cin, cout, k, s, p, group)


def ip(lat=100.0, tile=(1, 1, 1, 1), kinds=None, **res):
    return IpSpec(
        "ip",
        lat,
        res or {"DSP": 1},
        tile_h=tile[0],
        tile_w=tile[1],
        tile_cin=tile[2],
        tile_cout=tile[3],
        kinds=frozenset(kinds) if kinds else frozenset({LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC}),
    )


class TestReuse:
    def test_channel_tiling(self):
        layer = conv("c", 16, 16, 3, 32, k=3, s=1, p=1, group=QuantGroup.FIRST_CONV)
        assert (layer.out_h, layer.out_w) == (16, 16)
        assert reuse_count(layer, ip(tile=(16, 16, 3, 8))) == 4

    def test_exact_tile_is_one(self):
        layer = conv("c", 16, 16, 3, 32, k=3, s=1, p=1, group=QuantGroup.FIRST_CONV)
        assert reuse_count(layer, ip(tile=(16, 16, 3, 32))) == 1

    def test_unit_tile_enumerates_outputs(self):
        layer = conv("c", 2, 2, 1, 1, k=1, s=1, p=0, group=QuantGroup.FIRST_CONV)
        assert reuse_count(layer, ip(tile=(1, 1, 1, 1))) == 4

    def test_event_simulation_oracle(self):
        # brute-force: walk every tile position and count invocations
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
            cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 65))
            layer = conv("c", h, w, cin, cout, k=1, s=1, p=0, group=QuantGroup.FIRST_CONV)
            tile = tuple(int(rng.integers(1, 9)) for _ in range(4))
            events = 0
            for _h in range(0, layer.out_h, tile[0]):
                for _w in range(0, layer.out_w, tile[1]):
                    for _ci in range(0, cin, tile[2]):
                        for _co in range(0, cout, tile[3]):
                            events += 1
            assert reuse_count(layer, ip(tile=tile)) == events


class TestCompLatency:
    def test_single_ip(self):
        layer = conv("c", 2, 2, 1, 1, k=1, s=1, p=0, group=QuantGroup.FIRST_CONV)
        bundle = BundleSpec("b", (ip(lat=100.0),))
        assert comp_latency(layer, bundle) == 400.0

    def test_two_ips_sum(self):
        layer = conv("c", 2, 2, 1, 1, k=1, s=1, p=0, group=QuantGroup.FIRST_CONV)
        bundle = BundleSpec("b", (ip(lat=100.0), ip(lat=50.0, tile=(2, 2, 1, 1))))
        assert comp_latency(layer, bundle) == 400.0 + 50.0

    def test_non_serving_ip_contributes_zero(self):
        pool = LayerSpec("p", LayerKind.POOL, 4, 4, 2, 2, 2, 2, 0)
        bundle = BundleSpec("b", (ip(lat=100.0),))
        assert comp_latency(pool, bundle) == 0.0


def worksheet_layer(group=QuantGroup.FIRST_CONV, id="c1"):
    # 15x17x2 -> 15x17x2 pointwise conv: traffic 510 + 510 + 4 = 1024 bytes
    return conv(id, 15, 17, 2, 2, k=1, s=1, p=0, group=group)


def worksheet_bundle():
    pe = IpSpec(
        "pe1", 100.0, {"DSP": 200}, tile_h=15, tile_w=17, tile_cin=1, tile_cout=1,
        kinds=frozenset({LayerKind.CONV}),
    )
    return BundleSpec("worksheet", (pe,), alpha=0.8, beta=0.5)


def worksheet_hw():
    return HardwareBudget({"DSP": 900, "LUT": 218600, "FF": 437200, "BRAM": 545}, 16.0, 200.0)


class TestBundleLatency:
    def test_hand_worksheet_352(self):
        layer = worksheet_layer()
        assert layer_data_bytes(layer, S8888) == 1024
        assert comp_latency(layer, worksheet_bundle()) == 400.0
        assert bundle_latency(layer, worksheet_bundle(), worksheet_hw(), S8888) == 352.0

    def test_no_transfer_degenerates_to_compute(self):
        layer = worksheet_layer()
        bundle = BundleSpec("b", worksheet_bundle().ips, alpha=1.0, beta=1.0)
        expected = comp_latency(layer, bundle) + 1024 / 16.0
        assert bundle_latency(layer, bundle, worksheet_hw(), S8888) == expected

    def test_halving_bandwidth_doubles_transfer_term(self):
        layer = worksheet_layer()
        bundle = worksheet_bundle()
        hw_fast = worksheet_hw()
        hw_slow = HardwareBudget(hw_fast.totals, 8.0, 200.0)
        fast = bundle_latency(layer, bundle, hw_fast, S8888)
        slow = bundle_latency(layer, bundle, hw_slow, S8888)
        compute = 0.8 * comp_latency(layer, bundle)
        assert slow - compute == 2 * (fast - compute)


class TestBundleResource:
    def test_sum_with_overhead(self):
        bundle = BundleSpec(
            "b",
            (ip(lat=1.0, DSP=100), ip(lat=1.0, DSP=200)),
            gamma_overhead={"DSP": 10},
        )
        assert bundle_resource(bundle).counts["DSP"] == 310

    def test_empty_overhead(self):
        bundle = BundleSpec("b", (ip(lat=1.0, DSP=100), ip(lat=1.0, DSP=200)))
        assert bundle_resource(bundle).counts["DSP"] == 300

    def test_all_types_summed_independently(self):
        rng = np.random.default_rng(1)
        ips, ledger = [], {r: 0 for r in ("DSP", "LUT", "FF", "BRAM")}
        for i in range(5):
            res = {r: int(rng.integers(0, 100)) for r in ledger}
            for r, v in res.items():
                ledger[r] += v
            ips.append(IpSpec(f"i{i}", 1.0, res))
        overhead = {r: int(rng.integers(0, 20)) for r in ledger}
        for r, v in overhead.items():
            ledger[r] += v
        bundle = BundleSpec("b", tuple(ips), gamma_overhead=overhead)
        assert bundle_resource(bundle).counts == pytest.approx(ledger)


class TestDnnEstimates:
    def graph(self, reps=3):
        layers = [
            worksheet_layer(QuantGroup.FIRST_CONV if i == 0 else QuantGroup.MID_CONV, f"c{i+1}")
            for i in range(reps)
        ]
        return ModelGraph("worksheet", tuple(layers))

    def cal(self):
        return CalibrationParams(phi=2.0, lat_dm=100.0, gamma=1.0, res_ctl={"DSP": 20})

    def test_hand_worksheet_1256(self):
        est = dnn_latency(self.graph(), worksheet_bundle(), worksheet_hw(), self.cal(), S8888)
        assert est.per_repetition == (352.0, 352.0, 352.0)
        assert est.cycles == 1256.0

    def test_zero_phi_is_pure_sum(self):
        cal = CalibrationParams(phi=0.0, lat_dm=100.0)
        est = dnn_latency(self.graph(), worksheet_bundle(), worksheet_hw(), cal, S8888)
        assert est.cycles == 3 * 352.0

    def test_unit_conversion(self):
        est = dnn_latency(self.graph(), worksheet_bundle(), worksheet_hw(), self.cal(), S8888)
        assert est.milliseconds == pytest.approx(0.00628)

    def test_resource_with_control_overhead(self):
        bundle = BundleSpec(
            "b",
            (ip(lat=1.0, DSP=100), ip(lat=1.0, DSP=200)),
            gamma_overhead={"DSP": 10},
        )
        est = dnn_resource(bundle, self.cal(), worksheet_hw())
        assert est.counts["DSP"] == 330
        assert est.utilization["DSP"] == pytest.approx(330 / 900)
        assert est.feasible

    def test_overbudget_flags_infeasible(self):
        bundle = BundleSpec("b", (ip(lat=1.0, DSP=1000),))
        est = dnn_resource(bundle, CalibrationParams(), worksheet_hw())
        assert not est.feasible

    def test_resource_independent_of_repetitions(self):
        cal = self.cal()
        a = dnn_resource(worksheet_bundle(), cal, worksheet_hw())
        # resources depend on the bundle alone; any repetition count shares them
        assert a.counts == dnn_resource(worksheet_bundle(), cal, worksheet_hw()).counts

    def test_latency_linear_in_repetitions(self):
        cal = CalibrationParams(phi=2.0, lat_dm=100.0)
        values = [
            dnn_latency(self.graph(reps), worksheet_bundle(), worksheet_hw(), cal, S8888).cycles
            for reps in (1, 2, 3, 4)
        ]
        diffs = np.diff(values)
        assert np.allclose(diffs, 352.0)


class TestDecomposition:
    def test_pool_forms_own_repetition(self):
        layers = (
            conv("c1", 8, 8, 2, 4, k=3, s=1, p=1, group=QuantGroup.FIRST_CONV),
            LayerSpec("b1", LayerKind.BN, 8, 8, 4, 4),
            LayerSpec("a1", LayerKind.ACT, 8, 8, 4, 4),
            LayerSpec("p1", LayerKind.POOL, 8, 8, 4, 4, 2, 2, 0),
            conv("c2", 4, 4, 4, 4, k=3, s=1, p=1),
        )
        reps = decompose_repetitions(ModelGraph("m", layers))
        assert [[l.id for l in rep] for rep in reps] == [["c1", "b1", "a1"], ["p1"], ["c2"]]

    def test_pool_repetition_is_transfer_only(self):
        pool = LayerSpec("p1", LayerKind.POOL, 8, 8, 4, 4, 2, 2, 0)
        graph = ModelGraph(
            "m",
            (conv("c1", 8, 8, 2, 4, k=3, s=1, p=1, group=QuantGroup.FIRST_CONV), pool),
        )
        bundle = worksheet_bundle()
        lat = repetition_latency([pool], bundle, worksheet_hw(), S8888)
        theta = (8 * 8 * 4 + 4 * 4 * 4) * 1
        assert lat == bundle.beta * theta / 16.0

    def test_dangling_minor_layer_is_an_error(self):
        graph = ModelGraph("m", (LayerSpec("a0", LayerKind.ACT, 4, 4, 2, 2),))
        with pytest.raises(DecompositionError, match="a0"):
            decompose_repetitions(graph)


class TestDataBytes:
    def test_weight_traffic_halves_with_bitwidth(self):
        layer = conv("c", 8, 8, 4, 4, k=3, s=1, p=1, group=QuantGroup.FIRST_CONV)
        assert layer.weight_count % 2 == 0
        wide = weight_bytes(layer, QuantScheme(8, 8, 8, 8, 8))
        narrow = weight_bytes(layer, QuantScheme(8, 4, 8, 8, 8))
        assert wide == 2 * narrow

    def test_subbyte_weights_round_up_per_tensor(self):
        fc = LayerSpec("f", LayerKind.FC, 1, 1, 3, 1, quant_group=QuantGroup.LAST_FC)
        assert weight_bytes(fc, QuantScheme(8, 8, 8, 8, 1)) == 1  # 3 bits -> 1 byte

    def test_activation_bytes_per_element(self):
        layer = worksheet_layer()
        assert layer_data_bytes(layer, QuantScheme(16, 8, 8, 8, 8)) == 2 * 510 * 2 + 4


def random_setup(rng):
    depth = int(rng.integers(1, 5))
    h = w = int(rng.integers(4, 17))
    cin = int(rng.integers(1, 5))
    layers = []
    for i in range(depth):
        cout = int(rng.integers(1, 9))
        layers.append(
            conv(
                f"c{i}", h, w, cin, cout, k=3, s=1, p=1,
                group=QuantGroup.FIRST_CONV if i == 0 else QuantGroup.MID_CONV,
            )
        )
        cin = cout
    graph = ModelGraph("rand", tuple(layers))
    ips = tuple(
        ip(
            lat=float(rng.uniform(1, 200)),
            tile=tuple(int(rng.integers(1, 9)) for _ in range(4)),
            DSP=int(rng.integers(1, 50)),
        )
        for _ in range(int(rng.integers(1, 4)))
    )
    bundle = BundleSpec(
        "b", ips, alpha=float(rng.uniform(0.1, 1.0)), beta=float(rng.uniform(0.1, 1.0))
    )
    hw = HardwareBudget({"DSP": 900, "LUT": 218600, "FF": 437200, "BRAM": 545},
                        float(rng.uniform(1, 64)), 200.0)
    cal = CalibrationParams(
        phi=float(rng.uniform(0, 4)), lat_dm=float(rng.uniform(0, 500)),
        gamma=float(rng.uniform(0, 2)), res_ctl={"DSP": int(rng.integers(0, 50))},
    )
    scheme = QuantScheme(
        int(rng.integers(1, 17)), *(int(rng.integers(1, 10)) for _ in range(4))
    )
    return graph, bundle, hw, cal, scheme


class TestProperties:
    def test_monotonicity_in_core_quantities(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            graph, bundle, hw, cal, scheme = random_setup(rng)
            base = dnn_latency(graph, bundle, hw, cal, scheme).cycles

            slower_ips = tuple(
                IpSpec(i.id, i.lat_cycles * 1.5, i.res, i.tile_h, i.tile_w, i.tile_cin,
                       i.tile_cout, i.kinds)
                for i in bundle.ips
            )
            slower = BundleSpec(bundle.id, slower_ips, bundle.alpha, bundle.beta,
                                bundle.gamma_overhead)
            assert dnn_latency(graph, slower, hw, cal, scheme).cycles >= base

            wider = QuantScheme(min(scheme.act_bits * 2, 32), scheme.first_conv_bits,
                                scheme.mid_conv_bits, scheme.mid_fc_bits, scheme.last_fc_bits)
            assert dnn_latency(graph, bundle, hw, cal, wider).cycles >= base

            richer_ips = tuple(
                IpSpec(i.id, i.lat_cycles, {"DSP": i.res.get("DSP", 0) + 5}, i.tile_h,
                       i.tile_w, i.tile_cin, i.tile_cout, i.kinds)
                for i in bundle.ips
            )
            richer = BundleSpec(bundle.id, richer_ips, bundle.alpha, bundle.beta,
                                bundle.gamma_overhead)
            assert (
                dnn_resource(richer, cal, hw).counts["DSP"]
                >= dnn_resource(bundle, cal, hw).counts["DSP"]
            )

    def test_latency_affine_in_inverse_bandwidth(self):
        rng = np.random.default_rng(43)
        for _ in range(200):
            graph, bundle, hw, cal, scheme = random_setup(rng)

            def at_bw(bw):
                budget = HardwareBudget(hw.totals, bw, hw.freq_mhz)
                return dnn_latency(graph, bundle, budget, cal, scheme).cycles

            y1, y2 = at_bw(1.0), at_bw(2.0)
            slope = (y1 - y2) / (1.0 - 0.5)
            intercept = y1 - slope
            assert at_bw(4.0) == pytest.approx(intercept + slope * 0.25, rel=1e-12)

            total_theta = sum(
                repetition_latency(rep, bundle, HardwareBudget(hw.totals, 1.0, 200.0), scheme)
                - bundle.alpha * sum(comp_latency(l, bundle) for l in rep)
                for rep in decompose_repetitions(graph)
            )
            assert slope == pytest.approx(total_theta, rel=1e-12)


class TestTomlLoader:
    def test_fixture_roundtrip(self, fixtures):
        hw, bundle, cal = load_hw_config(fixtures / "worksheet_hw.toml")
        assert hw.totals["DSP"] == 900
        assert hw.bw_bytes_per_cycle == 16.0
        assert bundle.alpha == 0.8 and bundle.beta == 0.5
        assert {ip.id for ip in bundle.ips} == {"pe0", "pe1"}
        assert cal.phi == 2.0 and cal.lat_dm == 100.0
        assert cal.res_ctl["DSP"] == 20

    def test_worksheet_model_end_to_end(self, fixtures):
        hw, bundle, cal = load_hw_config(fixtures / "worksheet_hw.toml")
        graph = load_model(fixtures / "worksheet_model.json")
        est = dnn_latency(graph, bundle, hw, cal, parse_scheme("net-8-8888"))
        assert est.cycles == 1256.0
        res = dnn_resource(bundle, cal, hw)
        assert res.counts["DSP"] == 100 + 200 + 10 + 20
        assert res.feasible
