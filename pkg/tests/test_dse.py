import math

import numpy as np
import pytest

from coforge.accel import BundleSpec, CalibrationParams, HardwareBudget, IpSpec
from coforge.dse import (
    CandidateConfig,
    DesignPoint,
    DnnTemplate,
    Evaluator,
    GopsOracle,
    SearchConstraints,
    build_initial_dnns,
    hw_nas_loss,
    pareto_filter,
    scd_search,
)
from coforge.errors import InfeasibleDesignError
from coforge.model_ir import LayerKind, QuantScheme


def make_env():
    ip = IpSpec(
        "pe", 40.0, {"DSP": 150, "LUT": 3000, "FF": 2000, "BRAM": 10},
        tile_h=8, tile_w=8, tile_cin=4, tile_cout=8,
    )
    bundle = BundleSpec("b0", (ip,), alpha=0.9, beta=0.8, gamma_overhead={"LUT": 500})
    hw = HardwareBudget({"DSP": 900, "LUT": 218600, "FF": 437200, "BRAM": 545}, 16.0, 200.0)
    cal = CalibrationParams(phi=1.0, lat_dm=50.0, gamma=1.0, res_ctl={"DSP": 20, "LUT": 800})
    template = DnnTemplate(input_h=16, input_w=16, input_c=3, base_channels=8, num_classes=4)
    return Evaluator(template, bundle, hw, cal, QuantScheme(8, 8, 8, 8, 8))


class PlantedOracle:
    """Accuracy peaked at a known config, decaying per unit move distance."""

    def __init__(self, target: CandidateConfig, width: float = 4.0):
        self.target = target
        self.width = width

    def distance(self, config: CandidateConfig) -> float:
        d = abs(config.replications - self.target.replications)
        d += len(set(config.downsample_at) ^ set(self.target.downsample_at))
        length = max(len(config.expansion), len(self.target.expansion))
        for i in range(length):
            a = config.expansion[i] if i < len(config.expansion) else 1.0
            b = self.target.expansion[i] if i < len(self.target.expansion) else 1.0
            d += abs(round(math.log(a / b, 1.25)))
        return float(d)

    def __call__(self, config: CandidateConfig) -> float:
        return math.exp(-self.distance(config) / self.width)


def point(acc, lat, dsp=100.0, tag=0):
    return DesignPoint(CandidateConfig(f"b{tag}", 1), acc, lat, {"DSP": dsp})


class TestParetoFilter:
    def test_strict_domination(self):
        pts = [point(0.9, 100.0), point(0.8, 200.0, tag=1)]
        assert pareto_filter(pts) == [pts[0]]

    def test_identical_points_all_survive(self):
        pts = [point(0.5, 100.0, tag=i) for i in range(4)]
        assert pareto_filter(pts) == pts

    def test_matches_bruteforce_on_random_sets(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pts = [
                point(float(rng.random()), float(rng.integers(1, 50)),
                      dsp=float(rng.integers(1, 50)), tag=i)
                for i in range(200)
            ]
            got = pareto_filter(pts)
            expected = []
            for p in pts:
                dominated = False
                for q in pts:
                    if q is p:
                        continue
                    if (
                        q.accuracy >= p.accuracy
                        and q.latency <= p.latency
                        and (q.accuracy > p.accuracy or q.latency < p.latency)
                    ):
                        dominated = True
                        break
                if not dominated:
                    expected.append(p)
            assert got == expected

    def test_idempotent(self):
        rng = np.random.default_rng(99)
        pts = [
            point(float(rng.random()), float(rng.integers(1, 20)), tag=i) for i in range(50)
        ]
        once = pareto_filter(pts)
        assert pareto_filter(once) == once

    def test_resource_objective(self):
        pts = [point(0.9, 100.0, dsp=500.0), point(0.9, 100.0, dsp=100.0, tag=1)]
        survivors = pareto_filter(pts, (("accuracy", "max"), ("resource:DSP", "min")))
        assert survivors == [pts[1]]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pareto_filter([])


class TestHwNasLoss:
    def test_additive(self):
        assert hw_nas_loss(0.3, 0.2, "additive", 1.0) == pytest.approx(0.5)

    def test_multiplicative(self):
        assert hw_nas_loss(0.3, 2.0, "multiplicative", 1.0) == pytest.approx(0.6)

    def test_zero_weight_degenerates(self):
        assert hw_nas_loss(0.3, 5.0, "additive", 0.0) == pytest.approx(0.3)
        assert hw_nas_loss(0.3, 5.0, "multiplicative", 0.0) == pytest.approx(0.3)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            hw_nas_loss(0.1, 0.1, "geometric")


class TestTemplate:
    def test_build_shapes(self):
        evaluator = make_env()
        config = CandidateConfig("b0", 3, (0, 1), (1.0, 1.25, 0.8))
        graph = evaluator.template.build(config)
        kinds = [l.kind for l in graph.layers]
        assert kinds.count(LayerKind.CONV) == 3
        assert kinds.count(LayerKind.POOL) == 2
        assert graph.layers[-1].kind is LayerKind.FC
        # two pools: 16 -> 8 -> 4
        assert graph.layers[-1].in_channels == 4 * 4 * max(1, round(8 * 0.8))

    def test_over_pooling_is_infeasible_not_fatal(self):
        evaluator = make_env()
        config = CandidateConfig("b0", 6, tuple(range(6)), (1.0,) * 6)
        latency, _, _ = evaluator.cost(config)
        assert math.isinf(latency)

    def test_cost_cached_and_deterministic(self):
        evaluator = make_env()
        config = CandidateConfig("b0", 2, (0,), (1.0, 1.0))
        assert evaluator.cost(config) == evaluator.cost(config)


class TestInitialPopulation:
    def test_generous_budget_all_feasible(self):
        evaluator = make_env()
        constraints = SearchConstraints(1e9, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.005)
        pop = build_initial_dnns(evaluator, constraints, k=8, oracle=oracle, seed=0)
        assert len(pop.points) == 8
        assert pop.infeasible == 0
        assert pop.diagnostic is None

    def test_impossible_target_diagnosed(self):
        evaluator = make_env()
        constraints = SearchConstraints(1e-6, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.005)
        pop = build_initial_dnns(evaluator, constraints, k=5, oracle=oracle, seed=0)
        assert pop.points == []
        assert pop.infeasible == 5
        assert "infeasible" in pop.diagnostic

    def test_repair_tightens_to_target(self):
        evaluator = make_env()
        # tight but reachable: a minimal config fits comfortably
        floor_config = CandidateConfig("b0", 1, (), (0.25,))
        target = evaluator.cost(floor_config)[0] * 3.0
        constraints = SearchConstraints(target, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.005)
        pop = build_initial_dnns(evaluator, constraints, k=10, oracle=oracle, seed=1)
        assert pop.points, pop.diagnostic
        assert all(p.latency <= target for p in pop.points)

    def test_seeded_reproducibility(self):
        evaluator = make_env()
        constraints = SearchConstraints(1e9, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.005)
        a = build_initial_dnns(evaluator, constraints, k=6, oracle=oracle, seed=3)
        b = build_initial_dnns(evaluator, constraints, k=6, oracle=oracle, seed=3)
        assert a.points == b.points


class TestScdSearch:
    def planted_setup(self, seed, width=4.0):
        evaluator = make_env()
        target_config = CandidateConfig("b0", 3, (1,), (1.25, 1.0, 1.0))
        target_latency = evaluator.cost(target_config)[0]
        constraints = SearchConstraints(target_latency * 1.5, evaluator.hw)
        oracle = PlantedOracle(target_config, width)
        pop = build_initial_dnns(evaluator, constraints, k=4, oracle=oracle, seed=seed)
        return evaluator, constraints, oracle, pop

    def test_zero_iterations_returns_best_initial(self):
        evaluator, constraints, oracle, pop = self.planted_setup(0)
        result = scd_search(pop.points, oracle, constraints, 0, evaluator, seed=0)
        assert result.best == max(pop.points, key=lambda p: p.accuracy)
        assert result.trace == []

    def test_accepted_accuracy_monotone(self):
        for seed in range(6):
            evaluator, constraints, oracle, pop = self.planted_setup(seed)
            result = scd_search(pop.points, oracle, constraints, 200, evaluator, seed=seed)
            accs = [row.accuracy for row in result.trace]
            assert all(b >= a for a, b in zip(accs, accs[1:]))

    def test_never_returns_infeasible(self):
        for seed in range(6):
            evaluator, constraints, oracle, pop = self.planted_setup(seed)
            result = scd_search(pop.points, oracle, constraints, 150, evaluator, seed=seed)
            assert evaluator.feasible(result.best.config, constraints)

    def test_infeasible_start_rejected(self):
        evaluator = make_env()
        constraints = SearchConstraints(1e-6, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.005)
        doomed = evaluator.point(CandidateConfig("b0", 2, (), (1.0, 1.0)), 0.5)
        with pytest.raises(InfeasibleDesignError):
            scd_search([doomed], oracle, constraints, 10, evaluator, seed=0)

    def test_planted_optimum_recovery(self):
        hits = 0
        for seed in range(10):
            evaluator, constraints, oracle, pop = self.planted_setup(seed)
            if not pop.points:
                continue
            result = scd_search(pop.points, oracle, constraints, 500, evaluator, seed=seed)
            if oracle.distance(result.best.config) <= 1.0:
                hits += 1
        assert hits >= 8

    def test_compute_saturating_oracle_pushes_to_constraint(self):
        evaluator = make_env()
        baseline = CandidateConfig("b0", 2, (), (1.0, 1.0))
        target = evaluator.cost(baseline)[0] * 2.0
        constraints = SearchConstraints(target, evaluator.hw)
        oracle = GopsOracle(evaluator, tau_gops=0.01)
        pop = build_initial_dnns(evaluator, constraints, k=6, oracle=oracle, seed=2)
        result = scd_search(pop.points, oracle, constraints, 400, evaluator, seed=2)
        assert evaluator.feasible(result.best.config, constraints)
        start = max(pop.points, key=lambda p: p.accuracy)
        assert result.best.accuracy >= start.accuracy
        # the winner should sit near the latency ceiling, not far below it
        assert result.best.latency >= 0.5 * target

    def test_seeded_trace_reproducible(self):
        evaluator, constraints, oracle, pop = self.planted_setup(4)
        a = scd_search(pop.points, oracle, constraints, 120, evaluator, seed=4)
        b = scd_search(pop.points, oracle, constraints, 120, evaluator, seed=4)
        assert a.trace == b.trace
        assert a.best == b.best
