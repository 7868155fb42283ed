"""Design-space exploration: Pareto filtering, constrained initial-population
construction, and stochastic coordinate descent over the three DNN shape
variables (repetition count, downsample positions, channel expansion).

Accuracy comes through an injected oracle so the same loop runs against the
synthetic compute proxy, a planted-optimum harness, or a real trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .accel import BundleSpec, CalibrationParams, HardwareBudget, dnn_latency, dnn_resource
from .errors import InfeasibleDesignError, ModelFormatError
from .model_ir import LayerKind, LayerSpec, ModelGraph, QuantGroup, QuantScheme

EXPANSION_STEP = 1.25
EXPANSION_MIN = 0.25
EXPANSION_MAX = 4.0
MAX_REPAIR_ROUNDS = 100

COORDINATE_GROUPS = ("replications", "downsample", "expansion")


@dataclass(frozen=True)
class CandidateConfig:
    """One point in the shape space: N repetitions of the bundle, pool
    positions (after repetition i), and per-repetition channel expansion."""

    bundle_id: str
    replications: int
    downsample_at: tuple[int, ...] = ()
    expansion: tuple[float, ...] = ()

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("need at least one bundle repetition")
        positions = tuple(sorted(set(self.downsample_at)))
        if positions and (positions[0] < 0 or positions[-1] >= self.replications):
            raise ValueError(
                f"downsample positions {positions} outside 0..{self.replications - 1}"
            )
        object.__setattr__(self, "downsample_at", positions)
        expansion = tuple(self.expansion) or (1.0,) * self.replications
        if len(expansion) != self.replications:
            raise ValueError(
                f"{len(expansion)} expansion factors for {self.replications} repetitions"
            )
        if any(e <= 0 for e in expansion):
            raise ValueError("expansion factors must be positive")
        object.__setattr__(self, "expansion", expansion)


@dataclass(frozen=True)
class DesignPoint:
    config: CandidateConfig
    accuracy: float
    latency: float
    resource: dict[str, float]


@dataclass(frozen=True)
class SearchConstraints:
    latency_target: float
    budget: HardwareBudget

    def __post_init__(self):
        if self.latency_target <= 0:
            raise ValueError("latency target must be positive")


@dataclass(frozen=True)
class DnnTemplate:
    """Recipe turning a CandidateConfig into a concrete model graph:
    conv3x3+bn+act per repetition, 2x2 pools at the downsample positions, and
    a final fc classifier."""

    input_h: int = 32
    input_w: int = 32
    input_c: int = 3
    base_channels: int = 16
    num_classes: int = 10

    def build(self, config: CandidateConfig, name: str = "candidate") -> ModelGraph:
        layers: list[LayerSpec] = []
        h, w, c = self.input_h, self.input_w, self.input_c
        for i in range(config.replications):
            out_c = max(1, round(self.base_channels * config.expansion[i]))
            group = QuantGroup.FIRST_CONV if i == 0 else QuantGroup.MID_CONV
            layers.append(LayerSpec(f"c{i}", LayerKind.CONV, h, w, c, out_c, 3, 1, 1, group))
            layers.append(LayerSpec(f"b{i}", LayerKind.BN, h, w, out_c, out_c))
            layers.append(LayerSpec(f"a{i}", LayerKind.ACT, h, w, out_c, out_c))
            c = out_c
            if i in config.downsample_at:
                layers.append(LayerSpec(f"p{i}", LayerKind.POOL, h, w, c, c, 2, 2, 0))
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ModelFormatError(
                        f"config pools the {self.input_h}x{self.input_w} input away "
                        f"at position {i}"
                    )
        layers.append(
            LayerSpec(
                "head", LayerKind.FC, 1, 1, h * w * c, self.num_classes,
                quant_group=QuantGroup.LAST_FC,
            )
        )
        return ModelGraph(name, tuple(layers), bundle_template=config.bundle_id)


class Evaluator:
    """Builds candidate graphs and caches their analytical cost estimates."""

    def __init__(
        self,
        template: DnnTemplate,
        bundle: BundleSpec,
        hw: HardwareBudget,
        cal: CalibrationParams,
        scheme: QuantScheme,
    ):
        self.template = template
        self.bundle = bundle
        self.hw = hw
        self.cal = cal
        self.scheme = scheme
        self._cache: dict[CandidateConfig, tuple[float, dict[str, float], float]] = {}

    def cost(self, config: CandidateConfig) -> tuple[float, dict[str, float], float]:
        """(latency cycles, resource counts, gops); unbuildable configs get
        infinite latency so they rank as infeasible."""
        if config not in self._cache:
            try:
                graph = self.template.build(config)
            except ModelFormatError:
                resource = dnn_resource(self.bundle, self.cal, self.hw).counts
                self._cache[config] = (math.inf, resource, 0.0)
            else:
                latency = dnn_latency(graph, self.bundle, self.hw, self.cal, self.scheme)
                resource = dnn_resource(self.bundle, self.cal, self.hw).counts
                self._cache[config] = (latency.cycles, resource, graph.gops)
        return self._cache[config]

    def point(self, config: CandidateConfig, accuracy: float) -> DesignPoint:
        latency, resource, _ = self.cost(config)
        return DesignPoint(config, accuracy, latency, resource)

    def feasible(self, config: CandidateConfig, constraints: SearchConstraints) -> bool:
        latency, resource, _ = self.cost(config)
        if latency > constraints.latency_target:
            return False
        return all(
            resource.get(r, 0.0) <= total for r, total in constraints.budget.totals.items()
        )


class GopsOracle:
    """Synthetic accuracy proxy: saturating function of candidate compute."""

    def __init__(self, evaluator: Evaluator, tau_gops: float):
        if tau_gops <= 0:
            raise ValueError("tau_gops must be positive")
        self.evaluator = evaluator
        self.tau_gops = tau_gops

    def __call__(self, config: CandidateConfig) -> float:
        _, _, gops = self.evaluator.cost(config)
        return 1.0 - math.exp(-gops / self.tau_gops)


# ---------------------------------------------------------------------------
# Pareto filtering
# ---------------------------------------------------------------------------

DEFAULT_OBJECTIVES = (("accuracy", "max"), ("latency", "min"))


def _metric(point: DesignPoint, key) -> float:
    if callable(key):
        return float(key(point))
    if key.startswith("resource:"):
        return float(point.resource.get(key.split(":", 1)[1].upper(), 0.0))
    return float(getattr(point, key))


def _dominates(a, b) -> bool:
    """a dominates b: at least as good everywhere, strictly better somewhere."""
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_filter(points: list[DesignPoint], objectives=DEFAULT_OBJECTIVES) -> list[DesignPoint]:
    """Non-dominated subset in input order; exact ties survive together."""
    if not points:
        raise ValueError("empty design point list")
    signed = []
    for point in points:
        row = []
        for key, sense in objectives:
            value = _metric(point, key)
            row.append(value if sense == "max" else -value)
        signed.append(tuple(row))
    survivors = []
    for i, point in enumerate(points):
        if not any(_dominates(signed[j], signed[i]) for j in range(len(points)) if j != i):
            survivors.append(point)
    return survivors


def hw_nas_loss(task_loss: float, hw_loss: float, mode: str = "additive", weight: float = 1.0) -> float:
    """Combine a task loss with a hardware-performance loss, either as a
    weighted sum or as a product with the weight as exponent."""
    if task_loss < 0 or hw_loss < 0 or weight < 0:
        raise ValueError("losses and weight must be non-negative")
    if mode == "additive":
        return task_loss + weight * hw_loss
    if mode == "multiplicative":
        return task_loss * hw_loss**weight
    raise ValueError(f"unknown combination mode {mode!r}")


# ---------------------------------------------------------------------------
# Initial population
# ---------------------------------------------------------------------------

@dataclass
class InitialPopulation:
    points: list[DesignPoint]
    infeasible: int = 0
    diagnostic: str | None = None


def _random_config(bundle_id: str, rng: np.random.Generator, max_reps: int) -> CandidateConfig:
    n = int(rng.integers(1, max_reps + 1))
    downsample = tuple(i for i in range(n) if rng.random() < 0.35)
    expansion = tuple(
        float(EXPANSION_STEP ** int(rng.integers(-2, 3))) for _ in range(n)
    )
    return CandidateConfig(bundle_id, n, downsample, expansion)


def _shrink(config: CandidateConfig) -> CandidateConfig | None:
    """One repair move: shrink channels first, then drop the last repetition."""
    if any(e > EXPANSION_MIN for e in config.expansion):
        shrunk = tuple(max(EXPANSION_MIN, e / EXPANSION_STEP) for e in config.expansion)
        return replace(config, expansion=shrunk)
    if config.replications > 1:
        n = config.replications - 1
        return CandidateConfig(
            config.bundle_id,
            n,
            tuple(p for p in config.downsample_at if p < n),
            config.expansion[:n],
        )
    return None


def build_initial_dnns(
    evaluator: Evaluator,
    constraints: SearchConstraints,
    k: int,
    oracle,
    seed: int = 0,
    max_reps: int = 6,
) -> InitialPopulation:
    """Sample k random configs and repair each toward the constraints; configs
    still infeasible after the repair budget are dropped and counted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    points: list[DesignPoint] = []
    infeasible = 0
    for _ in range(k):
        config = _random_config(evaluator.bundle.id, rng, max_reps)
        rounds = 0
        while not evaluator.feasible(config, constraints) and rounds < MAX_REPAIR_ROUNDS:
            shrunk = _shrink(config)
            if shrunk is None:
                break
            config = shrunk
            rounds += 1
        if evaluator.feasible(config, constraints):
            points.append(evaluator.point(config, oracle(config)))
        else:
            infeasible += 1
    diagnostic = None
    if not points:
        latency, resource, _ = evaluator.cost(
            CandidateConfig(evaluator.bundle.id, 1, (), (EXPANSION_MIN,))
        )
        diagnostic = (
            f"all {k} candidates infeasible: smallest candidate needs "
            f"{latency:.0f} cycles and {resource} against target "
            f"{constraints.latency_target:.0f}"
        )
    return InitialPopulation(points, infeasible, diagnostic)


# ---------------------------------------------------------------------------
# Stochastic coordinate descent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScdTraceRow:
    iteration: int
    coordinate: str
    accepted: bool
    accuracy: float
    latency: float


@dataclass
class ScdResult:
    best: DesignPoint
    trace: list[ScdTraceRow] = field(default_factory=list)


def _propose(config: CandidateConfig, group: str, rng: np.random.Generator) -> CandidateConfig:
    n = config.replications
    if group == "replications":
        delta = int(rng.choice((-1, 1)))
        new_n = max(1, n + delta)
        if new_n == n:
            return config
        if new_n > n:
            expansion = config.expansion + (1.0,)
            downsample = config.downsample_at
        else:
            expansion = config.expansion[:new_n]
            downsample = tuple(p for p in config.downsample_at if p < new_n)
        return CandidateConfig(config.bundle_id, new_n, downsample, expansion)
    if group == "downsample":
        positions = set(config.downsample_at)
        if positions and rng.random() < 0.5:
            moved = int(rng.choice(sorted(positions)))
            positions.discard(moved)
            positions.add(min(n - 1, max(0, moved + int(rng.choice((-1, 1))))))
        else:
            toggled = int(rng.integers(0, n))
            positions.symmetric_difference_update({toggled})
        return replace(config, downsample_at=tuple(sorted(positions)))
    if group == "expansion":
        slot = int(rng.integers(0, n))
        factor = EXPANSION_STEP if rng.random() < 0.5 else 1.0 / EXPANSION_STEP
        expansion = list(config.expansion)
        expansion[slot] = min(EXPANSION_MAX, max(EXPANSION_MIN, expansion[slot] * factor))
        return replace(config, expansion=tuple(expansion))
    raise ValueError(f"unknown coordinate group {group!r}")


def scd_search(
    initial: list[DesignPoint],
    oracle,
    constraints: SearchConstraints,
    iters: int,
    evaluator: Evaluator,
    seed: int = 0,
) -> ScdResult:
    """Local search: one coordinate group per iteration, accept only feasible
    strict accuracy improvements, so the accepted-objective trace is
    non-decreasing by construction."""
    feasible = [p for p in initial if evaluator.feasible(p.config, constraints)]
    if not feasible:
        raise InfeasibleDesignError("no feasible starting point for the search")
    current = max(feasible, key=lambda p: p.accuracy)
    rng = np.random.default_rng(seed)
    result = ScdResult(best=current)
    for iteration in range(iters):
        group = COORDINATE_GROUPS[int(rng.integers(0, len(COORDINATE_GROUPS)))]
        proposal = _propose(current.config, group, rng)
        accepted = False
        if proposal != current.config and evaluator.feasible(proposal, constraints):
            accuracy = oracle(proposal)
            if accuracy > current.accuracy:
                current = evaluator.point(proposal, accuracy)
                accepted = True
        result.trace.append(
            ScdTraceRow(iteration, group, accepted, current.accuracy, current.latency)
        )
    result.best = current
    return result
