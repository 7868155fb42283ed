"""Analytical latency and resource estimation for bundle-based accelerators.

All latency is kept in clock cycles and bandwidth in bytes per cycle;
milliseconds only appear at the reporting edge.  Off-chip traffic for a
repetition counts its boundary feature maps plus all layer weights
(intermediate activations inside a repetition stay on chip), with activations
rounded up to whole bytes per element and the sub-byte-packed weight tensors
rounded up to whole bytes per tensor.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DecompositionError, ModelFormatError
from .model_ir import LayerKind, LayerSpec, ModelGraph, QuantScheme, WEIGHTED_KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RESOURCE_TYPES = ("DSP", "LUT", "FF", "BRAM")


@dataclass(frozen=True)
class IpSpec:
    """Pre-built compute instance: per-invocation latency, resource cost, and
    the processing tile its interface accepts per invocation."""

    id: str
    lat_cycles: float
    res: dict[str, int]
    tile_h: int = 1
    tile_w: int = 1
    tile_cin: int = 1
    tile_cout: int = 1
    kinds: frozenset[LayerKind] = frozenset(WEIGHTED_KINDS)

    def __post_init__(self):
        if self.lat_cycles <= 0:
            raise ValueError(f"ip {self.id!r}: lat_cycles must be positive")
        for dim in ("tile_h", "tile_w", "tile_cin", "tile_cout"):
            if getattr(self, dim) < 1:
                raise ValueError(f"ip {self.id!r}: {dim} must be >= 1")
        object.__setattr__(self, "res", _normalize_res(self.res, f"ip {self.id!r}"))
        object.__setattr__(self, "kinds", frozenset(self.kinds))

    def serves(self, kind: LayerKind) -> bool:
        return kind in self.kinds


@dataclass(frozen=True)
class BundleSpec:
    """A reusable set of IPs with overlap factors and glue-logic overhead."""

    id: str
    ips: tuple[IpSpec, ...]
    alpha: float = 1.0
    beta: float = 1.0
    gamma_overhead: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "ips", tuple(self.ips))
        if not self.ips:
            raise ValueError(f"bundle {self.id!r}: needs at least one ip")
        if not 0.0 < self.alpha <= 1.0 or not 0.0 < self.beta <= 1.0:
            raise ValueError(f"bundle {self.id!r}: overlap factors must lie in (0, 1]")
        object.__setattr__(
            self, "gamma_overhead", _normalize_res(self.gamma_overhead, f"bundle {self.id!r}")
        )


@dataclass(frozen=True)
class HardwareBudget:
    totals: dict[str, int]
    bw_bytes_per_cycle: float
    freq_mhz: float

    def __post_init__(self):
        totals = _normalize_res(self.totals, "budget")
        if any(v <= 0 for v in totals.values()):
            raise ValueError("budget totals must be positive")
        object.__setattr__(self, "totals", totals)
        if self.bw_bytes_per_cycle <= 0 or self.freq_mhz <= 0:
            raise ValueError("bandwidth and frequency must be positive")


@dataclass(frozen=True)
class CalibrationParams:
    """Synthesis-calibrated constants: inter-repetition data-movement latency
    and control-logic resource overhead, with their weights."""

    phi: float = 0.0
    lat_dm: float = 0.0
    gamma: float = 0.0
    res_ctl: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.phi < 0 or self.lat_dm < 0 or self.gamma < 0:
            raise ValueError("calibration parameters must be non-negative")
        object.__setattr__(self, "res_ctl", _normalize_res(self.res_ctl, "calibration"))


@dataclass(frozen=True)
class LatencyEstimate:
    cycles: float
    freq_mhz: float
    per_repetition: tuple[float, ...] = ()

    @property
    def milliseconds(self) -> float:
        return self.cycles / (self.freq_mhz * 1e3)


@dataclass(frozen=True)
class ResourceEstimate:
    counts: dict[str, float]
    totals: dict[str, int] | None = None

    @property
    def utilization(self) -> dict[str, float]:
        if self.totals is None:
            return {}
        return {r: self.counts.get(r, 0.0) / self.totals[r] for r in self.totals}

    @property
    def feasible(self) -> bool:
        return all(u <= 1.0 for u in self.utilization.values())


def _normalize_res(res: dict[str, int] | None, owner: str) -> dict[str, int]:
    out = {}
    for key, value in (res or {}).items():
        name = key.upper()
        if name not in RESOURCE_TYPES:
            raise ValueError(f"{owner}: unknown resource type {key!r}")
        if value < 0:
            raise ValueError(f"{owner}: resource {name} must be non-negative")
        out[name] = int(value)
    return out


# ---------------------------------------------------------------------------
# Per-layer building blocks
# ---------------------------------------------------------------------------

def reuse_count(layer: LayerSpec, ip: IpSpec) -> int:
    """Invocations needed to tile the layer's output volume onto the IP."""
    return (
        math.ceil(layer.out_h / ip.tile_h)
        * math.ceil(layer.out_w / ip.tile_w)
        * math.ceil(layer.in_channels / ip.tile_cin)
        * math.ceil(layer.out_channels / ip.tile_cout)
    )


def comp_latency(layer: LayerSpec, bundle: BundleSpec) -> float:
    """Compute cycles for one layer: sum of reuse * per-invocation latency
    over the bundle IPs serving this layer kind."""
    return sum(
        reuse_count(layer, ip) * ip.lat_cycles for ip in bundle.ips if ip.serves(layer.kind)
    )


def act_bytes_per_element(act_bits: int) -> int:
    return math.ceil(act_bits / 8)


def weight_bytes(layer: LayerSpec, scheme: QuantScheme) -> int:
    """Sub-byte packed weight tensor size, rounded up to whole bytes."""
    bits = scheme.bits_for(layer.quant_group)
    if bits is None:
        return 0
    return math.ceil(layer.weight_count * bits / 8)


def layer_data_bytes(layer: LayerSpec, scheme: QuantScheme) -> int:
    """Off-chip traffic if the layer runs standalone: input + output feature
    maps at the activation width, plus its packed weights."""
    element = act_bytes_per_element(scheme.act_bits)
    inputs = layer.input_h * layer.input_w * layer.in_channels * element
    outputs = layer.out_h * layer.out_w * layer.out_channels * element
    return inputs + outputs + weight_bytes(layer, scheme)


def bundle_latency(
    layer: LayerSpec, bundle: BundleSpec, hw: HardwareBudget, scheme: QuantScheme
) -> float:
    """One layer through the bundle: alpha * compute + beta * traffic / bw."""
    transfer = layer_data_bytes(layer, scheme) / hw.bw_bytes_per_cycle
    return bundle.alpha * comp_latency(layer, bundle) + bundle.beta * transfer


def bundle_resource(bundle: BundleSpec) -> ResourceEstimate:
    """Per-type sum of IP resources plus the bundle's glue-logic overhead."""
    counts = {r: 0.0 for r in RESOURCE_TYPES}
    for ip in bundle.ips:
        for r, v in ip.res.items():
            counts[r] += v
    for r, v in bundle.gamma_overhead.items():
        counts[r] += v
    return ResourceEstimate(counts)


# ---------------------------------------------------------------------------
# Whole-DNN estimates
# ---------------------------------------------------------------------------

def decompose_repetitions(graph: ModelGraph) -> list[list[LayerSpec]]:
    """Group layers into bundle repetitions: each weighted layer opens a
    repetition and absorbs the bn/act layers that follow it; pool layers form
    their own transfer-only repetition."""
    reps: list[list[LayerSpec]] = []
    current: list[LayerSpec] | None = None
    for layer in graph.layers:
        if layer.kind in WEIGHTED_KINDS:
            current = [layer]
            reps.append(current)
        elif layer.kind is LayerKind.POOL:
            current = None
            reps.append([layer])
        elif current is None:
            raise DecompositionError(
                f"model {graph.name!r}: layer {layer.id!r} ({layer.kind.value}) has no "
                f"preceding weighted layer to attach to"
            )
        else:
            current.append(layer)
    return reps


def repetition_latency(
    rep: list[LayerSpec], bundle: BundleSpec, hw: HardwareBudget, scheme: QuantScheme
) -> float:
    """Latency of one repetition: compute for every layer in it, traffic for
    its boundary feature maps and all of its weights."""
    compute = sum(comp_latency(layer, bundle) for layer in rep)
    element = act_bytes_per_element(scheme.act_bits)
    first, last = rep[0], rep[-1]
    traffic = (
        first.input_h * first.input_w * first.in_channels * element
        + last.out_h * last.out_w * last.out_channels * element
        + sum(weight_bytes(layer, scheme) for layer in rep)
    )
    return bundle.alpha * compute + bundle.beta * traffic / hw.bw_bytes_per_cycle


def dnn_latency(
    graph: ModelGraph,
    bundle: BundleSpec,
    hw: HardwareBudget,
    cal: CalibrationParams,
    scheme: QuantScheme,
) -> LatencyEstimate:
    """Whole-network latency: per-repetition latencies plus the weighted
    inter-repetition data-movement term."""
    reps = decompose_repetitions(graph)
    per_rep = tuple(repetition_latency(rep, bundle, hw, scheme) for rep in reps)
    cycles = sum(per_rep) + cal.phi * cal.lat_dm
    return LatencyEstimate(cycles, hw.freq_mhz, per_rep)


def dnn_resource(
    bundle: BundleSpec, cal: CalibrationParams, hw: HardwareBudget | None = None
) -> ResourceEstimate:
    """Whole-network resource: one bundle instance (repetitions share the
    hardware) plus weighted control overhead."""
    counts = dict(bundle_resource(bundle).counts)
    for r, v in cal.res_ctl.items():
        counts[r] = counts.get(r, 0.0) + cal.gamma * v
    return ResourceEstimate(counts, hw.totals if hw is not None else None)


# ---------------------------------------------------------------------------
# TOML hardware/calibration files
# ---------------------------------------------------------------------------

def load_hw_config(path: str | Path) -> tuple[HardwareBudget, BundleSpec, CalibrationParams]:
    """Read the [budget] / [[ip]] / [bundle] / [calibration] sections."""
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid TOML ({exc})") from exc
    try:
        budget_doc = doc["budget"]
        budget = HardwareBudget(
            totals={
                "DSP": budget_doc["dsp"],
                "LUT": budget_doc["lut"],
                "FF": budget_doc["ff"],
                "BRAM": budget_doc["bram"],
            },
            bw_bytes_per_cycle=float(budget_doc["bw_bytes_per_cycle"]),
            freq_mhz=float(budget_doc["freq_mhz"]),
        )
        ips = []
        for ip_doc in doc.get("ip", []):
            tile = ip_doc.get("tile", {})
            kinds = ip_doc.get("kinds")
            ips.append(
                IpSpec(
                    id=ip_doc["id"],
                    lat_cycles=float(ip_doc["lat_cycles"]),
                    res=ip_doc.get("res", {}),
                    tile_h=int(tile.get("h", 1)),
                    tile_w=int(tile.get("w", 1)),
                    tile_cin=int(tile.get("cin", 1)),
                    tile_cout=int(tile.get("cout", 1)),
                    kinds=frozenset(LayerKind(k) for k in kinds) if kinds else frozenset(WEIGHTED_KINDS),
                )
            )
        bundle_doc = doc.get("bundle", {})
        bundle = BundleSpec(
            id=bundle_doc.get("id", "bundle0"),
            ips=tuple(ips),
            alpha=float(bundle_doc.get("alpha", 1.0)),
            beta=float(bundle_doc.get("beta", 1.0)),
            gamma_overhead=bundle_doc.get("gamma_overhead", {}),
        )
        cal_doc = doc.get("calibration", {})
        cal = CalibrationParams(
            phi=float(cal_doc.get("phi", 0.0)),
            lat_dm=float(cal_doc.get("lat_dm", 0.0)),
            gamma=float(cal_doc.get("gamma", 0.0)),
            res_ctl=cal_doc.get("res_ctl", {}),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad hardware config ({exc})") from exc
    return budget, bundle, cal
