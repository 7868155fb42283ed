"""Layer-pipeline startup modeling and column-based cache sizing.

A column is the K-row window one vertical sliding-window step consumes; a
slice is the S-row band the window advances by.  A stage may start once its
producer has emitted two columns (K+S rows), and the ring buffer holds one
extra slice beyond those two columns so refills never stall the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .accel import BundleSpec, HardwareBudget, decompose_repetitions, repetition_latency
from .model_ir import LayerSpec, ModelGraph, QuantScheme, WINDOWED_KINDS


@dataclass(frozen=True)
class StageSpec:
    """One pipeline stage: a frame of ``rows_per_frame`` rows produced in
    ``frame_latency`` cycles with the stage's own window geometry."""

    layer_id: str
    frame_latency: float
    rows_per_frame: int
    kernel: int
    stride: int

    def __post_init__(self):
        if self.frame_latency <= 0:
            raise ValueError(f"stage {self.layer_id!r}: latency must be positive")
        if self.rows_per_frame < self.kernel:
            raise ValueError(
                f"stage {self.layer_id!r}: frame of {self.rows_per_frame} rows is "
                f"shorter than the {self.kernel}-row window"
            )
        if self.kernel < self.stride or self.stride < 1:
            raise ValueError(f"stage {self.layer_id!r}: need kernel >= stride >= 1")

    @property
    def two_column_fraction(self) -> float:
        """Fraction of the frame needed before a consumer may start: two
        columns span kernel+stride rows (capped at one full frame)."""
        return min(1.0, (self.kernel + self.stride) / self.rows_per_frame)


@dataclass(frozen=True)
class ColumnCachePlan:
    layer_id: str
    slice_rows: int
    columns_cached: int
    buffer_rows: int
    buffer_bytes: int
    full_frame_bytes: int

    @property
    def reduction_ratio(self) -> float:
        return self.full_frame_bytes / self.buffer_bytes


def column_cache_plan(
    layer: LayerSpec, act_bits: int, slice_rows: int | None = None
) -> ColumnCachePlan:
    """Ring-buffer sizing for a sliding-window layer's input feature map:
    two live columns (K + S rows) plus one prefetch slice of S rows.

    ``slice_rows`` overrides the slice height (default: the stride).
    """
    if layer.kind not in WINDOWED_KINDS:
        raise ValueError(f"layer {layer.id!r} ({layer.kind.value}) has no sliding window to cache")
    advance = layer.stride if slice_rows is None else slice_rows
    if advance < 1 or layer.kernel < advance:
        raise ValueError(f"layer {layer.id!r}: slice of {advance} rows exceeds the window")
    buffer_rows = layer.kernel + 2 * advance
    element = math.ceil(act_bits / 8)
    row_bytes = layer.input_w * layer.in_channels * element
    return ColumnCachePlan(
        layer_id=layer.id,
        slice_rows=advance,
        columns_cached=(buffer_rows - layer.kernel) // advance + 1,
        buffer_rows=buffer_rows,
        buffer_bytes=buffer_rows * row_bytes,
        full_frame_bytes=layer.input_h * row_bytes,
    )


def conventional_startup(stages: list[StageSpec]) -> float:
    """Startup when every stage waits for its producer's complete frame."""
    if not stages:
        raise ValueError("empty stage list")
    return sum(stage.frame_latency for stage in stages)


def finegrained_startup(stages: list[StageSpec]) -> float:
    """Startup with stage overlap: every stage hands off after emitting its
    first two columns, and the last stage finishes its whole first frame."""
    if not stages:
        raise ValueError("empty stage list")
    handoff = sum(s.frame_latency * s.two_column_fraction for s in stages[:-1])
    return handoff + stages[-1].frame_latency


def steady_throughput(stages: list[StageSpec]) -> float:
    """Frames per kilocycle once the pipeline is full (bottleneck stage)."""
    if not stages:
        raise ValueError("empty stage list")
    return 1e3 / max(stage.frame_latency for stage in stages)


def stages_from_graph(
    graph: ModelGraph,
    bundle: BundleSpec,
    hw: HardwareBudget,
    scheme: QuantScheme,
) -> list[StageSpec]:
    """One pipeline stage per bundle repetition, with the repetition latency
    as frame latency and the leading layer's window geometry."""
    stages = []
    for rep in decompose_repetitions(graph):
        head = rep[0]
        rows = max(head.out_h, head.kernel)
        stages.append(
            StageSpec(
                layer_id=head.id,
                frame_latency=repetition_latency(rep, bundle, hw, scheme),
                rows_per_frame=rows,
                kernel=head.kernel,
                stride=min(head.stride, head.kernel),
            )
        )
    return stages
