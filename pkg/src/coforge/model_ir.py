"""In-memory DNN graph representation, hybrid bitwidth schemes, and file loaders.

The graph model is deliberately narrow: single-path layer lists (no branches),
six layer kinds, and explicit shape propagation so the analytical cost models
downstream always see exact feature-map dimensions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, SchemeParseError, WeightFormatError


class LayerKind(str, Enum):
    CONV = "conv"
    DWCONV = "dwconv"
    FC = "fc"
    POOL = "pool"
    BN = "bn"
    ACT = "act"


class QuantGroup(str, Enum):
    FIRST_CONV = "first_conv"
    MID_CONV = "mid_conv"
    MID_FC = "mid_fc"
    LAST_FC = "last_fc"
    NON_WEIGHTED = "non_weighted"


#: Layer kinds that carry trainable weights.
WEIGHTED_KINDS = frozenset({LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC})

#: Kinds whose sliding window makes sense for cache planning.
WINDOWED_KINDS = frozenset({LayerKind.CONV, LayerKind.DWCONV, LayerKind.POOL})


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a single-path DNN.

    ``in_channels`` is the flattened feature count for fc layers (the loader
    flattens H*W*C at the conv-to-fc boundary).  ``padding`` defaults to the
    same-style floor(K/2).
    """

    id: str
    kind: LayerKind
    input_h: int
    input_w: int
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int | None = None
    quant_group: QuantGroup = QuantGroup.NON_WEIGHTED

    def __post_init__(self):
        if not self.id:
            raise ModelFormatError("layer id must be non-empty")
        for name in ("input_h", "input_w", "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ModelFormatError(f"layer {self.id!r}: {name} must be >= 1")
        if self.kernel < 1 or self.stride < 1:
            raise ModelFormatError(f"layer {self.id!r}: kernel and stride must be >= 1")
        if self.kind in WINDOWED_KINDS and self.kernel < self.stride:
            raise ModelFormatError(
                f"layer {self.id!r}: kernel {self.kernel} < stride {self.stride} "
                f"is unsupported for {self.kind.value}"
            )
        if self.kind is LayerKind.FC and (self.kernel != 1 or self.stride != 1):
            raise ModelFormatError(f"layer {self.id!r}: fc layers require kernel=1, stride=1")
        if self.kind in (LayerKind.DWCONV, LayerKind.POOL, LayerKind.BN, LayerKind.ACT):
            if self.out_channels != self.in_channels:
                raise ModelFormatError(
                    f"layer {self.id!r}: {self.kind.value} must preserve channel count "
                    f"(got {self.in_channels} -> {self.out_channels})"
                )
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        if self.padding < 0:
            raise ModelFormatError(f"layer {self.id!r}: padding must be >= 0")
        if self.kind in WEIGHTED_KINDS:
            if self.quant_group is QuantGroup.NON_WEIGHTED:
                raise ModelFormatError(
                    f"layer {self.id!r}: weighted layer needs a weight quant group"
                )
        elif self.quant_group is not QuantGroup.NON_WEIGHTED:
            raise ModelFormatError(
                f"layer {self.id!r}: {self.kind.value} layers carry no weights and "
                f"must use quant_group=non_weighted"
            )

    @property
    def out_h(self) -> int:
        if self.kind is LayerKind.FC:
            return 1
        return (self.input_h + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_w(self) -> int:
        if self.kind is LayerKind.FC:
            return 1
        return (self.input_w + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def weight_count(self) -> int:
        """Flattened weight vector length: N*M*K^2 (conv), N*K^2 (dwconv), N*M (fc)."""
        if self.kind is LayerKind.CONV:
            return self.in_channels * self.out_channels * self.kernel**2
        if self.kind is LayerKind.DWCONV:
            return self.in_channels * self.kernel**2
        if self.kind is LayerKind.FC:
            return self.in_channels * self.out_channels
        return 0

    @property
    def mac_ops(self) -> int:
        """Multiply-accumulate count for one inference pass (2 ops per MAC)."""
        if self.kind is LayerKind.CONV:
            return 2 * self.out_h * self.out_w * self.kernel**2 * self.in_channels * self.out_channels
        if self.kind is LayerKind.DWCONV:
            return 2 * self.out_h * self.out_w * self.kernel**2 * self.in_channels
        if self.kind is LayerKind.FC:
            return 2 * self.in_channels * self.out_channels
        return 0


@dataclass(frozen=True)
class ModelGraph:
    """Ordered single-path layer list; list order is execution order."""

    name: str
    layers: tuple[LayerSpec, ...]
    bundle_template: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ModelFormatError(f"model {self.name!r} has no layers")
        seen = set()
        for layer in self.layers:
            if layer.id in seen:
                raise ModelFormatError(f"duplicate layer id {layer.id!r}")
            seen.add(layer.id)
        _check_shapes(self.name, self.layers)
        _check_quant_groups(self.name, self.layers)

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def weighted_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind in WEIGHTED_KINDS)

    @property
    def total_ops(self) -> int:
        return sum(l.mac_ops for l in self.layers)

    @property
    def gops(self) -> float:
        return self.total_ops / 1e9


def _check_shapes(name: str, layers: tuple[LayerSpec, ...]) -> None:
    for prev, cur in zip(layers, layers[1:]):
        if cur.kind is LayerKind.FC:
            expected = prev.out_h * prev.out_w * prev.out_channels
            if cur.in_channels != expected or cur.input_h != 1 or cur.input_w != 1:
                raise ModelFormatError(
                    f"model {name!r}: fc layer {cur.id!r} expects flattened input "
                    f"{expected} (=1x1x{expected}) but declares "
                    f"{cur.input_h}x{cur.input_w}x{cur.in_channels}; "
                    f"previous layer {prev.id!r} emits {prev.out_h}x{prev.out_w}x{prev.out_channels}"
                )
        elif (cur.input_h, cur.input_w, cur.in_channels) != (prev.out_h, prev.out_w, prev.out_channels):
            raise ModelFormatError(
                f"model {name!r}: shape mismatch between {prev.id!r} "
                f"(emits {prev.out_h}x{prev.out_w}x{prev.out_channels}) and {cur.id!r} "
                f"(expects {cur.input_h}x{cur.input_w}x{cur.in_channels})"
            )


def _check_quant_groups(name: str, layers: tuple[LayerSpec, ...]) -> None:
    weighted = [l for l in layers if l.kind in WEIGHTED_KINDS]
    if not weighted:
        return
    firsts = [l for l in weighted if l.quant_group is QuantGroup.FIRST_CONV]
    lasts = [l for l in weighted if l.quant_group is QuantGroup.LAST_FC]
    if len(firsts) > 1:
        raise ModelFormatError(f"model {name!r}: more than one first_conv layer")
    if len(lasts) > 1:
        raise ModelFormatError(f"model {name!r}: more than one last_fc layer")
    has_conv = any(l.kind in (LayerKind.CONV, LayerKind.DWCONV) for l in weighted)
    has_fc = any(l.kind is LayerKind.FC for l in weighted)
    if has_conv and (not firsts or weighted[0] is not firsts[0]):
        raise ModelFormatError(
            f"model {name!r}: the leading weighted layer must carry quant_group=first_conv"
        )
    if has_fc and (not lasts or weighted[-1] is not lasts[0]):
        raise ModelFormatError(
            f"model {name!r}: the final weighted layer must carry quant_group=last_fc"
        )


# ---------------------------------------------------------------------------
# Hybrid quantization schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantScheme:
    """Per-group bitwidth assignment: activations plus four weight groups."""

    act_bits: int
    first_conv_bits: int
    mid_conv_bits: int
    mid_fc_bits: int
    last_fc_bits: int

    def __post_init__(self):
        for name in ("act_bits", "first_conv_bits", "mid_conv_bits", "mid_fc_bits", "last_fc_bits"):
            bits = getattr(self, name)
            if not 1 <= bits <= 32:
                raise SchemeParseError(f"{name}={bits} outside the supported 1..32 range")

    def bits_for(self, group: QuantGroup) -> int | None:
        """Weight bitwidth for a quant group; None for non-weighted layers."""
        return {
            QuantGroup.FIRST_CONV: self.first_conv_bits,
            QuantGroup.MID_CONV: self.mid_conv_bits,
            QuantGroup.MID_FC: self.mid_fc_bits,
            QuantGroup.LAST_FC: self.last_fc_bits,
            QuantGroup.NON_WEIGHTED: None,
        }[group]


def parse_scheme(name: str) -> QuantScheme:
    """Parse ``<netname>-<A>-<D1D2D3D4>`` into a QuantScheme.

    A is the activation bitwidth (may be multi-digit); the four weight digits
    cover first conv, mid conv, mid fc, and last fc, in that order.
    """
    parts = name.rsplit("-", 2)
    if len(parts) != 3 or not parts[0]:
        raise SchemeParseError(
            f"scheme {name!r} must look like <netname>-<actbits>-<4 weight digits>"
        )
    netname, act_part, digit_part = parts
    if not act_part.isdigit():
        raise SchemeParseError(f"scheme {name!r}: activation segment {act_part!r} is not a number")
    act_bits = int(act_part)
    if not 1 <= act_bits <= 32:
        raise SchemeParseError(f"scheme {name!r}: activation bitwidth {act_bits} outside 1..32")
    if not digit_part.isdigit() or len(digit_part) != 4:
        raise SchemeParseError(
            f"scheme {name!r}: weight segment {digit_part!r} must be exactly 4 digits"
        )
    digits = [int(c) for c in digit_part]
    if any(d == 0 for d in digits):
        raise SchemeParseError(f"scheme {name!r}: weight segment {digit_part!r} contains a zero bitwidth")
    return QuantScheme(act_bits, *digits)


def format_scheme(scheme: QuantScheme, netname: str = "net") -> str:
    """Inverse of parse_scheme; weight bitwidths above 9 have no digit form."""
    digits = (scheme.first_conv_bits, scheme.mid_conv_bits, scheme.mid_fc_bits, scheme.last_fc_bits)
    if any(d > 9 for d in digits):
        raise SchemeParseError(f"weight bitwidths {digits} cannot be written as single digits")
    return f"{netname}-{scheme.act_bits}-" + "".join(str(d) for d in digits)


# ---------------------------------------------------------------------------
# Weight payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightVector:
    """Flattened per-layer weights, stored float32 at module boundaries."""

    layer_id: str
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise WeightFormatError(f"layer {self.layer_id!r}: weights must be a non-empty vector")
        if not np.all(np.isfinite(arr)):
            raise WeightFormatError(f"layer {self.layer_id!r}: weights contain non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)


# ---------------------------------------------------------------------------
# Model JSON files
# ---------------------------------------------------------------------------

def load_model(path: str | Path) -> ModelGraph:
    """Load and validate a model JSON file; shape propagation and default
    quant-group assignment are applied before invariants are checked."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ModelFormatError(f"{path}: expected an object with a 'layers' list")

    # Resolve kinds and default weight groups before constructing the
    # validated LayerSpecs: the leading weighted conv becomes first_conv, the
    # final weighted fc becomes last_fc, the rest fall into the mid groups.
    kinds: list[LayerKind] = []
    for i, entry in enumerate(doc["layers"]):
        try:
            kinds.append(LayerKind(entry["kind"]))
        except (KeyError, ValueError):
            raise ModelFormatError(
                f"{path}: layer #{i} has unknown kind {entry.get('kind')!r}"
            ) from None
    weighted_pos = [i for i, k in enumerate(kinds) if k in WEIGHTED_KINDS]
    groups: list[QuantGroup] = []
    for i, (entry, kind) in enumerate(zip(doc["layers"], kinds)):
        if entry.get("quant_group"):
            try:
                groups.append(QuantGroup(entry["quant_group"]))
            except ValueError:
                raise ModelFormatError(
                    f"{path}: layer #{i} has unknown quant_group {entry['quant_group']!r}"
                ) from None
        elif kind not in WEIGHTED_KINDS:
            groups.append(QuantGroup.NON_WEIGHTED)
        elif kind in (LayerKind.CONV, LayerKind.DWCONV):
            groups.append(QuantGroup.FIRST_CONV if i == weighted_pos[0] else QuantGroup.MID_CONV)
        else:
            groups.append(QuantGroup.LAST_FC if i == weighted_pos[-1] else QuantGroup.MID_FC)

    layers = []
    for i, (entry, kind, group) in enumerate(zip(doc["layers"], kinds, groups)):
        try:
            in_h, in_w, in_c = entry["in"]
            layers.append(
                LayerSpec(
                    id=entry["id"],
                    kind=kind,
                    input_h=int(in_h),
                    input_w=int(in_w),
                    in_channels=int(in_c),
                    out_channels=int(entry.get("out_channels", in_c)),
                    kernel=int(entry.get("kernel", 1)),
                    stride=int(entry.get("stride", 1)),
                    padding=None if entry.get("padding") is None else int(entry["padding"]),
                    quant_group=group,
                )
            )
        except KeyError as exc:
            raise ModelFormatError(f"{path}: layer #{i} is missing field {exc}") from None
    return ModelGraph(
        name=doc.get("name", path.stem),
        layers=tuple(layers),
        bundle_template=doc.get("bundle_template"),
    )


def save_model(graph: ModelGraph, path: str | Path) -> None:
    doc = {
        "name": graph.name,
        "bundle_template": graph.bundle_template,
        "layers": [
            {
                "id": l.id,
                "kind": l.kind.value,
                "in": [l.input_h, l.input_w, l.in_channels],
                "out_channels": l.out_channels,
                "kernel": l.kernel,
                "stride": l.stride,
                "padding": l.padding,
                "quant_group": l.quant_group.value,
            }
            for l in graph.layers
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Weight binary files: magic "CFW1", u32 layer count, per-layer header
# (u32 id length, id bytes, u64 element count), then f32-LE payloads.
# ---------------------------------------------------------------------------

_MAGIC = b"CFW1"


def save_weights(weights: dict[str, WeightVector], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(weights)))
        order = list(weights)
        for layer_id in order:
            ident = layer_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<Q", weights[layer_id].dim))
        for layer_id in order:
            fh.write(np.ascontiguousarray(weights[layer_id].values, dtype="<f4").tobytes())


def load_weights(path: str | Path, graph: ModelGraph) -> dict[str, WeightVector]:
    """Read a weight file and validate every layer's element count against the
    graph (N*M*K^2 for conv, N*K^2 for dwconv, N*M for fc)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    offset = 4
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    headers: list[tuple[str, int]] = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        layer_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        (elems,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        headers.append((layer_id, elems))

    expected_ids = {l.id: l.weight_count for l in graph.weighted_layers}
    seen = {layer_id for layer_id, _ in headers}
    missing = sorted(set(expected_ids) - seen)
    extra = sorted(seen - set(expected_ids))
    if missing or extra:
        raise WeightFormatError(
            f"{path}: weight file does not match model {graph.name!r} "
            f"(missing layers {missing}, unknown layers {extra})"
        )

    payload = blob[offset:]
    total = sum(elems for _, elems in headers)
    if len(payload) != total * 4:
        raise WeightFormatError(
            f"{path}: payload holds {len(payload) // 4} f32 elements, header promises {total}"
        )
    out: dict[str, WeightVector] = {}
    cursor = 0
    for layer_id, elems in headers:
        expected = expected_ids[layer_id]
        if elems != expected:
            raise WeightFormatError(
                f"{path}: layer {layer_id!r} expected {expected}, got {elems}"
            )
        values = np.frombuffer(payload, dtype="<f4", count=elems, offset=cursor * 4)
        cursor += elems
        out[layer_id] = WeightVector(layer_id, values.copy())
    return out
