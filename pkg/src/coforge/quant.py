"""Weight and activation quantizers.

Three fixed-rule weight quantizers (binary, ternary, symmetric fixed-point)
plus the two-stage vector quantizer that first picks the integer direction
minimizing the angular error against the full-precision vector (steering) and
then rescales that direction with the closed-form least-squares modulus
(driving).  Activation statistics are tracked with an exponential moving
average of the mean absolute value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateVectorError, WeightFormatError
from .model_ir import WeightVector

#: Candidate grid used by the steering stage: log-spaced intervals covering
#: [0.01*sigma, 4*sigma] of the weight distribution.
STEER_GRID_POINTS = 200
STEER_GRID_LO = 0.01
STEER_GRID_HI = 4.0

#: Threshold multiplier for ternary quantization.
TERNARY_THRESHOLD = 0.7


@dataclass(frozen=True)
class QuantizedWeights:
    """Integer direction levels plus the reconstruction scale.

    Reconstruction is ``scale * levels``; for the vector quantizer the scale
    already folds in the steering interval, which is kept separately in
    ``interval`` for reporting and serialization.
    """

    layer_id: str
    levels: np.ndarray
    scale: float
    bits: int
    interval: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.levels, dtype=np.int32)
        arr.flags.writeable = False
        object.__setattr__(self, "levels", arr)
        limit = 1 if self.bits == 1 else 2 ** (self.bits - 1) - 1
        if arr.size and int(np.max(np.abs(arr))) > limit:
            raise ValueError(
                f"layer {self.layer_id!r}: levels exceed +/-{limit} for {self.bits} bits"
            )
        if self.bits == 1 and arr.size and not np.all(np.abs(arr) == 1):
            raise ValueError(f"layer {self.layer_id!r}: binary levels must be -1/+1")

    def reconstruct(self) -> np.ndarray:
        return self.scale * self.levels.astype(np.float64)


@dataclass(frozen=True)
class VectorLossReport:
    """Decomposition of the quantization error into an angular part and a
    scaled Euclidean residual; total = orientation + modulus by construction."""

    orientation: float
    modulus: float
    total: float
    cosine: float


@dataclass(frozen=True)
class ActStats:
    """Running activation-magnitude estimate (EMA of the batch mean |x|)."""

    layer_id: str
    p: float | None = None
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.p is not None and self.p <= 0.0:
            raise ValueError(f"distribution parameter must be positive, got {self.p}")


def _as_f64(w: WeightVector | np.ndarray) -> np.ndarray:
    values = w.values if isinstance(w, WeightVector) else np.asarray(w)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-D weight vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("weight vector contains non-finite values")
    return arr


def _layer_id(w: WeightVector | np.ndarray) -> str:
    return w.layer_id if isinstance(w, WeightVector) else ""


def _sign(values: np.ndarray) -> np.ndarray:
    """Two-valued sign with sign(0) = +1, for deterministic binarization."""
    return np.where(values >= 0.0, 1, -1).astype(np.int32)


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round half away from zero (numpy rounds half to even)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


# ---------------------------------------------------------------------------
# Fixed-rule quantizers
# ---------------------------------------------------------------------------

def quantize_binary(w: WeightVector | np.ndarray) -> QuantizedWeights:
    """Binarize to sign(w) scaled by the mean absolute weight."""
    values = _as_f64(w)
    scale = float(np.mean(np.abs(values)))
    return QuantizedWeights(_layer_id(w), _sign(values), scale, bits=1)


def quantize_ternary(w: WeightVector | np.ndarray) -> QuantizedWeights:
    """Ternarize with threshold 0.7*mean|w|; the scale is the mean magnitude
    of the surviving (above-threshold) weights."""
    values = _as_f64(w)
    magnitude = np.abs(values)
    threshold = TERNARY_THRESHOLD * float(np.mean(magnitude))
    keep = magnitude > threshold
    levels = np.where(keep, _sign(values), 0).astype(np.int32)
    scale = float(np.mean(magnitude[keep])) if np.any(keep) else 0.0
    return QuantizedWeights(_layer_id(w), levels, scale, bits=2)


def quantize_fixed(w: WeightVector | np.ndarray, bits: int) -> QuantizedWeights:
    """Symmetric uniform quantizer: scale = max|w| / (2^(bits-1)-1), levels
    rounded half away from zero and clamped to the symmetric integer range."""
    if not 3 <= bits <= 32:
        raise ValueError(f"fixed-point bits must lie in 3..32, got {bits}")
    values = _as_f64(w)
    limit = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return QuantizedWeights(_layer_id(w), np.zeros(values.size, dtype=np.int32), 0.0, bits)
    scale = peak / limit
    levels = np.clip(round_half_away(values / scale), -limit, limit).astype(np.int32)
    return QuantizedWeights(_layer_id(w), levels, scale, bits)


# ---------------------------------------------------------------------------
# Vector loss and the two-stage vector quantizer
# ---------------------------------------------------------------------------

def vector_loss(w_f: WeightVector | np.ndarray, w_q: np.ndarray, scale: float) -> VectorLossReport:
    """Angular + modulus decomposition of the error between w_f and scale*w_q.

    The angular part is 1 - cos(angle) between the two directions (invariant
    to any positive rescaling of either vector); the modulus part is the
    squared Euclidean distance to the rescaled quantized vector.
    """
    original = _as_f64(w_f)
    quantized = np.asarray(w_q, dtype=np.float64)
    if quantized.shape != original.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {quantized.shape}")
    scaled = scale * quantized
    norm_f = float(np.linalg.norm(original))
    norm_v = float(np.linalg.norm(scaled))
    if norm_f == 0.0 or norm_v == 0.0:
        raise DegenerateVectorError("orientation is undefined for zero-norm vectors")
    cosine = float(np.dot(scaled / norm_v, original / norm_f))
    orientation = 1.0 - cosine
    modulus = float(np.sum((original - scaled) ** 2))
    return VectorLossReport(orientation, modulus, orientation + modulus, cosine)


def _orientation_against(original: np.ndarray, levels: np.ndarray) -> float:
    """1 - cos(angle) between w and an integer direction (scale-free)."""
    norm_l = float(np.linalg.norm(levels))
    if norm_l == 0.0:
        return np.inf
    norm_f = float(np.linalg.norm(original))
    return 1.0 - float(np.dot(levels / norm_l, original / norm_f))


def steer_levels(values: np.ndarray, interval: float, bits: int) -> np.ndarray:
    """Integer direction for a given interval: round w/interval into the
    symmetric level range of the bitwidth."""
    limit = 2 ** (bits - 1) - 1
    return np.clip(round_half_away(values / interval), -limit, limit).astype(np.int32)


def steering_grid(values: np.ndarray, points: int = STEER_GRID_POINTS) -> np.ndarray:
    sigma = float(np.std(values))
    if sigma == 0.0:
        return np.empty(0)
    return np.geomspace(STEER_GRID_LO * sigma, STEER_GRID_HI * sigma, points)


def vecq_steer(w_f: WeightVector | np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Steering stage: search the interval grid for the integer direction with
    minimal angular error; ties resolve to the smallest interval.

    Degenerate all-equal vectors fall back to the sign direction with the mean
    magnitude as interval.
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"steering bits must lie in 2..8, got {bits}")
    values = _as_f64(w_f)
    if float(np.linalg.norm(values)) == 0.0:
        raise DegenerateVectorError("cannot steer a zero weight vector")
    grid = steering_grid(values)
    if grid.size == 0:
        return _sign(values), float(np.mean(np.abs(values)))
    best_interval = None
    best_loss = np.inf
    for interval in grid:
        loss = _orientation_against(values, steer_levels(values, interval, bits))
        if loss < best_loss:
            best_loss = loss
            best_interval = float(interval)
    if best_interval is None:
        # every candidate rounded to all-zero levels; keep the sign direction
        return _sign(values), float(np.mean(np.abs(values)))
    return steer_levels(values, best_interval, bits), best_interval


def vecq_drive(w_f: WeightVector | np.ndarray, levels: np.ndarray, interval: float) -> float:
    """Driving stage: closed-form least-squares scale for the fixed direction
    v = interval*levels, minimizing ||w - scale*v||^2."""
    values = _as_f64(w_f)
    direction = interval * np.asarray(levels, dtype=np.float64)
    denom = float(np.dot(direction, direction))
    if denom == 0.0:
        raise DegenerateVectorError("all-zero levels leave no direction to scale")
    return float(np.dot(values, direction)) / denom


def vecq_quantize(
    w: WeightVector | np.ndarray, bits: int
) -> tuple[QuantizedWeights, VectorLossReport]:
    """Two-stage vector quantization: steer the direction, then drive the
    modulus.  The stored scale is drive_scale*interval so that reconstruction
    stays scale*levels."""
    values = _as_f64(w)
    levels, interval = vecq_steer(values, bits)
    drive_scale = vecq_drive(values, levels, interval)
    combined = drive_scale * interval
    quantized = QuantizedWeights(_layer_id(w), levels, combined, bits, interval=interval)
    report = vector_loss(values, levels.astype(np.float64), combined)
    return quantized, report


# ---------------------------------------------------------------------------
# Activation statistics and activation quantization
# ---------------------------------------------------------------------------

def update_act_stats(stats: ActStats, batch_values: np.ndarray) -> ActStats:
    """EMA update of the distribution parameter with the batch mean |x|;
    the first batch initializes it directly."""
    batch = np.asarray(batch_values, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("cannot update activation statistics from an empty batch")
    stat = float(np.mean(np.abs(batch)))
    if stats.p is None:
        return replace(stats, p=stat)
    return replace(stats, p=stats.momentum * stats.p + (1.0 - stats.momentum) * stat)


def quantize_activations(values: np.ndarray, stats: ActStats, act_bits: int) -> np.ndarray:
    """Uniform unsigned quantization of values/p onto [0, 1] (inputs are
    clamped ReLU-style first), rescaled back by p."""
    if stats.p is None:
        raise ValueError(f"activation statistics for {stats.layer_id!r} are uninitialized")
    if not 1 <= act_bits <= 32:
        raise ValueError(f"activation bits must lie in 1..32, got {act_bits}")
    arr = np.asarray(values, dtype=np.float64)
    levels = float(2**act_bits - 1)
    unit = np.clip(arr / stats.p, 0.0, 1.0)
    return stats.p * round_half_away(unit * levels) / levels


# ---------------------------------------------------------------------------
# Quantized weight files: magic "CQW1", u32 layer count, per-layer header
# (u32 id length, id bytes, u64 element count, u32 bits, f64 scale,
# f64 interval), then int8 level payloads.
# ---------------------------------------------------------------------------

_QMAGIC = b"CQW1"


def save_quantized(quantized: dict[str, QuantizedWeights], path: str | Path) -> None:
    for q in quantized.values():
        if q.bits > 8:
            raise WeightFormatError(
                f"layer {q.layer_id!r}: {q.bits}-bit levels do not fit the int8 payload format"
            )
    with open(path, "wb") as fh:
        fh.write(_QMAGIC)
        fh.write(struct.pack("<I", len(quantized)))
        order = list(quantized)
        for layer_id in order:
            q = quantized[layer_id]
            ident = layer_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<QIdd", q.levels.size, q.bits, q.scale, q.interval))
        for layer_id in order:
            fh.write(quantized[layer_id].levels.astype(np.int8).tobytes())


def load_quantized(path: str | Path) -> dict[str, QuantizedWeights]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _QMAGIC:
        raise WeightFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_QMAGIC!r}")
    offset = 4
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    headers = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        layer_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        elems, bits, scale, interval = struct.unpack_from("<QIdd", blob, offset)
        offset += struct.calcsize("<QIdd")
        headers.append((layer_id, elems, bits, scale, interval))
    out = {}
    for layer_id, elems, bits, scale, interval in headers:
        levels = np.frombuffer(blob, dtype=np.int8, count=elems, offset=offset)
        offset += elems
        out[layer_id] = QuantizedWeights(layer_id, levels.astype(np.int32), scale, bits, interval)
    return out
