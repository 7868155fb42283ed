"""Differentiable co-search over a micro-supernet.

Architecture choice (which candidate op per block) and implementation choice
(which bitwidth per op) are both relaxed with temperature-annealed
gumbel-softmax weights.  One training step mixes the candidate op outputs with
the architecture weights, mixes bitwidth-quantized copies of each op's weights
with the implementation weights, and descends a loss that multiplies task loss
by expected-latency loss and adds an exponential resource penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError
from .qat import SyntheticDataset, weight_quantizer

RESOURCE_TYPES = ("DSP", "LUT", "FF", "BRAM")


@dataclass(frozen=True)
class PerfEntry:
    """Latency and resource cost of one (op, bitwidth) implementation."""

    latency: float
    res: dict[str, float]

    def __post_init__(self):
        if self.latency <= 0:
            raise ValueError("per-op latency must be positive")


@dataclass(frozen=True)
class CandidateOp:
    """Bottleneck dense op: in -> hidden -> out with a chosen nonlinearity.
    ``perf`` maps each candidate bitwidth to its implementation cost."""

    name: str
    hidden: int
    activation: str = "relu"
    ratio: float = 1.0
    perf: dict[int, PerfEntry] = field(default_factory=dict)

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"op {self.name!r}: hidden width must be >= 1")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"op {self.name!r}: unknown activation {self.activation!r}")


@dataclass(frozen=True)
class BlockSpec:
    in_dim: int
    out_dim: int
    ops: tuple[CandidateOp, ...]
    bitwidths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "bitwidths", tuple(self.bitwidths))
        if len(self.ops) < 2:
            raise ValueError("a block needs at least two candidate ops")
        if not self.bitwidths:
            raise ValueError("a block needs at least one candidate bitwidth")


@dataclass
class SupernetSpec:
    """Blocks plus the positive sampling parameters for both choice levels."""

    blocks: tuple[BlockSpec, ...]
    theta: np.ndarray
    theta_bits: np.ndarray
    tau: float = 5.0

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if not self.blocks:
            raise ValueError("supernet needs at least one block")
        m = len(self.blocks[0].ops)
        q = len(self.blocks[0].bitwidths)
        for block in self.blocks:
            if len(block.ops) != m or len(block.bitwidths) != q:
                raise ValueError("all blocks must share the same op and bitwidth counts")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.theta_bits = np.asarray(self.theta_bits, dtype=np.float64)
        if self.theta.shape != (len(self.blocks), m):
            raise ValueError(f"theta shape {self.theta.shape} != {(len(self.blocks), m)}")
        if self.theta_bits.shape != (len(self.blocks), m, q):
            raise ValueError(
                f"theta_bits shape {self.theta_bits.shape} != {(len(self.blocks), m, q)}"
            )
        if np.any(self.theta <= 0) or np.any(self.theta_bits <= 0):
            raise ValueError("sampling parameters must be strictly positive")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        for i, block in enumerate(self.blocks):
            for op in block.ops:
                for bits in block.bitwidths:
                    if bits not in op.perf:
                        raise ValueError(
                            f"missing perf entry for block {i}, op {op.name!r}, {bits} bits"
                        )

    @classmethod
    def uniform(cls, blocks, tau: float = 5.0) -> "SupernetSpec":
        blocks = tuple(blocks)
        m = len(blocks[0].ops)
        q = len(blocks[0].bitwidths)
        return cls(blocks, np.ones((len(blocks), m)), np.ones((len(blocks), m, q)), tau)


@dataclass(frozen=True)
class GumbelSample:
    """Relaxed categorical draw: weights y, the gumbel noise behind them, and
    the temperature used."""

    y: ad.Tensor
    noise: np.ndarray
    tau: float


@dataclass(frozen=True)
class EddLossParams:
    beta: float = 0.1
    growth: float = math.e
    res_ub: dict[str, float] = field(default_factory=dict)
    perf_weight: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.perf_weight < 0:
            raise ValueError("beta and perf_weight must be non-negative")
        if self.growth <= 1.0:
            raise ValueError("penalty growth base must exceed 1")


# ---------------------------------------------------------------------------
# Gumbel-softmax relaxation
# ---------------------------------------------------------------------------

def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(theta, tau: float, noise: np.ndarray) -> ad.Tensor:
    """softmax((log theta + g) / tau) along the last axis; differentiable in
    theta."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    theta_t = theta if isinstance(theta, ad.Tensor) else ad.Tensor(theta)
    if np.any(theta_t.data <= 0):
        raise ValueError("gumbel-softmax needs strictly positive theta")
    logits = ad.scale(ad.add(ad.log(theta_t), ad.Tensor(np.asarray(noise, dtype=np.float64))), 1.0 / tau)
    return ad.softmax(logits)


def gumbel_sample(theta, tau: float, rng: np.random.Generator) -> GumbelSample:
    noise = sample_gumbel(rng, np.shape(theta.data if isinstance(theta, ad.Tensor) else theta))
    return GumbelSample(gumbel_softmax(theta, tau, noise), noise, tau)


# ---------------------------------------------------------------------------
# Expected performance under the relaxation
# ---------------------------------------------------------------------------

def perf_tables(net: SupernetSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """(N, M, Q) latency table and per-resource-type tables."""
    n = len(net.blocks)
    m = len(net.blocks[0].ops)
    q = len(net.blocks[0].bitwidths)
    lat = np.zeros((n, m, q))
    res = {r: np.zeros((n, m, q)) for r in RESOURCE_TYPES}
    for i, block in enumerate(net.blocks):
        for j, op in enumerate(block.ops):
            for k, bits in enumerate(block.bitwidths):
                entry = op.perf[bits]
                lat[i, j, k] = entry.latency
                for r, v in entry.res.items():
                    res[r.upper()][i, j, k] = v
    return lat, res


def _unwrap(sample) -> ad.Tensor:
    return sample.y if isinstance(sample, GumbelSample) else sample


def expected_perf(net: SupernetSpec, arch_sample, bits_sample):
    """Expected latency and per-type resource under both relaxations:
    sum_i sum_m y[i,m] * sum_q yq[i,m,q] * table[i,m,q].  Gradients flow to
    both sampling parameters."""
    y = _unwrap(arch_sample)
    yq = _unwrap(bits_sample)
    lat_table, res_tables = perf_tables(net)

    def mix(table: np.ndarray) -> ad.Tensor:
        per_op = ad.sum_(ad.mul(yq, ad.Tensor(table)), axis=2)
        return ad.sum_(ad.mul(y, per_op))

    latency = mix(lat_table)
    resource = {r: mix(table) for r, table in res_tables.items() if np.any(table)}
    return latency, resource


def edd_loss(acc_loss, perf_loss, res: dict, params: EddLossParams) -> ad.Tensor:
    """acc * perf + beta * sum_t growth^((res_t - ub_t) / ub_t).

    The exponent is normalized by the upper bound so resource counts in the
    hundreds cannot overflow the penalty; the penalty still crosses beta
    exactly at the budget boundary and grows exponentially past it.
    """
    total = ad.mul(acc_loss, perf_loss)
    log_growth = math.log(params.growth)
    for rtype, value in res.items():
        ub = params.res_ub.get(rtype)
        if ub is None or ub <= 0:
            raise ValueError(f"resource upper bound missing or zero for type {rtype!r}")
        value_t = value if isinstance(value, ad.Tensor) else ad.Tensor(np.asarray(value, dtype=np.float64))
        normalized = ad.scale(ad.add(value_t, np.asarray(-float(ub))), 1.0 / float(ub))
        total = ad.add(total, ad.scale(ad.exp(ad.scale(normalized, log_growth)), params.beta))
    return total


# ---------------------------------------------------------------------------
# Search loop
# ---------------------------------------------------------------------------

@dataclass
class EddResult:
    selection: list[tuple[str, int]]
    trace: list[tuple[int, float, float, float]]
    expected_latency: float
    expected_resource: dict[str, float]
    theta: np.ndarray
    theta_bits: np.ndarray


def _op_forward(h, op: CandidateOp, w1, w2, bitwidths, bits_weights, block_idx, op_idx):
    """One candidate op with its weights mixed across candidate bitwidths."""

    def mixed(w):
        if len(bitwidths) == 1 and bitwidths[0] >= 32:
            return w
        total = None
        for k, bits in enumerate(bitwidths):
            quantizer = weight_quantizer(bits)
            branch = w if quantizer is None else ad.ste_quantize(w, quantizer)
            term = ad.mul(ad.take(bits_weights, (block_idx, op_idx, k)), branch)
            total = term if total is None else ad.add(total, term)
        return total

    out = ad.matmul(h, mixed(w1))
    if op.activation == "relu":
        out = ad.relu(out)
    return ad.matmul(out, mixed(w2))


def selected_path_perf(net: SupernetSpec, selection) -> tuple[float, dict[str, float]]:
    """Exact latency/resource of a hard (op, bits) selection."""
    latency = 0.0
    resource: dict[str, float] = {}
    for block, (op_name, bits) in zip(net.blocks, selection):
        op = next(o for o in block.ops if o.name == op_name)
        entry = op.perf[bits]
        latency += entry.latency
        for r, v in entry.res.items():
            resource[r.upper()] = resource.get(r.upper(), 0.0) + v
    return latency, resource


def edd_search(
    net: SupernetSpec,
    data: SyntheticDataset,
    params: EddLossParams,
    steps: int,
    seed: int = 0,
    batch_size: int = 32,
    lr_weights: float = 0.1,
    lr_arch: float = 0.25,
    tau_start: float = 5.0,
    tau_end: float = 0.5,
    freeze: list[tuple[int, int]] | None = None,
    init_weights: dict | None = None,
    batch_indices=None,
) -> EddResult:
    """Train sampling parameters and op weights together.

    ``freeze`` pins a hard (op index, bits index) per block, turning the loop
    into plain training of that path; ``init_weights``/``batch_indices`` let
    harnesses pin the starting point and data order.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    root = np.random.default_rng(seed)
    w_rng, data_rng, noise_rng = root.spawn(3)

    rho = ad.Tensor(np.log(net.theta), requires_grad=freeze is None)
    rho_bits = ad.Tensor(np.log(net.theta_bits), requires_grad=freeze is None)
    weights: dict[tuple[int, int, str], ad.Tensor] = {}
    for i, block in enumerate(net.blocks):
        for j, op in enumerate(block.ops):
            if init_weights is not None:
                w1 = np.array(init_weights[(i, j, "w1")], dtype=np.float64)
                w2 = np.array(init_weights[(i, j, "w2")], dtype=np.float64)
            else:
                w1 = np.sqrt(2.0 / block.in_dim) * w_rng.standard_normal((block.in_dim, op.hidden))
                w2 = np.sqrt(2.0 / op.hidden) * w_rng.standard_normal((op.hidden, block.out_dim))
            weights[(i, j, "w1")] = ad.Tensor(w1, requires_grad=True)
            weights[(i, j, "w2")] = ad.Tensor(w2, requires_grad=True)

    lat_table, _ = perf_tables(net)
    lat_ref = float(np.mean(lat_table, axis=(1, 2)).sum())  # uniform-sampling expectation

    n_blocks = len(net.blocks)
    m_ops = len(net.blocks[0].ops)
    q_bits = len(net.blocks[0].bitwidths)

    def one_hot_samples():
        y = np.zeros((n_blocks, m_ops))
        yq = np.zeros((n_blocks, m_ops, q_bits))
        for i, (op_idx, bits_idx) in enumerate(freeze):
            y[i, op_idx] = 1.0
            yq[i, op_idx, bits_idx] = 1.0
        return ad.Tensor(y), ad.Tensor(yq)

    trace: list[tuple[int, float, float, float]] = []
    for step in range(steps):
        if steps > 1:
            tau = tau_start + (tau_end - tau_start) * step / (steps - 1)
        else:
            tau = tau_end
        if freeze is not None:
            y_arch, y_bits = one_hot_samples()
        else:
            y_arch = gumbel_softmax(ad.exp(rho), tau, sample_gumbel(noise_rng, rho.data.shape))
            y_bits = gumbel_softmax(ad.exp(rho_bits), tau, sample_gumbel(noise_rng, rho_bits.data.shape))

        if batch_indices is not None:
            idx = np.asarray(batch_indices(step))
        else:
            idx = data_rng.integers(0, data.size, size=min(batch_size, data.size))
        h = ad.Tensor(data.xs[idx])
        for i, block in enumerate(net.blocks):
            mixed_out = None
            for j, op in enumerate(block.ops):
                if freeze is not None and freeze[i][0] != j:
                    continue
                out = _op_forward(
                    h, op, weights[(i, j, "w1")], weights[(i, j, "w2")],
                    block.bitwidths, y_bits, i, j,
                )
                if freeze is None:
                    out = ad.mul(ad.take(y_arch, (i, j)), out)
                mixed_out = out if mixed_out is None else ad.add(mixed_out, out)
            h = mixed_out
        acc_loss = ad.cross_entropy(h, data.labels[idx])

        e_lat, res = expected_perf(net, y_arch, y_bits)
        if params.perf_weight > 0:
            perf_loss = ad.exp(
                ad.scale(ad.add(ad.log(e_lat), np.asarray(-math.log(lat_ref))), params.perf_weight)
            )
        else:
            perf_loss = ad.Tensor(np.asarray(1.0))
        res_for_loss = {r: v for r, v in res.items() if r in params.res_ub}
        loss = edd_loss(acc_loss, perf_loss, res_for_loss, params) if params.beta > 0 else ad.mul(acc_loss, perf_loss)

        loss_value = float(loss.data)
        if not np.isfinite(loss_value) or loss_value > 1e6:
            raise DivergenceError(f"co-search diverged at step {step}: loss={loss_value:.3e}")
        ad.backward(loss)

        for tensor in weights.values():
            if tensor.grad is not None:
                tensor.data = tensor.data - lr_weights * tensor.grad
            tensor.zero_grad()
        if freeze is None:
            rho.data = rho.data - lr_arch * rho.grad
            rho_bits.data = rho_bits.data - lr_arch * rho_bits.grad
            rho.zero_grad()
            rho_bits.zero_grad()

        batch_accuracy = float(np.mean(np.argmax(h.data, axis=1) == data.labels[idx]))
        trace.append((step, loss_value, float(e_lat.data), batch_accuracy))

    theta_final = np.exp(rho.data)
    theta_bits_final = np.exp(rho_bits.data)
    if freeze is not None:
        selection = [
            (net.blocks[i].ops[op_idx].name, net.blocks[i].bitwidths[bits_idx])
            for i, (op_idx, bits_idx) in enumerate(freeze)
        ]
    else:
        selection = []
        for i, block in enumerate(net.blocks):
            op_idx = int(np.argmax(theta_final[i]))
            bits_idx = int(np.argmax(theta_bits_final[i, op_idx]))
            selection.append((block.ops[op_idx].name, block.bitwidths[bits_idx]))
    latency, resource = selected_path_perf(net, selection)
    return EddResult(selection, trace, latency, resource, theta_final, theta_bits_final)


# ---------------------------------------------------------------------------
# Performance-table presets
# ---------------------------------------------------------------------------

def make_perf_entries(
    in_dim: int, hidden: int, out_dim: int, bitwidths, preset: str = "pipelined"
) -> dict[int, PerfEntry]:
    """Two table presets: a dedicated-engine style (more resources, lower
    latency) and a shared-engine style (fewer resources, higher latency).
    Latency and resources scale with op size and bitwidth."""
    macs = in_dim * hidden + hidden * out_dim
    if preset == "pipelined":
        parallel, dsp_per_lane, lut_scale = 16.0, 1.0, 180.0
    elif preset == "folded":
        parallel, dsp_per_lane, lut_scale = 4.0, 0.25, 60.0
    else:
        raise ValueError(f"unknown performance preset {preset!r}")
    entries = {}
    for bits in bitwidths:
        bytes_per = max(1, math.ceil(bits / 8))
        entries[bits] = PerfEntry(
            latency=macs * bytes_per / parallel,
            res={
                "DSP": max(1.0, dsp_per_lane * hidden * bytes_per),
                "LUT": lut_scale * hidden * bytes_per,
                "FF": 0.5 * lut_scale * hidden * bytes_per,
                "BRAM": max(1.0, hidden * bytes_per / 8.0),
            },
        )
    return entries
