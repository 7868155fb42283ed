"""Command-line entry point.

Every subcommand writes its outputs plus a run manifest (inputs, seed,
version, content digest) into the --out directory; outputs are plain JSON and
CSV and are byte-identical across reruns with the same inputs and seed.

Exit codes: 0 success, 1 input error, 2 infeasible design, 3 divergence.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .accel import bundle_latency, comp_latency, dnn_latency, dnn_resource, layer_data_bytes, load_hw_config
from .dse import (
    CandidateConfig,
    DnnTemplate,
    Evaluator,
    GopsOracle,
    SearchConstraints,
    build_initial_dnns,
    pareto_filter,
    scd_search,
)
from .edd import (
    BlockSpec,
    CandidateOp,
    EddLossParams,
    PerfEntry,
    SupernetSpec,
    edd_search,
    make_perf_entries,
)
from .errors import (
    CoforgeError,
    DivergenceError,
    InfeasibleDesignError,
    ModelFormatError,
)
from .model_ir import QuantScheme, load_model, load_weights, parse_scheme, save_weights, WeightVector
from .pipeline import column_cache_plan, conventional_startup, finegrained_startup, stages_from_graph, steady_throughput
from .qat import TrainConfig, make_dataset, train
from .quant import (
    quantize_binary,
    quantize_fixed,
    quantize_ternary,
    save_quantized,
    vector_loss,
    vecq_quantize,
)

EXIT_INPUT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3

logger = logging.getLogger("coforge")


def _setup_logging() -> None:
    level = os.environ.get("COFORGE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_manifest(out: Path, subcommand: str, inputs: dict[str, str], seed: int, args: dict) -> None:
    digest = hashlib.sha256()
    for name in sorted(inputs):
        digest.update(name.encode())
        digest.update(Path(inputs[name]).read_bytes())
    digest.update(json.dumps(args, sort_keys=True).encode())
    write_json(
        out / "manifest.json",
        {
            "subcommand": subcommand,
            "inputs": inputs,
            "seed": seed,
            "out_dir": str(out),
            "tool_version": __version__,
            "config_digest": digest.hexdigest(),
        },
    )


def _out_dir(ctx) -> Path:
    out = Path(ctx.obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(code: int = 0):
    sys.exit(code)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map toolkit exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DivergenceError as exc:
            _fail(EXIT_DIVERGED, str(exc))
        except InfeasibleDesignError as exc:
            _fail(EXIT_INFEASIBLE, str(exc))
        except FileNotFoundError as exc:
            _fail(EXIT_INPUT_ERROR, f"missing input file: {exc.filename}")
        except (CoforgeError, ValueError, json.JSONDecodeError) as exc:
            _fail(EXIT_INPUT_ERROR, str(exc))

    wrapper.__name__ = fn.__name__
    return wrapper


@click.group()
@click.option("--seed", default=0, show_default=True, help="RNG seed for every stochastic step.")
@click.option("--out", default="out", show_default=True, help="Output directory.")
@click.option("--jobs", default=1, show_default=True, help="Worker threads for seed sweeps.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
@click.pass_context
def cli(ctx, seed, out, jobs, fmt):
    """DNN/accelerator co-design toolkit."""
    _setup_logging()
    if jobs < 1:
        _fail(EXIT_INPUT_ERROR, "--jobs must be >= 1")
    ctx.obj = {"seed": seed, "out": out, "jobs": jobs, "format": fmt}


def _quantize_layer(layer_id, values, bits):
    if bits == 1:
        return quantize_binary(values)
    if bits == 2:
        return quantize_ternary(values)
    if bits >= 32:
        raise ModelFormatError(
            f"layer {layer_id!r}: 32-bit passthrough has nothing to quantize"
        )
    return quantize_fixed(values, bits)


@cli.command()
@click.argument("model_path", type=click.Path())
@click.argument("weights_path", type=click.Path())
@click.option("--scheme", "scheme_name", default=None, help="Hybrid scheme name, e.g. net-8-8218.")
@click.option("--vecq", "vecq_bits", type=int, default=None, help="Vector-quantize all layers at this bitwidth.")
@click.pass_context
@_guarded
def quantize(ctx, model_path, weights_path, scheme_name, vecq_bits):
    """Quantize a weight file per scheme or with the vector quantizer."""
    if (scheme_name is None) == (vecq_bits is None):
        _fail(EXIT_INPUT_ERROR, "choose exactly one of --scheme or --vecq")
    out = _out_dir(ctx)
    graph = load_model(model_path)
    weights = load_weights(weights_path, graph)
    scheme = parse_scheme(scheme_name) if scheme_name else None

    quantized = {}
    rows = []
    for layer in graph.weighted_layers:
        vec = weights[layer.id]
        if vecq_bits is not None:
            q, report = vecq_quantize(vec, vecq_bits)
        else:
            bits = scheme.bits_for(layer.quant_group)
            q = _quantize_layer(layer.id, vec, bits)
            report = vector_loss(vec, q.levels.astype(np.float64), q.scale)
        quantized[layer.id] = q
        rows.append(
            (layer.id, q.bits, report.orientation, report.modulus, report.total,
             q.scale, q.interval)
        )
    save_quantized(quantized, out / "quantized.cqw")
    write_csv(
        out / "vector_loss.csv",
        ["layer", "bits", "loss_orientation", "loss_modulus", "loss_vector", "scale", "interval"],
        rows,
    )
    write_manifest(
        out, "quantize", {"model": model_path, "weights": weights_path}, ctx.obj["seed"],
        {"scheme": scheme_name, "vecq": vecq_bits},
    )
    _finish(0)


@cli.command()
@click.argument("model_path", type=click.Path())
@click.argument("hw_path", type=click.Path())
@click.option("--scheme", "scheme_name", required=True, help="Hybrid scheme name.")
@click.pass_context
@_guarded
def estimate(ctx, model_path, hw_path, scheme_name):
    """Analytical latency/resource report for a model on a hardware config."""
    out = _out_dir(ctx)
    graph = load_model(model_path)
    hw, bundle, cal = load_hw_config(hw_path)
    scheme = parse_scheme(scheme_name)

    latency = dnn_latency(graph, bundle, hw, cal, scheme)
    resource = dnn_resource(bundle, cal, hw)
    per_layer = [
        {
            "id": layer.id,
            "kind": layer.kind.value,
            "comp_cycles": float(comp_latency(layer, bundle)),
            "data_bytes": layer_data_bytes(layer, scheme),
            "latency_cycles": float(bundle_latency(layer, bundle, hw, scheme)),
        }
        for layer in graph.layers
    ]
    report = {
        "model": graph.name,
        "scheme": scheme_name,
        "latency": {
            "cycles": float(latency.cycles),
            "milliseconds": float(latency.milliseconds),
            "per_repetition": [float(c) for c in latency.per_repetition],
        },
        "resource": {
            "counts": {r: float(v) for r, v in sorted(resource.counts.items())},
            "utilization": {r: float(v) for r, v in sorted(resource.utilization.items())},
            "feasible": resource.feasible,
        },
        "per_layer": per_layer,
    }
    write_json(out / "estimate.json", report)
    if ctx.obj["format"] == "csv":
        write_csv(
            out / "estimate.csv",
            ["layer", "kind", "comp_cycles", "data_bytes", "latency_cycles"],
            [(e["id"], e["kind"], e["comp_cycles"], e["data_bytes"], e["latency_cycles"]) for e in per_layer],
        )
    write_manifest(
        out, "estimate", {"model": model_path, "hw": hw_path}, ctx.obj["seed"],
        {"scheme": scheme_name, "format": ctx.obj["format"]},
    )
    if not resource.feasible:
        _fail(EXIT_INFEASIBLE, f"design exceeds the budget: utilization {resource.utilization}")
    _finish(0)


@cli.command()
@click.argument("model_path", type=click.Path())
@click.argument("hw_path", type=click.Path())
@click.option("--scheme", "scheme_name", required=True)
@click.option("--compare", is_flag=True, help="Include conventional-vs-finegrained comparison.")
@click.pass_context
@_guarded
def schedule(ctx, model_path, hw_path, scheme_name, compare):
    """Pipeline startup table and column cache plans."""
    out = _out_dir(ctx)
    graph = load_model(model_path)
    hw, bundle, cal = load_hw_config(hw_path)
    scheme = parse_scheme(scheme_name)

    stages = stages_from_graph(graph, bundle, hw, scheme)
    stage_rows = [
        (s.layer_id, s.frame_latency, s.rows_per_frame, s.kernel, s.stride,
         s.frame_latency * s.two_column_fraction)
        for s in stages
    ]
    plans = [
        column_cache_plan(layer, scheme.act_bits)
        for layer in graph.layers
        if layer.kind.value in ("conv", "dwconv", "pool")
    ]
    report = {
        "model": graph.name,
        "stages": [
            {
                "layer": s.layer_id,
                "frame_latency_cycles": float(s.frame_latency),
                "rows_per_frame": s.rows_per_frame,
                "handoff_cycles": float(s.frame_latency * s.two_column_fraction),
            }
            for s in stages
        ],
        "cache_plans": [
            {
                "layer": p.layer_id,
                "slice_rows": p.slice_rows,
                "columns_cached": p.columns_cached,
                "buffer_rows": p.buffer_rows,
                "buffer_bytes": p.buffer_bytes,
                "full_frame_bytes": p.full_frame_bytes,
                "reduction_ratio": float(p.reduction_ratio),
            }
            for p in plans
        ],
        "steady_frames_per_kilocycle": float(steady_throughput(stages)),
    }
    if compare:
        conventional = conventional_startup(stages)
        fine = finegrained_startup(stages)
        report["startup"] = {
            "conventional_cycles": float(conventional),
            "finegrained_cycles": float(fine),
            "ratio": float(conventional / fine),
        }
    write_json(out / "schedule.json", report)
    write_csv(
        out / "schedule.csv",
        ["layer", "frame_latency_cycles", "rows_per_frame", "kernel", "stride", "handoff_cycles"],
        stage_rows,
    )
    write_manifest(
        out, "schedule", {"model": model_path, "hw": hw_path}, ctx.obj["seed"],
        {"scheme": scheme_name, "compare": compare},
    )
    _finish(0)


def _config_to_json(config: CandidateConfig) -> dict:
    return {
        "bundle": config.bundle_id,
        "replications": config.replications,
        "downsample_at": list(config.downsample_at),
        "expansion": [float(e) for e in config.expansion],
    }


def _run_scd_for_seed(seed, space, evaluator, constraints, oracle):
    population = build_initial_dnns(
        evaluator, constraints, k=space.get("k", 8), oracle=oracle, seed=seed,
        max_reps=space.get("max_reps", 6),
    )
    if not population.points:
        raise InfeasibleDesignError(population.diagnostic)
    return population, scd_search(
        population.points, oracle, constraints, space.get("iters", 300), evaluator, seed=seed
    )


@cli.command("search-scd")
@click.argument("space_path", type=click.Path())
@click.argument("hw_path", type=click.Path())
@click.option("--seeds", default=None, help="Comma-separated seed sweep (default: the global --seed).")
@click.pass_context
@_guarded
def search_scd(ctx, space_path, hw_path, seeds):
    """Stochastic coordinate descent over the bundle shape space."""
    out = _out_dir(ctx)
    space = json.loads(Path(space_path).read_text())
    hw, bundle, cal = load_hw_config(hw_path)
    template_doc = space.get("template", {})
    h, w, c = template_doc.get("input", [32, 32, 3])
    template = DnnTemplate(
        input_h=h, input_w=w, input_c=c,
        base_channels=template_doc.get("base_channels", 16),
        num_classes=template_doc.get("num_classes", 10),
    )
    scheme = parse_scheme(space["scheme"]) if "scheme" in space else QuantScheme(8, 8, 8, 8, 8)
    evaluator = Evaluator(template, bundle, hw, cal, scheme)
    constraints = SearchConstraints(float(space["latency_target_cycles"]), hw)
    oracle = GopsOracle(evaluator, float(space.get("oracle", {}).get("tau_gops", 0.01)))

    seed_list = [int(s) for s in seeds.split(",")] if seeds else [ctx.obj["seed"]]
    runner = lambda seed: _run_scd_for_seed(seed, space, evaluator, constraints, oracle)
    if ctx.obj["jobs"] > 1 and len(seed_list) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=ctx.obj["jobs"]) as pool:
            outcomes = list(pool.map(runner, seed_list))
    else:
        outcomes = [runner(seed) for seed in seed_list]

    best_seed, (population, result) = max(
        zip(seed_list, outcomes), key=lambda pair: pair[1][1].best.accuracy
    )
    front = pareto_filter(population.points + [result.best])
    write_json(
        out / "result.json",
        {
            "best_config": _config_to_json(result.best.config),
            "accuracy": float(result.best.accuracy),
            "latency_cycles": float(result.best.latency),
            "resource": {r: float(v) for r, v in sorted(result.best.resource.items())},
            "seed": best_seed,
            "seeds_swept": seed_list,
            "trace": [
                {
                    "iteration": row.iteration,
                    "coordinate": row.coordinate,
                    "accepted": row.accepted,
                    "accuracy": float(row.accuracy),
                    "latency_cycles": float(row.latency),
                }
                for row in result.trace
            ],
        },
    )
    write_csv(
        out / "trace.csv",
        ["iteration", "coordinate", "accepted", "accuracy", "latency_cycles"],
        [(r.iteration, r.coordinate, int(r.accepted), r.accuracy, r.latency) for r in result.trace],
    )
    write_csv(
        out / "pareto_points.csv",
        ["latency_cycles", "accuracy"],
        [(p.latency, p.accuracy) for p in population.points + [result.best]],
    )
    write_csv(
        out / "pareto_front.csv",
        ["latency_cycles", "accuracy"],
        [(p.latency, p.accuracy) for p in front],
    )
    write_manifest(
        out, "search-scd", {"space": space_path, "hw": hw_path}, ctx.obj["seed"],
        {"seeds": seed_list},
    )
    _finish(0)


def _parse_edd_config(doc: dict) -> tuple[SupernetSpec, EddLossParams, dict]:
    blocks = []
    for block_doc in doc["blocks"]:
        bitwidths = tuple(int(b) for b in block_doc["bitwidths"])
        ops = []
        for op_doc in block_doc["ops"]:
            if "perf" in op_doc:
                perf = {
                    int(bits): PerfEntry(float(entry["latency"]), {k.upper(): float(v) for k, v in entry.get("res", {}).items()})
                    for bits, entry in op_doc["perf"].items()
                }
            else:
                perf = make_perf_entries(
                    block_doc["in_dim"], op_doc["hidden"], block_doc["out_dim"],
                    bitwidths, doc.get("preset", "pipelined"),
                )
            ops.append(
                CandidateOp(
                    op_doc["name"], int(op_doc["hidden"]),
                    op_doc.get("activation", "relu"),
                    float(op_doc.get("ratio", 1.0)), perf,
                )
            )
        blocks.append(BlockSpec(int(block_doc["in_dim"]), int(block_doc["out_dim"]), tuple(ops), bitwidths))
    loss_doc = doc.get("loss", {})
    params = EddLossParams(
        beta=float(loss_doc.get("beta", 0.1)),
        growth=float(loss_doc.get("growth", np.e)),
        res_ub={k.upper(): float(v) for k, v in loss_doc.get("res_ub", {}).items()},
        perf_weight=float(loss_doc.get("perf_weight", 1.0)),
    )
    return SupernetSpec.uniform(tuple(blocks), tau=float(doc.get("tau", {}).get("start", 5.0))), params, doc


@cli.command("search-edd")
@click.argument("config_path", type=click.Path())
@click.option("--seeds", default=None, help="Comma-separated seed sweep (default: the global --seed).")
@click.pass_context
@_guarded
def search_edd(ctx, config_path, seeds):
    """Differentiable co-search over the micro-supernet."""
    out = _out_dir(ctx)
    doc = json.loads(Path(config_path).read_text())
    net, params, doc = _parse_edd_config(doc)
    data_doc = doc.get("dataset", {})

    def runner(seed):
        data = make_dataset(
            data_doc.get("kind", "gaussian_blobs"),
            int(data_doc.get("n", 256)),
            seed,
            classes=int(data_doc.get("classes", net.blocks[-1].out_dim)),
            noise=float(data_doc.get("noise", 0.5)),
        )
        return edd_search(
            net, data, params,
            steps=int(doc.get("steps", 300)),
            seed=seed,
            batch_size=int(doc.get("batch_size", 32)),
            lr_weights=float(doc.get("lr", {}).get("weights", 0.1)),
            lr_arch=float(doc.get("lr", {}).get("arch", 0.25)),
            tau_start=float(doc.get("tau", {}).get("start", 5.0)),
            tau_end=float(doc.get("tau", {}).get("end", 0.5)),
        )

    seed_list = [int(s) for s in seeds.split(",")] if seeds else [ctx.obj["seed"]]
    if ctx.obj["jobs"] > 1 and len(seed_list) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=ctx.obj["jobs"]) as pool:
            results = list(pool.map(runner, seed_list))
    else:
        results = [runner(seed) for seed in seed_list]

    best_seed, result = min(zip(seed_list, results), key=lambda pair: pair[1].trace[-1][1])
    write_json(
        out / "result.json",
        {
            "selection": [{"op": op, "bits": bits} for op, bits in result.selection],
            "expected_latency_cycles": float(result.expected_latency),
            "expected_resource": {r: float(v) for r, v in sorted(result.expected_resource.items())},
            "final_loss": float(result.trace[-1][1]),
            "seed": best_seed,
            "seeds_swept": seed_list,
        },
    )
    write_csv(
        out / "trace.csv",
        ["step", "loss", "expected_latency_cycles", "batch_accuracy"],
        [(step, loss, elat, acc) for step, loss, elat, acc in result.trace],
    )
    write_manifest(out, "search-edd", {"config": config_path}, ctx.obj["seed"], {"seeds": seed_list})
    _finish(0)


@cli.command("train-qat")
@click.argument("model_path", type=click.Path())
@click.option("--scheme", "scheme_name", required=True)
@click.option("--dataset", "dataset_kind", default="gaussian_blobs", show_default=True)
@click.option("--n", default=256, show_default=True)
@click.option("--classes", default=2, show_default=True)
@click.option("--noise", default=0.5, show_default=True)
@click.option("--steps", default=500, show_default=True)
@click.option("--lr", default=0.1, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--save-weights", "save_weights_flag", is_flag=True, help="Write trained weights as a weight file.")
@click.pass_context
@_guarded
def train_qat(ctx, model_path, scheme_name, dataset_kind, n, classes, noise, steps, lr, batch_size, save_weights_flag):
    """Quantization-aware training of an fc stack on a synthetic task."""
    out = _out_dir(ctx)
    graph = load_model(model_path)
    scheme = parse_scheme(scheme_name)
    data = make_dataset(dataset_kind, n, ctx.obj["seed"], classes=classes, noise=noise)
    cfg = TrainConfig(scheme=scheme, steps=steps, learning_rate=lr, batch_size=batch_size, seed=ctx.obj["seed"])
    result = train(graph, data, cfg)
    write_csv(out / "history.csv", ["step", "loss", "accuracy"], result.history)
    write_json(
        out / "result.json",
        {
            "model": graph.name,
            "scheme": scheme_name,
            "steps": steps,
            "final_accuracy": float(result.history[-1][2]) if result.history else None,
            "final_loss": float(result.history[-1][1]) if result.history else None,
        },
    )
    if save_weights_flag:
        vectors = {
            lid: WeightVector(lid, arr.astype(np.float32).ravel())
            for lid, arr in result.weights.items()
        }
        save_weights(vectors, out / "weights.cfw")
    write_manifest(
        out, "train-qat", {"model": model_path}, ctx.obj["seed"],
        {
            "scheme": scheme_name, "dataset": dataset_kind, "n": n, "classes": classes,
            "noise": noise, "steps": steps, "lr": lr, "batch_size": batch_size,
        },
    )
    _finish(0)


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
