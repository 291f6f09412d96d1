"""Command-line surface: synth, train, evaluate, inspect-graph, gradcheck.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    RawSeries,
    load_dataset,
    prepare_datasets,
    save_adjacency_csv,
    save_dataset,
    synth_generate,
)
from .graph import build_adjacency, save_matrix_csv
from .metrics import evaluate, historical_average
from .model import AFDGCN, ModelConfig, config_to_dict
from .tensor import Tensor, TensorError, grad_check, no_grad, set_default_dtype, smooth_l1_loss
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    count_parameters,
    evaluate_split,
    load_checkpoint,
    save_checkpoint,
    train,
)
from . import figures


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


MARKER = "RUN_INCOMPLETE"

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
    return values


def _coerce(field, raw: str):
    t = field.type
    if t in ("int", int):
        return int(raw)
    if t in ("float", float):
        return float(raw)
    if t in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean {raw!r}")
    return raw


def resolve_configs(config_path, n_nodes: int, in_channels: int,
                    seed_override: int | None):
    """Materialize ModelConfig and TrainConfig from defaults plus a config
    file; dimensions inferred from the data must agree with explicit keys."""
    file_values = parse_config_file(config_path) if config_path else {}
    model_kwargs, train_kwargs = {}, {}
    for key, raw in file_values.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _coerce(_MODEL_FIELDS[key], raw)
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(_TRAIN_FIELDS[key], raw)
        else:
            raise UsageError(f"unknown config key: {key}")
    if "n_nodes" in model_kwargs and model_kwargs["n_nodes"] != n_nodes:
        raise DataError(
            f"config n_nodes={model_kwargs['n_nodes']} but the dataset has {n_nodes} nodes")
    if "in_channels" in model_kwargs and model_kwargs["in_channels"] != in_channels:
        raise DataError(
            f"config in_channels={model_kwargs['in_channels']} but the dataset has {in_channels}")
    model_kwargs["n_nodes"] = n_nodes
    model_kwargs["in_channels"] = in_channels
    mc = ModelConfig(**model_kwargs)
    tc = TrainConfig(**train_kwargs)
    if seed_override is not None:
        tc.seed = seed_override
    mc.validate()
    tc.validate()
    return mc, tc


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, mc: ModelConfig, tc: TrainConfig,
                   inputs: dict[str, str]) -> None:
    payload = {
        "tool_version": __version__,
        "command": command,
        "seed": tc.seed,
        "model_config": config_to_dict(mc),
        "train_config": {f.name: getattr(tc, f.name) for f in fields(TrainConfig)},
        "inputs": {name: _digest(p) for name, p in inputs.items()},
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series, _, edges = synth_generate(args.nodes, args.steps, args.seed)
    data_path = out / ("synth.csv" if args.layout == "csv" else "synth.bin")
    save_dataset(data_path, series, args.layout)
    adj_path = out / "synth_adj.csv"
    save_adjacency_csv(adj_path, edges)
    print(f"wrote {data_path} ({args.steps} steps x {args.nodes} nodes) and {adj_path}")
    return 0


def _load_inputs(data_path, adj_path):
    series = load_dataset(data_path)
    adjacency = None
    if adj_path:
        adjacency = build_adjacency(adj_path, series.n_nodes)
    return series, adjacency


def cmd_train(args) -> int:
    series, adjacency = _load_inputs(args.data, args.adj)
    mc, tc = resolve_configs(args.config, series.n_nodes, series.n_channels, args.seed)
    if mc.use_gat and adjacency is None:
        raise UsageError("model has use_gat=true but no --adj file was given")
    set_default_dtype(tc.precision)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / MARKER
    marker.write_text("training in progress or aborted\n")

    inputs = {"data": args.data}
    if args.adj:
        inputs["adjacency"] = args.adj
    write_manifest(out / "manifest.json", "train", mc, tc, inputs)

    datasets = prepare_datasets(series, mc.history, mc.horizon)
    model = AFDGCN(mc, adjacency=adjacency, seed=tc.seed)
    total, breakdown = count_parameters(model)
    print(f"parameters: {total}")
    for module, count in breakdown.items():
        print(f"  {module}: {count}")

    log = train(model, datasets, tc)
    log.to_csv(out / "train_log.csv")
    save_checkpoint(out / "model.ckpt", model)

    report = evaluate_split(model, datasets["test"], tc.mask_threshold)
    (out / "metrics_test.txt").write_text(report.to_text() + "\n")
    (out / "metrics_test.json").write_text(report.to_json() + "\n")
    figures.save_training_curves(log, out / "training_curves.png")
    figures.save_per_step_metrics(report, out / "metrics_per_step.png")

    print(f"best epoch {log.best_epoch}, val MAE {log.best_val_mae:.4f}")
    print("test metrics (original units):")
    print(report.to_text())
    marker.unlink()
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    series = load_dataset(args.data)
    if series.n_nodes != model.config.n_nodes:
        raise CheckpointError(
            f"checkpoint was built for {model.config.n_nodes} nodes, data has {series.n_nodes}")
    if series.n_channels != model.config.in_channels:
        raise CheckpointError(
            f"checkpoint expects {model.config.in_channels} channels, data has {series.n_channels}")
    datasets = prepare_datasets(series, model.config.history, model.config.horizon)
    test = datasets["test"]
    report = evaluate_split(model, test, args.mask_threshold)
    print("test metrics (original units):")
    print(report.to_text())

    ha_pred = historical_average(test.inputs_original(), model.config.horizon)
    ha_report = evaluate(ha_pred[:, :, :, :1], test.targets_original(), args.mask_threshold)
    print(f"historical-average baseline: MAE {ha_report.mae:.4f}, "
          f"RMSE {ha_report.rmse:.4f}, MAPE {ha_report.mape:.4f}%")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.to_text() + "\n")
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "metrics_ha.json").write_text(ha_report.to_json() + "\n")
        figures.save_per_step_metrics(report, out / "metrics_per_step.png")
        pred_norm = _stitched_first_step(model, test.inputs)
        pred = pred_norm * test.stats.std[0] + test.stats.mean[0]
        truth = test.targets_original()[:, 0, 0, 0]
        figures.save_forecast_sample(pred, truth, out / "forecast_sample.png",
                                     title="node 0, one-step-ahead")
    return 0


def _stitched_first_step(model: AFDGCN, inputs: np.ndarray, node: int = 0,
                         limit: int = 288) -> np.ndarray:
    take = min(limit, inputs.shape[0])
    from .training import predict
    return predict(model, inputs[:take])[:, 0, node, 0]


def cmd_inspect_graph(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    learned = model.learned_adjacency()
    save_matrix_csv(out / "adaptive_adjacency.csv", learned)
    figures.save_heatmap(learned, out / "adaptive_adjacency.png", "learned adjacency")
    predefined = model.graph.predefined_adjacency
    if predefined is not None:
        save_matrix_csv(out / "predefined_adjacency.csv", predefined)
        figures.save_heatmap(predefined, out / "predefined_adjacency.png", "pre-defined adjacency")
    else:
        print("checkpoint carries no pre-defined adjacency; wrote the learned one only")

    if args.nodes:
        if not args.data:
            raise UsageError("--nodes needs --data to export the series")
        try:
            i, j = (int(p) for p in args.nodes.split(","))
        except ValueError as e:
            raise UsageError("--nodes expects two comma-separated indices, e.g. 117,118") from e
        series = load_dataset(args.data)
        n = series.n_nodes
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"node pair ({i}, {j}) out of range for {n} nodes")
        pair = series.values[:, [i, j], 0]
        with open(out / "node_pair.csv", "w", newline="\n") as fh:
            fh.write(f"node_{i},node_{j}\n")
            for row in pair:
                fh.write(f"{row[0]:.17g},{row[1]:.17g}\n")
        figures.save_series_pair(pair[:, 0], pair[:, 1],
                                 (f"node {i}", f"node {j}"), out / "node_pair.png")
    print(f"graph exports written to {out}")
    return 0


GRADCHECK_PRESET = dict(n_nodes=4, history=4, horizon=4, hidden_dim=8,
                        n_heads=2, embed_dim=2, attention_dropout=0.0)


def cmd_gradcheck(args) -> int:
    overrides = parse_config_file(args.config) if args.config else {}
    kwargs = dict(GRADCHECK_PRESET)
    for key, raw in overrides.items():
        if key not in _MODEL_FIELDS:
            raise UsageError(f"unknown config key: {key}")
        kwargs[key] = _coerce(_MODEL_FIELDS[key], raw)
    mc = ModelConfig(**kwargs)
    mc.validate()

    rng = np.random.default_rng(args.seed)
    ring = np.zeros((mc.n_nodes, mc.n_nodes))
    for i in range(mc.n_nodes):
        ring[i, (i + 1) % mc.n_nodes] = 1.0
        ring[(i + 1) % mc.n_nodes, i] = 1.0
    model = AFDGCN(mc, adjacency=ring, seed=args.seed)
    x = Tensor(rng.standard_normal((2, mc.history, mc.n_nodes, mc.in_channels)))
    y = Tensor(rng.standard_normal((2, mc.horizon, mc.n_nodes, mc.out_channels)))

    def loss_fn(_unused):
        return smooth_l1_loss(model.forward(x), y)

    rows = []
    worst = 0.0
    for name, param in model.named_parameters():
        err = grad_check(loss_fn, param, h=args.h)
        worst = max(worst, err)
        rows.append((name, param.size, err))
    width = max(len(name) for name, _, _ in rows)
    print(f"{'parameter group':<{width}}  {'size':>7}  {'max rel err':>12}  result")
    for name, size, err in rows:
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{name:<{width}}  {size:>7}  {err:>12.3e}  {status}")
    print(f"worst group error: {worst:.3e} (threshold {args.threshold:g})")
    return 0 if worst < args.threshold else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="afdgcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--steps", type=int, default=2880)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--layout", choices=["csv", "flat-binary"], default="flat-binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write the run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--adj")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--mask-threshold", type=float, default=0.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-graph", help="export learned/pre-defined adjacency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", help="pair i,j to export their raw series")
    p.add_argument("--data")
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TensorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main_entry() -> None:
    sys.exit(main())
