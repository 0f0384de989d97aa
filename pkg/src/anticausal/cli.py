"""Command-line entry point wiring the toolkit into reproducible runs.

One executable with subcommands: generate synthetic data, train a model,
invert outcomes into cause estimates, score estimates, transfer a trained
model to a new task, run a seeded experiment plan, and export the learned
graph. Configuration lives in a JSON file of flat dotted keys; every key is
also a flag (flags win), and the fully resolved configuration is echoed
into the output directory so any run can be replayed from its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import figures
from .data_io import (
    discover_task_files,
    export_graph,
    fit_apply_normalizer,
    load_checkpoint,
    load_dataset,
    read_manifest,
    save_checkpoint,
    split_dataset,
    write_synthetic_dataset,
)
from .errors import AnticausalError, IngestionError, InvalidSpecError
from .evalsuite import (
    copy_shared,
    edge_scores,
    learned_edge_set,
    plan_from_dict,
    reconstruction_error,
    run_experiment,
    subset_tasks,
    true_edge_set,
)
from .graph import make_spec
from .map_infer import MapConfig, map_estimate_batch
from .oracle import ground_truth_from_dict, make_ground_truth, sample_dataset
from .sem import build_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

# dotted configuration keys: name -> (type tag, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "graph.n_tasks": ("int", 3),
    "graph.n_confounders": ("int", 8),
    "graph.n_mechanisms": ("int", 5),
    "model.hidden": ("int", 64),
    "model.embed": ("int", 16),
    "split.fraction": ("float", 0.8),
    "gen.n_per_task": ("str", "2000"),
    "gen.parents_per_node": ("int", 3),
    "gen.noise": ("float", 0.5),
    "gen.link": ("str", "linear"),
    "train.w": ("float", 10.0),
    "train.epochs": ("int", 300),
    "train.batch_size": ("int", 64),
    "train.step_size": ("float", 1e-3),
    "train.patience": ("int", 30),
    "train.val_fraction": ("float", 0.2),
    "train.observe_x": ("bool", False),
    "train.sparsity": ("float", 0.0),
    "train.freeze": ("str", ""),
    "map.step_size": ("float", 1e-2),
    "map.max_iters": ("int", 2000),
    "map.tol": ("float", 1e-6),
    "map.method": ("str", "adam"),
}


class UsageError(Exception):
    """Bad invocation: unknown keys, malformed values, missing files."""


def _cast(key: str, value) -> object:
    kind = SCHEMA[key][0]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes"):
                return True
            if text in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false, got {value!r}")
        return str(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad value for {key}: {e}")


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Defaults, then config-file values, then flag overrides."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {config_path}: {e}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {config_path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must hold an object")
        unknown = sorted(set(loaded) - set(SCHEMA))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        for key, value in loaded.items():
            resolved[key] = _cast(key, value)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = _cast(key, value)
    return resolved


def _echo_config(out_dir: str, command: str, cfg: dict, seed: int) -> str:
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "seed": seed, "config": cfg}
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _config_digest(cfg: dict, seed: int) -> str:
    canon = json.dumps({"config": cfg, "seed": seed}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _counts(text: str, n_tasks: int) -> list[int]:
    try:
        parts = [int(p) for p in str(text).split(",") if p.strip() != ""]
    except ValueError:
        raise UsageError(f"gen.n_per_task must be comma-separated ints, "
                         f"got {text!r}")
    if not parts:
        raise UsageError("gen.n_per_task is empty")
    if len(parts) == 1:
        return parts * n_tasks
    if len(parts) != n_tasks:
        raise UsageError(
            f"gen.n_per_task needs 1 or {n_tasks} entries, got {len(parts)}")
    return parts


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    freeze = tuple(p for p in cfg["train.freeze"].split(",") if p.strip())
    return TrainConfig(
        w=cfg["train.w"], epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"], step_size=cfg["train.step_size"],
        seed=seed, patience=cfg["train.patience"],
        val_fraction=cfg["train.val_fraction"],
        observe_x=cfg["train.observe_x"], sparsity=cfg["train.sparsity"],
        freeze=freeze)


def _map_config(cfg: dict) -> MapConfig:
    return MapConfig(step_size=cfg["map.step_size"],
                     max_iters=cfg["map.max_iters"], tol=cfg["map.tol"],
                     method=cfg["map.method"])


def _out_dir_of(path: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _write_csv(path: str, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


def _stem(path: str) -> str:
    base = os.path.basename(path)
    return base.rsplit(".", 1)[0] if "." in base else base


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args, cfg: dict) -> int:
    if args.out is None:
        raise UsageError("generate needs --out DIR")
    seed = args.seed
    counts = _counts(cfg["gen.n_per_task"], cfg["graph.n_tasks"])
    gt = make_ground_truth(
        n_tasks=cfg["graph.n_tasks"],
        n_confounders=cfg["graph.n_confounders"],
        n_mechanisms=cfg["graph.n_mechanisms"],
        parents_per_node=cfg["gen.parents_per_node"],
        noise_x=cfg["gen.noise"], noise_w=cfg["gen.noise"],
        noise_y=cfg["gen.noise"], seed=seed, link=cfg["gen.link"])
    ds = sample_dataset(gt, counts, seed=seed)
    manifest = write_synthetic_dataset(ds, args.out)
    _echo_config(args.out, "generate", cfg, seed)
    for name, n in zip(manifest["files"], manifest["n_per_task"]):
        print(f"wrote {os.path.join(args.out, name)} ({n} records)")
    print(f"wrote {os.path.join(args.out, 'manifest.json')}")
    return 0


def _load_and_prepare(data_dir: str, cfg: dict, seed: int):
    dataset = load_dataset(discover_task_files(data_dir))
    tagged = split_dataset(dataset, fraction=cfg["split.fraction"], seed=seed)
    return fit_apply_normalizer(tagged)


def _mechanism_count(data_dir: str, cfg: dict) -> int:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(manifest_path):
        manifest = read_manifest(manifest_path)
        return int(manifest["ground_truth"]["n_mechanisms"])
    return cfg["graph.n_mechanisms"]


def _cmd_train(args, cfg: dict) -> int:
    if args.data is None or args.out is None:
        raise UsageError("train needs --data DIR and --out MODEL.json")
    seed = args.seed
    scaled, norm = _load_and_prepare(args.data, cfg, seed)
    spec = make_spec(scaled.n_tasks, len(scaled.confounders),
                     _mechanism_count(args.data, cfg))
    model = build_model(spec, hidden=cfg["model.hidden"],
                        embed=cfg["model.embed"], seed=seed)
    model, report = train(model, scaled, _train_config(cfg, seed))
    model.norm = norm
    out_dir = _out_dir_of(args.out)
    save_checkpoint(model, args.out, provenance={
        "seed": seed, "config_digest": _config_digest(cfg, seed)})
    stem = _stem(args.out)
    rows = [["epoch"]
            + [f"train_task{k}" for k in range(1, spec.n_tasks + 1)]
            + [f"val_task{k}" for k in range(1, spec.n_tasks + 1)]
            + ["acyclicity"]]
    for e in range(report.train_nll.shape[0]):
        rows.append([e] + [repr(v) for v in report.train_nll[e].tolist()]
                    + [repr(v) for v in report.val_nll[e].tolist()]
                    + [repr(float(report.acyclicity[e]))])
    _write_csv(os.path.join(out_dir, f"{stem}_report.csv"), rows)
    figures.training_curves(report,
                            os.path.join(out_dir, f"{stem}_curves.png"))
    _echo_config(out_dir, "train", cfg, seed)
    print(f"checkpoint: {args.out} (best epoch {report.best_epoch}, "
          f"{report.train_nll.shape[0]} epochs)")
    return 0


def _apply_norm(norm, table, confounders):
    """Project a raw task table into the model's normalized units."""
    if norm is None:
        return table.z, table.y
    z = norm.transform(table.z, confounders)
    y = norm.transform_column("y", table.y)
    return z, y


def _cmd_infer(args, cfg: dict) -> int:
    if args.model is None or args.data is None or args.out is None:
        raise UsageError("infer needs --model, --data and --out EST.csv")
    model = load_checkpoint(args.model)
    dataset = load_dataset(discover_task_files(args.data))
    k = args.task
    if not 1 <= k <= dataset.n_tasks:
        raise UsageError(f"--task {k} outside 1..{dataset.n_tasks}")
    table = dataset.task(k)
    z, y = _apply_norm(model.norm, table, dataset.confounders)
    results = map_estimate_batch(model, y, z, k, _map_config(cfg))
    x_hat = np.array([r.x_hat for r in results])
    w_hat = np.stack([r.w_hat for r in results])
    scale_note = "model"
    if model.norm is not None and "x_true" in model.norm.columns:
        x_hat = model.norm.inverse_column("x_true", x_hat)
        scale_note = "data"
        for i in range(w_hat.shape[1]):
            col = f"w_true_{i + 1}"
            if col in model.norm.columns:
                w_hat[:, i] = model.norm.inverse_column(col, w_hat[:, i])
    out_dir = _out_dir_of(args.out)
    M = w_hat.shape[1]
    rows = [["unit", "period", "x_hat", "converged"]
            + [f"w_hat_{i}" for i in range(1, M + 1)]]
    for r in range(x_hat.shape[0]):
        rows.append([int(table.unit[r]), int(table.period[r]),
                     repr(float(x_hat[r])), int(results[r].converged)]
                    + [repr(v) for v in w_hat[r].tolist()])
    _write_csv(args.out, rows)
    _echo_config(out_dir, "infer", cfg, args.seed)
    n_conv = sum(r.converged for r in results)
    print(f"estimates: {args.out} ({x_hat.shape[0]} records, "
          f"{n_conv} converged, {scale_note} units)")
    return 0


def _read_keyed_column(path: str, column: str) -> dict:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or column not in reader.fieldnames:
                raise UsageError(f"{path}: missing column {column!r}")
            out = {}
            for row in reader:
                key = (int(row["unit"]), int(row["period"]))
                out[key] = float(row[column])
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}")
    except (KeyError, TypeError, ValueError) as e:
        raise IngestionError(f"{path}: malformed row ({e})")
    if not out:
        raise IngestionError(f"{path}: no records")
    return out


def _cmd_eval(args, cfg: dict) -> int:
    if args.estimates is None or args.truth is None:
        raise UsageError("eval needs --estimates EST.csv and --truth CSV")
    if args.out is None:
        args.out = os.path.dirname(os.path.abspath(args.estimates))
    est = _read_keyed_column(args.estimates, "x_hat")
    truth = _read_keyed_column(args.truth, "x_true")
    common = sorted(set(est) & set(truth))
    if not common:
        raise IngestionError("estimates and truth share no unit-period keys")
    x_hat = np.array([est[key] for key in common])
    x_true = np.array([truth[key] for key in common])
    mae, mse = reconstruction_error(x_hat, x_true)
    rows = [["metric", "value"], ["mae", repr(mae)], ["mse", repr(mse)],
            ["n", len(common)]]
    if args.model is not None and args.manifest is not None:
        model = load_checkpoint(args.model)
        manifest = read_manifest(args.manifest)
        gt = ground_truth_from_dict(manifest["ground_truth"])
        from .oracle import true_adjacency
        p, r, f1 = edge_scores(learned_edge_set(model),
                               true_edge_set(model.spec, true_adjacency(gt)))
        rows += [["edge_precision", repr(p)], ["edge_recall", repr(r)],
                 ["edge_f1", repr(f1)]]
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    _write_csv(metrics_path, rows)
    figures.map_scatter(x_hat, x_true,
                        os.path.join(args.out, "reconstruction.png"))
    _echo_config(args.out, "eval", cfg, args.seed)
    print(f"metrics: {metrics_path} (mae {mae:.6f}, mse {mse:.6f}, "
          f"n {len(common)})")
    return 0


def _cmd_transfer(args, cfg: dict) -> int:
    if args.model is None or args.data is None or args.out is None:
        raise UsageError("transfer needs --model TEACHER.json, --data DIR "
                         "and --out STUDENT.json")
    seed = args.seed
    teacher = load_checkpoint(args.model)
    dataset = load_dataset(discover_task_files(args.data))
    k = args.task
    if not 1 <= k <= dataset.n_tasks:
        raise UsageError(f"--task {k} outside 1..{dataset.n_tasks}")
    target = subset_tasks(dataset, [k])
    tagged = split_dataset(target, fraction=cfg["split.fraction"], seed=seed)
    scaled, norm = fit_apply_normalizer(tagged)
    spec = make_spec(1, len(scaled.confounders),
                     teacher.spec.n_mechanisms)
    if len(scaled.confounders) != teacher.spec.n_confounders:
        raise UsageError(
            f"teacher expects {teacher.spec.n_confounders} confounders, "
            f"data has {len(scaled.confounders)}")
    student = build_model(spec, hidden=teacher.hidden, embed=teacher.embed,
                          seed=seed)
    copy_shared(teacher, student)
    mode = args.mode
    out_dir = _out_dir_of(args.out)
    if mode == "zero-shot":
        report = None
    else:
        freeze = ("shared",) if mode == "head-only" else ()
        tcfg = dataclasses.replace(_train_config(cfg, seed), freeze=freeze)
        student, report = train(student, scaled, tcfg)
    student.norm = norm
    save_checkpoint(student, args.out, provenance={
        "seed": seed, "mode": mode, "teacher": os.path.abspath(args.model),
        "config_digest": _config_digest(cfg, seed)})
    if report is not None:
        stem = _stem(args.out)
        figures.training_curves(report,
                                os.path.join(out_dir, f"{stem}_curves.png"))
    _echo_config(out_dir, "transfer", cfg, seed)
    print(f"student checkpoint: {args.out} (mode {mode}, task {k})")
    return 0


def _cmd_experiment(args, cfg: dict) -> int:
    if args.plan is None or args.out is None:
        raise UsageError("experiment needs --plan PLAN.json and --out DIR")
    try:
        with open(args.plan, encoding="utf-8") as fh:
            plan_dict = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read plan {args.plan}: {e}")
    except json.JSONDecodeError as e:
        raise UsageError(f"plan {args.plan} is not valid JSON: {e}")
    plan = plan_from_dict(plan_dict)
    report = run_experiment(plan)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.csv")
    _write_csv(report_path, report.csv_rows())
    with open(os.path.join(args.out, "summary.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.summary())
    figures.experiment_bars(report, os.path.join(args.out, "report.png"))
    with open(os.path.join(args.out, "resolved_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"command": "experiment", "plan": plan_dict},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"experiment report: {report_path} ({plan.kind}, "
          f"{len(plan.seeds)} seeds)")
    if report.failures:
        for failure in report.failures:
            print(f"diverged: {failure}")
    return 0


def _cmd_export_graph(args, cfg: dict) -> int:
    if args.model is None or args.out is None:
        raise UsageError("export-graph needs --model MODEL.json and "
                         "--out GRAPH.csv")
    model = load_checkpoint(args.model)
    out_dir = _out_dir_of(args.out)
    n = export_graph(model, args.out)
    figures.adjacency_heatmap(
        model, os.path.join(out_dir, f"{_stem(args.out)}.png"))
    _echo_config(out_dir, "export-graph", cfg, args.seed)
    print(f"graph: {args.out} ({n} edges)")
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "transfer": _cmd_transfer,
    "experiment": _cmd_experiment,
    "export-graph": _cmd_export_graph,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None,
                        help="JSON file of dotted configuration keys")
    common.add_argument("--out", default=None)
    for key in SCHEMA:
        common.add_argument(f"--{key}", default=None, dest=key,
                            metavar=SCHEMA[key][0].upper())

    parser = argparse.ArgumentParser(
        prog="anticausal",
        description="multi-task anti-causal learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common],
                   help="sample a synthetic dataset with known structure")

    p_train = sub.add_parser("train", parents=[common],
                             help="fit a model and write a checkpoint")
    p_train.add_argument("--data", default=None)
    p_train.add_argument("--w", default=None, dest="train.w",
                         help="acyclicity weight (same as --train.w)")

    p_infer = sub.add_parser("infer", parents=[common],
                             help="invert outcomes into cause estimates")
    p_infer.add_argument("--data", default=None)
    p_infer.add_argument("--model", default=None)
    p_infer.add_argument("--task", type=int, default=1)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="score estimates against recorded truth")
    p_eval.add_argument("--estimates", default=None)
    p_eval.add_argument("--truth", default=None)
    p_eval.add_argument("--model", default=None)
    p_eval.add_argument("--manifest", default=None)

    p_tr = sub.add_parser("transfer", parents=[common],
                          help="adapt a trained model to one task")
    p_tr.add_argument("--mode", required=True,
                      choices=("zero-shot", "head-only", "full"))
    p_tr.add_argument("--model", default=None)
    p_tr.add_argument("--data", default=None)
    p_tr.add_argument("--task", type=int, default=1)

    p_exp = sub.add_parser("experiment", parents=[common],
                           help="run a seeded experiment plan")
    p_exp.add_argument("--plan", default=None)

    p_gr = sub.add_parser("export-graph", parents=[common],
                          help="write the learned edge list")
    p_gr.add_argument("--model", default=None)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {key: getattr(args, key, None) for key in SCHEMA}
    try:
        cfg = resolve_config(args.config, overrides)
        return _HANDLERS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except AnticausalError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
