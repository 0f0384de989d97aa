"""File boundary of the toolkit: CSV datasets, z-scores, splits, checkpoints.

Per-task record tables travel as one CSV each with a fixed column roster
(`unit,period,z_1..z_L,y[,x_true][,w_true_1..w_true_M]`). Splitting and
normalization are functional: they return new dataset objects and leave
their inputs alone. Checkpoints are versioned JSON holding every parameter
array as hex floats, so two runs with the same inputs write byte-identical
files and a round trip is bitwise.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointError,
    ContractError,
    IngestionError,
    InvalidSpecError,
)
from .graph import adjacency_init, make_spec, soft_adjacency
from .oracle import SyntheticDataset, ground_truth_to_dict, true_adjacency
from .sem import SemModel, instantiate_model, parameter_groups

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "anticausal-checkpoint"
MANIFEST_FORMAT = "anticausal-manifest"
FORMAT_VERSION = 1

_STD_FLOOR = 1e-8


@dataclass
class TaskTable:
    """Records for one task; arrays share a common row order.

    `split` holds one tag per row, empty until split_dataset assigns
    "train" / "test".
    """

    task: int
    unit: np.ndarray
    period: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x_true: np.ndarray | None = None
    w_true: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        if self.split is None:
            self.split = np.full(self.y.shape[0], "", dtype="<U5")

    @property
    def n_records(self) -> int:
        return int(self.y.shape[0])

    def rows(self, tag: str) -> np.ndarray:
        """Boolean mask of rows carrying the given split tag."""
        return self.split == tag


@dataclass
class MultiTaskDataset:
    """All task tables plus the column roster they share."""

    tasks: list[TaskTable]
    confounders: list[str]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def has_x(self) -> bool:
        return all(t.x_true is not None for t in self.tasks)

    @property
    def has_w(self) -> bool:
        return all(t.w_true is not None for t in self.tasks)

    def task(self, k: int) -> TaskTable:
        for t in self.tasks:
            if t.task == k:
                return t
        raise ContractError(f"no task {k} in dataset")

    def split_assigned(self) -> bool:
        return all((t.split != "").all() for t in self.tasks)


def _numeric_columns(dataset: MultiTaskDataset) -> list[str]:
    cols = list(dataset.confounders) + ["y"]
    if dataset.has_x:
        cols.append("x_true")
    if dataset.has_w:
        m = dataset.tasks[0].w_true.shape[1]
        cols += [f"w_true_{i}" for i in range(1, m + 1)]
    return cols


@dataclass
class Normalizer:
    """Per-column z-score statistics fitted on training rows only.

    `std` is the population standard deviation, floored at 1e-8 for storage;
    columns whose raw deviation falls under the floor are flagged constant
    and always map to zero (their inverse returns the mean).
    """

    columns: list[str]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def _index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ContractError(f"column {name!r} not covered by normalizer")

    def transform(self, values: np.ndarray, names: list[str]) -> np.ndarray:
        idx = [self._index(n) for n in names]
        v = np.asarray(values, dtype=np.float64)
        out = (v - self.mean[idx]) / self.std[idx]
        return np.where(self.constant[idx], 0.0, out)

    def inverse(self, values: np.ndarray, names: list[str]) -> np.ndarray:
        idx = [self._index(n) for n in names]
        v = np.asarray(values, dtype=np.float64)
        out = v * self.std[idx] + self.mean[idx]
        return np.where(self.constant[idx], self.mean[idx], out)

    def transform_column(self, name: str, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)[..., None]
        return self.transform(v, [name])[..., 0]

    def inverse_column(self, name: str, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)[..., None]
        return self.inverse(v, [name])[..., 0]

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "mean": [v.hex() for v in self.mean.tolist()],
            "std": [v.hex() for v in self.std.tolist()],
            "constant": [int(c) for c in self.constant.tolist()],
        }

    @staticmethod
    def from_dict(d: dict) -> "Normalizer":
        return Normalizer(
            columns=list(d["columns"]),
            mean=np.array([_parse_float(v) for v in d["mean"]]),
            std=np.array([_parse_float(v) for v in d["std"]]),
            constant=np.array(d["constant"], dtype=bool),
        )


def _parse_float(v) -> float:
    if isinstance(v, str):
        return float.fromhex(v)
    return float(v)


# ---------------------------------------------------------------------------
# ingestion


_Z_PATTERN = re.compile(r"z_(\d+)$")
_W_PATTERN = re.compile(r"w_true_(\d+)$")


def _parse_header(path: str, header: list[str]) -> dict:
    """Validate the column roster and return its layout."""
    cols = [c.strip() for c in header]
    if len(cols) < 4 or cols[0] != "unit" or cols[1] != "period":
        raise IngestionError(
            f"{path}:1: header must begin with unit,period; got {cols[:2]}")
    pos = 2
    n_z = 0
    while pos < len(cols):
        m = _Z_PATTERN.match(cols[pos])
        if not m:
            break
        n_z += 1
        if int(m.group(1)) != n_z:
            raise IngestionError(
                f"{path}:1: confounder columns must run z_1..z_L in order; "
                f"found {cols[pos]!r} at position {pos + 1}")
        pos += 1
    if n_z == 0:
        raise IngestionError(f"{path}:1: no z_1..z_L confounder columns")
    if pos >= len(cols) or cols[pos] != "y":
        raise IngestionError(f"{path}:1: missing required column 'y'")
    pos += 1
    has_x = pos < len(cols) and cols[pos] == "x_true"
    if has_x:
        pos += 1
    n_w = 0
    while pos < len(cols):
        m = _W_PATTERN.match(cols[pos])
        if not m:
            raise IngestionError(
                f"{path}:1: unexpected column {cols[pos]!r}")
        n_w += 1
        if int(m.group(1)) != n_w:
            raise IngestionError(
                f"{path}:1: supervision columns must run w_true_1..M in "
                f"order; found {cols[pos]!r}")
        pos += 1
    return {"n_z": n_z, "has_x": has_x, "n_w": n_w}


def _parse_cell(path: str, line: int, col: str, token: str) -> float:
    try:
        v = float(token)
    except ValueError:
        raise IngestionError(
            f"{path}:{line}: non-numeric value {token!r} in column {col}")
    if not np.isfinite(v):
        raise IngestionError(
            f"{path}:{line}: non-finite value {token!r} in column {col}")
    return v


def _load_task_file(path: str, task: int) -> tuple[TaskTable, dict]:
    if not os.path.exists(path):
        raise IngestionError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}:1: empty file, header required")
        layout = _parse_header(path, header)
        width = 3 + layout["n_z"] + int(layout["has_x"]) + layout["n_w"]
        units, periods, rows = [], [], []
        seen: set[tuple[int, int]] = set()
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise IngestionError(
                    f"{path}:{line}: expected {width} cells, got {len(rec)}")
            u = int(_parse_cell(path, line, "unit", rec[0]))
            p = int(_parse_cell(path, line, "period", rec[1]))
            if (u, p) in seen:
                raise IngestionError(
                    f"{path}:{line}: duplicate unit-period key ({u}, {p})")
            seen.add((u, p))
            units.append(u)
            periods.append(p)
            rows.append([_parse_cell(path, line, header[j], rec[j])
                         for j in range(2, width)])
    if not rows:
        raise IngestionError(f"{path}: task file holds no records")
    data = np.array(rows, dtype=np.float64)
    n_z = layout["n_z"]
    z = data[:, :n_z]
    y = data[:, n_z]
    pos = n_z + 1
    x_true = None
    if layout["has_x"]:
        x_true = data[:, pos]
        pos += 1
    w_true = data[:, pos:] if layout["n_w"] else None
    table = TaskTable(task=task, unit=np.array(units, dtype=np.int64),
                      period=np.array(periods, dtype=np.int64),
                      z=z, y=y, x_true=x_true, w_true=w_true)
    return table, layout


def load_dataset(paths: list[str]) -> MultiTaskDataset:
    """Read one CSV per task (task k = position k in `paths`).

    Any malformed file raises IngestionError naming the file and line;
    nothing partial is returned.
    """
    if not paths:
        raise IngestionError("no dataset files given")
    tables = []
    layouts = []
    for k, path in enumerate(paths, start=1):
        table, layout = _load_task_file(str(path), k)
        tables.append(table)
        layouts.append(layout)
        logger.info("task %d: %d records from %s", k, table.n_records, path)
    first = layouts[0]
    for k, layout in enumerate(layouts[1:], start=2):
        if layout != first:
            raise IngestionError(
                f"{paths[k - 1]}: column roster differs from {paths[0]} "
                f"({layout} vs {first})")
    confounders = [f"z_{j}" for j in range(1, first["n_z"] + 1)]
    return MultiTaskDataset(tasks=tables, confounders=confounders)


def discover_task_files(directory: str) -> list[str]:
    """Sorted task CSV paths (task1.csv, task2.csv, ...) in a directory."""
    found = []
    for name in os.listdir(directory):
        m = re.match(r"task(\d+)\.csv$", name)
        if m:
            found.append((int(m.group(1)), os.path.join(directory, name)))
    if not found:
        raise IngestionError(f"no task CSV files under {directory}")
    found.sort()
    expected = list(range(1, len(found) + 1))
    if [i for i, _ in found] != expected:
        raise IngestionError(
            f"task files must be numbered 1..K; found {[i for i, _ in found]}")
    return [p for _, p in found]


# ---------------------------------------------------------------------------
# splits and normalization


def split_dataset(dataset: MultiTaskDataset, fraction: float = 0.8,
                  seed: int = 0) -> MultiTaskDataset:
    """Tag rows "train" / "test" per task, uniformly at random.

    Each task draws from its own seed stream, so one task's split never
    depends on another task's presence or size.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidSpecError(f"fraction must be in (0, 1), got {fraction}")
    tagged = []
    for t in dataset.tasks:
        n = t.n_records
        n_train = int(round(fraction * n))
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(t.task,)))
        perm = rng.permutation(n)
        tags = np.full(n, "test", dtype="<U5")
        tags[perm[:n_train]] = "train"
        tagged.append(dataclasses.replace(t, split=tags))
    return MultiTaskDataset(tasks=tagged, confounders=list(dataset.confounders))


def _table_matrix(t: TaskTable, dataset: MultiTaskDataset) -> np.ndarray:
    parts = [t.z, t.y[:, None]]
    if dataset.has_x:
        parts.append(t.x_true[:, None])
    if dataset.has_w:
        parts.append(t.w_true)
    return np.concatenate(parts, axis=1)


def fit_apply_normalizer(dataset: MultiTaskDataset,
                         split: str = "train"
                         ) -> tuple[MultiTaskDataset, Normalizer]:
    """Fit per-column z-score statistics on `split` rows, apply everywhere."""
    if not dataset.split_assigned():
        raise ContractError("split tags must be assigned before normalization")
    columns = _numeric_columns(dataset)
    pooled = np.concatenate(
        [_table_matrix(t, dataset)[t.rows(split)] for t in dataset.tasks],
        axis=0)
    if pooled.shape[0] == 0:
        raise ContractError(f"no rows tagged {split!r} to fit on")
    mean = pooled.mean(axis=0)
    raw_std = pooled.std(axis=0)
    constant = raw_std < _STD_FLOOR
    std = np.maximum(raw_std, _STD_FLOOR)
    norm = Normalizer(columns=columns, mean=mean, std=std, constant=constant)

    out = []
    for t in dataset.tasks:
        scaled = norm.transform(_table_matrix(t, dataset), columns)
        n_z = len(dataset.confounders)
        z = scaled[:, :n_z]
        y = scaled[:, n_z]
        pos = n_z + 1
        x_true = None
        if dataset.has_x:
            x_true = scaled[:, pos]
            pos += 1
        w_true = scaled[:, pos:] if dataset.has_w else None
        out.append(dataclasses.replace(t, z=z, y=y, x_true=x_true,
                                       w_true=w_true, split=t.split.copy()))
    return MultiTaskDataset(tasks=out, confounders=list(dataset.confounders)), norm


# ---------------------------------------------------------------------------
# synthetic dataset files


def dataset_from_synthetic(ds: SyntheticDataset,
                           include_truth: bool = True) -> MultiTaskDataset:
    """Wrap generated samples as a dataset without touching the filesystem."""
    tables = []
    for sample in ds.tasks:
        n = sample.y.shape[0]
        tables.append(TaskTable(
            task=sample.task,
            unit=np.arange(1, n + 1, dtype=np.int64),
            period=np.ones(n, dtype=np.int64),
            z=sample.z.copy(),
            y=sample.y.copy(),
            x_true=sample.x.copy() if include_truth else None,
            w_true=sample.w.copy() if include_truth else None))
    confounders = [f"z_{j}" for j in range(1, ds.gt.n_confounders + 1)]
    return MultiTaskDataset(tasks=tables, confounders=confounders)


def write_synthetic_dataset(ds: SyntheticDataset, out_dir: str,
                            include_truth: bool = True) -> dict:
    """Write taskK.csv files plus manifest.json for a generated dataset.

    Returns the manifest dictionary. Values print with repr-style shortest
    round-trip formatting, so reading them back is bitwise.
    """
    os.makedirs(out_dir, exist_ok=True)
    gt = ds.gt
    files = []
    for sample in ds.tasks:
        name = f"task{sample.task}.csv"
        fields = (["unit", "period"]
                  + [f"z_{j}" for j in range(1, gt.n_confounders + 1)]
                  + ["y"])
        if include_truth:
            fields += ["x_true"]
            fields += [f"w_true_{i}" for i in range(1, gt.n_mechanisms + 1)]
        with open(os.path.join(out_dir, name), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for r in range(sample.y.shape[0]):
                row = [r + 1, 1] + [repr(v) for v in sample.z[r].tolist()]
                row.append(repr(float(sample.y[r])))
                if include_truth:
                    row.append(repr(float(sample.x[r])))
                    row += [repr(v) for v in sample.w[r].tolist()]
                writer.writerow(row)
        files.append(name)

    spec = make_spec(gt.n_tasks, gt.n_confounders, gt.n_mechanisms)
    names = spec.names
    A = true_adjacency(gt)
    edges = [[names[i], names[j]]
             for i in range(A.shape[0]) for j in range(A.shape[1])
             if A[i, j] > 0]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "seed": ds.seed,
        "n_per_task": [int(s.y.shape[0]) for s in ds.tasks],
        "files": files,
        "edges": edges,
        "ground_truth": ground_truth_to_dict(gt),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise IngestionError(f"{path}: cannot read manifest ({e})")
    except json.JSONDecodeError as e:
        raise IngestionError(f"{path}: invalid manifest JSON ({e})")
    if manifest.get("format") != MANIFEST_FORMAT:
        raise IngestionError(f"{path}: not a dataset manifest")
    return manifest


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(arr: np.ndarray, float_format: str) -> list:
    flat = arr.ravel().tolist()
    if float_format == "hex":
        return [v.hex() for v in flat]
    return flat


def save_checkpoint(model: SemModel, path: str,
                    provenance: dict | None = None,
                    float_format: str = "hex") -> None:
    """Write the model as versioned JSON; hex floats make the file bitwise.

    The same model and provenance always produce byte-identical files.
    """
    if float_format not in ("hex", "decimal"):
        raise InvalidSpecError(f"unknown float format {float_format!r}")
    group_of = {}
    for group, names in parameter_groups(model).items():
        for name in names:
            group_of[name] = group
    params = {}
    for name in sorted(model.params):
        arr = model.params[name]
        params[name] = {
            "group": group_of[name],
            "shape": list(arr.shape),
            "data": _encode_array(arr, float_format),
        }
    adj = model.adjacency
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "spec": {
            "n_tasks": model.spec.n_tasks,
            "n_confounders": model.spec.n_confounders,
            "n_mechanisms": model.spec.n_mechanisms,
        },
        "hidden": model.hidden,
        "embed": model.embed,
        "shapes": {k: list(v) for k, v in model.shapes.items()},
        "adjacency": {
            "mask": adj.mask.astype(int).tolist(),
            "fixed": adj.fixed.astype(int).tolist(),
            "threshold": adj.threshold,
        },
        "params": params,
        "normalizer": model.norm.to_dict() if model.norm is not None else None,
        "provenance": provenance or {},
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_checkpoint(path: str) -> SemModel:
    """Rebuild a model from save_checkpoint output; never partial."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid or truncated checkpoint ({e})")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('version')!r}"
            f" (this build reads version {FORMAT_VERSION})")
    try:
        counts = payload["spec"]
        spec = make_spec(counts["n_tasks"], counts["n_confounders"],
                         counts["n_mechanisms"])
        shapes = {k: list(v) for k, v in payload["shapes"].items()}
        threshold = float(payload["adjacency"]["threshold"])
        model = instantiate_model(spec, shapes, seed=0, threshold=threshold)
        model.hidden = int(payload["hidden"])

        reference = adjacency_init(spec, threshold)
        mask = np.array(payload["adjacency"]["mask"], dtype=np.float64)
        fixed = np.array(payload["adjacency"]["fixed"], dtype=np.float64)
        if not np.array_equal(mask, reference.mask) or \
                not np.array_equal(fixed, reference.fixed):
            raise CheckpointError(
                f"{path}: adjacency layout does not match the declared sizes")

        stored = payload["params"]
        if set(stored) != set(model.params):
            missing = sorted(set(model.params) - set(stored))
            extra = sorted(set(stored) - set(model.params))
            raise CheckpointError(
                f"{path}: parameter roster mismatch "
                f"(missing {missing}, unexpected {extra})")
        group_of = {}
        for group, names in parameter_groups(model).items():
            for name in names:
                group_of[name] = group
        for name, entry in stored.items():
            arr = model.params[name]
            shape = tuple(entry["shape"])
            if shape != arr.shape:
                raise CheckpointError(
                    f"{path}: parameter {name} has shape {list(shape)}, "
                    f"expected {list(arr.shape)}")
            if entry["group"] != group_of[name]:
                raise CheckpointError(
                    f"{path}: parameter {name} tagged {entry['group']!r}, "
                    f"expected {group_of[name]!r}")
            values = np.array([_parse_float(v) for v in entry["data"]],
                              dtype=np.float64)
            if values.size != arr.size:
                raise CheckpointError(
                    f"{path}: parameter {name} holds {values.size} values, "
                    f"expected {arr.size}")
            arr[...] = values.reshape(shape)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e!r})")
    if payload.get("normalizer") is not None:
        model.norm = Normalizer.from_dict(payload["normalizer"])
    return model


# ---------------------------------------------------------------------------
# graph export


def export_graph(model: SemModel, path: str) -> int:
    """Write the edge list CSV `child,parent,weight,kind`; returns row count.

    Learnable positions report sigmoid(logit) and appear only when strictly
    above the decision threshold; fixed edges always appear with weight 1.
    """
    names = model.spec.names
    adj = model.adjacency
    soft = soft_adjacency(adj)
    n = len(names)
    written = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["child", "parent", "weight", "kind"])
        for i in range(n):
            for j in range(n):
                if adj.fixed[i, j]:
                    writer.writerow([names[i], names[j], f"{1.0:.4f}", "fixed"])
                    written += 1
                elif adj.mask[i, j] and soft[i, j] > adj.threshold:
                    writer.writerow([names[i], names[j],
                                     f"{soft[i, j]:.4f}", "learned"])
                    written += 1
    return written
