"""Grid runner for ablation studies.

An ablation spec is a JSON object::

    {
      "model": {"d": 16, "L": 16, "N": 2},          # base ModelConfig keys
      "train": {"epochs": 10},                       # base TrainConfig keys
      "data": {"synthetic": {"n_samples": 3000}},    # or {"path": "data/dir"}
      "axes": {"center_modality": ["acoustic", "visual", "text"]},
      "seeds": [0, 1, 2, 3, 4],
      "workers": 1
    }

Every combination of axis values is one cell; each cell is trained and
evaluated once per seed. With synthetic data and no explicit ``seed`` in the
generator settings, each run seed also draws its own corpus.
"""

from __future__ import annotations

import csv
import functools
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import SUBSET_LABELS, ConfigError, ModelConfig, TrainConfig
from .data import Dataset, SyntheticConfig, generate_synthetic, load_dataset
from .training import fit

logger = logging.getLogger(__name__)

METRIC_NAMES = ("mae", "corr", "acc7", "acc2", "f1")
AXIS_ALIASES = {
    "gates": "gates_enabled",
    "joint_learning": "joint_learning_enabled",
    "center": "center_modality",
    "subset": "modalities",
    "modality_subset": "modalities",
    "lambda_": "lambda",
}
TRAIN_AXES = {"learning_rate", "epochs", "batch_size"}


class AblationSpecError(ValueError):
    pass


@dataclass
class AblationSpec:
    axes: dict
    seeds: list
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise AblationSpecError("seeds must be non-empty")
        if not self.axes:
            raise AblationSpecError("at least one axis is required")
        norm = {}
        for key, values in self.axes.items():
            name = AXIS_ALIASES.get(key, key)
            if not isinstance(values, list) or not values:
                raise AblationSpecError(f"axis {key!r} needs a non-empty list of values")
            if name == "modalities":
                values = [SUBSET_LABELS.get(v, v) for v in values]
            norm[name] = values
        if not any(len(v) > 1 for v in norm.values()):
            raise AblationSpecError("at least one axis must vary")
        self.axes = norm
        if "path" not in self.data and "synthetic" not in self.data:
            raise AblationSpecError("data needs either 'path' or 'synthetic'")
        # fail early on bad keys/values rather than inside every cell
        for cell in self.cells():
            self.configs(cell, self.seeds[0])

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        unknown = set(d) - {"axes", "seeds", "model", "train", "data", "workers", "name"}
        if unknown:
            raise AblationSpecError(f"unknown spec keys: {', '.join(sorted(unknown))}")
        try:
            return cls(axes=d.get("axes", {}), seeds=list(d.get("seeds", [])),
                       model=d.get("model", {}), train=d.get("train", {}),
                       data=d.get("data", {}), workers=int(d.get("workers", 1)))
        except ConfigError as e:
            raise AblationSpecError(str(e)) from None

    @classmethod
    def from_file(cls, path) -> "AblationSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def cells(self) -> list:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]

    def configs(self, cell: dict, seed: int) -> tuple:
        model_kw = dict(self.model)
        train_kw = dict(self.train)
        for k, v in cell.items():
            (train_kw if k in TRAIN_AXES else model_kw)[k] = v
        train_kw["seed"] = seed
        train_kw.setdefault("checkpoint_dir", "")
        return ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw)


@functools.lru_cache(maxsize=8)
def _synthetic(cfg_json: str) -> Dataset:
    return generate_synthetic(SyntheticConfig.from_dict(json.loads(cfg_json)))


@functools.lru_cache(maxsize=2)
def _from_disk(path: str) -> Dataset:
    return load_dataset(path)


def dataset_for(data: dict, seed: int) -> Dataset:
    if "path" in data:
        return _from_disk(str(data["path"]))
    syn = dict(data["synthetic"])
    syn.setdefault("seed", seed)
    return _synthetic(json.dumps(syn, sort_keys=True))


@dataclass
class RunOutcome:
    cell_index: int
    seed: int
    metrics: Optional[dict] = None
    best_epoch: int = 0
    error: str = ""


def run_one(spec: AblationSpec, cell_index: int, cell: dict, seed: int) -> RunOutcome:
    try:
        model_cfg, train_cfg = spec.configs(cell, seed)
        ds = dataset_for(spec.data, seed)
        _, result = fit(model_cfg, ds, train_cfg)
        if result.best_metrics is None:
            raise RuntimeError("no validation samples to score")
        return RunOutcome(cell_index, seed, result.best_metrics.to_dict(), result.best_epoch)
    except Exception as e:  # one failed run must not sink the grid
        logger.warning("cell %d seed %d failed: %s", cell_index, seed, e)
        return RunOutcome(cell_index, seed, error=f"{type(e).__name__}: {e}")


def _run_packed(args) -> RunOutcome:
    spec_dict, cell_index, cell, seed = args
    return run_one(AblationSpec.from_dict(spec_dict), cell_index, cell, seed)


def run_grid(spec: AblationSpec, spec_dict: Optional[dict] = None, workers: Optional[int] = None) -> list:
    """Run every cell x seed; returns outcomes ordered by (cell, seed)."""
    jobs = [(i, cell, seed) for i, cell in enumerate(spec.cells()) for seed in spec.seeds]
    workers = workers or spec.workers
    if workers <= 1:
        return [run_one(spec, i, cell, seed) for i, cell, seed in jobs]
    if spec_dict is None:
        raise ValueError("parallel runs need the raw spec dict")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_packed, [(spec_dict, i, c, s) for i, c, s in jobs]))


def summarize(spec: AblationSpec, outcomes: list) -> list:
    rows = []
    for i, cell in enumerate(spec.cells()):
        runs = [o for o in outcomes if o.cell_index == i]
        ok = [o for o in runs if o.error == ""]
        row = {"cell": i, **{k: _label(k, v) for k, v in cell.items()},
               "n_seeds": len(runs), "n_failed": len(runs) - len(ok)}
        for m in METRIC_NAMES:
            vals = np.array([o.metrics[m] for o in ok], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{m}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
        row["errors"] = " | ".join(o.error for o in runs if o.error)
        rows.append(row)
    return rows


def _label(key: str, value):
    if key == "modalities":
        inverse = {v: k for k, v in SUBSET_LABELS.items()}
        return inverse.get(value, value)
    return value


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_grid_csv(rows: list, path) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def write_seed_csv(spec: AblationSpec, outcomes: list, path) -> None:
    cells = spec.cells()
    axis_names = list(spec.axes)
    fields = ["cell", *axis_names, "seed", "best_epoch", *METRIC_NAMES, "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for o in outcomes:
            row = {"cell": o.cell_index, "seed": o.seed, "best_epoch": o.best_epoch, "error": o.error}
            row.update({k: _label(k, cells[o.cell_index][k]) for k in axis_names})
            for m in METRIC_NAMES:
                row[m] = o.metrics[m] if o.metrics else math.nan
            writer.writerow({k: _fmt(v) for k, v in row.items()})
