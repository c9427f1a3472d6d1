"""Pipeline and sweep orchestration.

One pipeline run is generate -> (train -> features -> fastica | nsvica)
-> evaluate.  A sweep grids over mixing depths, segment counts, repeats and
methods, persisting one directory per cell (config snapshot, checkpoint,
report JSON, training CSV) with atomic writes, skipping cells whose report
already exists.
"""

from __future__ import annotations

import csv
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .datagen import FamilySpec, make_dataset, save_dataset
from .evaluation import (
    EvalReport,
    affine_identifiability_check,
    match_components,
    true_q_values,
)
from .linear_ica import IcaConfig, fastica, nsvica
from .network import features_forward, init_params, save_model
from .trainer import TrainConfig, chance_level, train_tcl, write_history_csv

WORKERS_ENV = "TCL_ICA_WORKERS"
METHODS = ("tcl", "nsvica")
CSV_COLUMNS = ["depth", "segments", "seed", "mean_abs_corr", "accuracy", "chance", "method"]


class PipelineError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage, original):
        super().__init__(f"stage '{stage}': {original}")
        self.stage = stage
        self.original = original


@contextmanager
def _stage(name):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class NetworkConfig:
    hidden_width: int | None = None  # None -> twice the data dimension
    n_groups: int = 2
    activation: str = "abs"


@dataclass
class ExperimentConfig:
    """Full sweep description; desk-scale defaults."""

    n: int = 5
    seg_len: int = 512
    depths: list = field(default_factory=lambda: [1, 2])
    segment_counts: list = field(default_factory=lambda: [8, 32, 128])
    repeats: int = 5
    family: str = "laplacian"
    methods: list = field(default_factory=lambda: list(METHODS))
    base_seed: int = 0
    output_dir: str = "runs"
    lambda_min: float = 0.1
    leaky_slope: float = 0.2
    cond_bound: float = 1e4
    stationary_count: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    ica: IcaConfig = field(default_factory=IcaConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    chance_epochs: int | None = None  # None -> train.epochs

    def __post_init__(self):
        if not self.depths or not self.segment_counts:
            raise ValueError("depths and segment_counts must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"unknown method {method!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig(**d["train"])
        if isinstance(d.get("ica"), dict):
            d["ica"] = IcaConfig(**d["ica"])
        if isinstance(d.get("network"), dict):
            d["network"] = NetworkConfig(**d["network"])
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


def _write_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def cell_seeds(base_seed, depth, segments, repeat):
    """Five stage seeds (data, init, train, ica, chance) for one cell.

    The data seed depends only on (base_seed, depth, segments, repeat), so
    every method sees the same dataset at the same grid point.
    """
    ss = np.random.SeedSequence([base_seed, depth, segments, repeat])
    rng = np.random.default_rng(ss)
    return [int(s) for s in rng.integers(0, 2**62, size=5)]


def _layer_sizes(cfg, depth):
    width = cfg.network.hidden_width or 2 * cfg.n
    return [cfg.n] + [width] * (depth - 1) + [cfg.n]


def run_pipeline(cfg, depth, segments, repeat, method, cell_dir=None):
    """Execute one grid cell and return its EvalReport.

    When cell_dir is given, persists config snapshot, report, and for the
    tcl method the checkpoint and training CSV.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    seeds = cell_seeds(cfg.base_seed, depth, segments, repeat)
    if cell_dir is not None:
        cell_dir = Path(cell_dir)
        cell_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "cell": {
                "depth": depth,
                "segments": segments,
                "seed": repeat,
                "method": method,
            },
            "stage_seeds": seeds,
            "experiment": cfg.to_dict(),
        }
        _write_atomic(
            cell_dir / "config.json", json.dumps(snapshot, indent=2, sort_keys=True)
        )

    with _stage("datagen"):
        data = make_dataset(
            cfg.n,
            segments,
            cfg.seg_len,
            depth,
            family=FamilySpec(cfg.family),
            lambda_min=cfg.lambda_min,
            leaky_slope=cfg.leaky_slope,
            cond_bound=cfg.cond_bound,
            stationary_count=cfg.stationary_count,
            seed=seeds[0],
        )
        q_true = true_q_values(data.sources, data.family)

    if method == "tcl":
        with _stage("train"):
            sizes = _layer_sizes(cfg, depth)
            model0 = init_params(
                sizes,
                segments,
                n_groups=cfg.network.n_groups,
                activation=cfg.network.activation,
                seed=seeds[1],
            )
            tcfg = replace(cfg.train, seed=seeds[2])
            model, history = train_tcl(data.observations, model0, tcfg)
        with _stage("ica"):
            h = features_forward(data.observations.values, model.features)
            ica_result = fastica(h, replace(cfg.ica, seed=seeds[3]))
        with _stage("evaluate"):
            assignment, matched = match_components(q_true, ica_result.components)
            affine = affine_identifiability_check(q_true, h)
            chance_model = init_params(
                sizes,
                segments,
                n_groups=cfg.network.n_groups,
                activation=cfg.network.activation,
                seed=seeds[4],
            )
            ccfg = replace(tcfg, epochs=cfg.chance_epochs or tcfg.epochs)
            chance = chance_level(data.observations, chance_model, ccfg)
            report = EvalReport(
                mean_abs_corr=float(matched.mean()),
                per_component_corr=matched.tolist(),
                assignment=assignment.tolist(),
                classification_accuracy=history.holdout_accuracy,
                chance_level=chance,
                affine_r2=affine.r2.tolist(),
                affine_cond=affine.cond,
            )
        if cell_dir is not None:
            save_model(model, cell_dir / "checkpoint")
            write_history_csv(history, cell_dir / "training.csv")
    else:
        with _stage("ica"):
            ica_result = nsvica(
                data.observations.values, data.observations.labels
            )
            # baseline estimates are compared through their absolute values,
            # mirroring the sign convention of the learned-feature route
            estimates = np.abs(ica_result.components)
        with _stage("evaluate"):
            assignment, matched = match_components(q_true, estimates)
            report = EvalReport(
                mean_abs_corr=float(matched.mean()),
                per_component_corr=matched.tolist(),
                assignment=assignment.tolist(),
            )

    if cell_dir is not None:
        _write_atomic(cell_dir / "report.json", report.to_json())
    return report


def _cell_name(depth, segments, repeat, method):
    return f"{method}_L{depth}_T{segments}_r{repeat}"


def _sweep_cell(cfg_dict, depth, segments, repeat, method, cell_dir):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    report = run_pipeline(cfg, depth, segments, repeat, method, cell_dir=cell_dir)
    return asdict(report)


def _row_from_report(depth, segments, repeat, method, report):
    return {
        "depth": depth,
        "segments": segments,
        "seed": repeat,
        "mean_abs_corr": report["mean_abs_corr"],
        "accuracy": report["classification_accuracy"],
        "chance": report["chance_level"],
        "method": method,
    }


def write_sweep_csv(rows, path):
    """Aggregate CSV with the fixed column order of CSV_COLUMNS."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("accuracy", "chance"):
                if out[key] is None:
                    out[key] = ""
            writer.writerow(out)
    os.replace(tmp, path)


def load_sweep_csv(path):
    """Inverse of write_sweep_csv; blanks come back as None."""
    rows = []
    with Path(path).open() as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    "depth": int(raw["depth"]),
                    "segments": int(raw["segments"]),
                    "seed": int(raw["seed"]),
                    "mean_abs_corr": float(raw["mean_abs_corr"]),
                    "accuracy": float(raw["accuracy"]) if raw["accuracy"] else None,
                    "chance": float(raw["chance"]) if raw["chance"] else None,
                    "method": raw["method"],
                }
            )
    return rows


def _aggregate(rows):
    cells = {}
    for row in rows:
        key = (row["method"], row["depth"], row["segments"])
        cells.setdefault(key, []).append(row)
    aggregates = {}
    for (method, depth, segments), group in sorted(cells.items()):
        corr = np.array([g["mean_abs_corr"] for g in group])
        acc = [g["accuracy"] for g in group if g["accuracy"] is not None]
        chance = [g["chance"] for g in group if g["chance"] is not None]
        stderr = float(corr.std(ddof=1) / np.sqrt(len(corr))) if len(corr) > 1 else 0.0
        aggregates[f"{method}_L{depth}_T{segments}"] = {
            "method": method,
            "depth": depth,
            "segments": segments,
            "count": len(group),
            "mean_abs_corr_mean": float(corr.mean()),
            "mean_abs_corr_stderr": stderr,
            "accuracy_mean": float(np.mean(acc)) if acc else None,
            "chance_mean": float(np.mean(chance)) if chance else None,
        }
    return aggregates


def run_sweep(cfg, workers=None):
    """Run the full grid; returns the list of per-cell rows.

    Cells whose report.json already exists are loaded, not recomputed.
    Failures are recorded per cell in error.json and the sweep continues.
    Worker-pool size comes from the TCL_ICA_WORKERS environment variable
    unless given explicitly.
    """
    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))

    grid = [
        (depth, segments, repeat, method)
        for depth in cfg.depths
        for segments in cfg.segment_counts
        for repeat in range(cfg.repeats)
        for method in cfg.methods
    ]
    pending, rows, errors = [], [], []
    for depth, segments, repeat, method in grid:
        cell_dir = out_root / _cell_name(depth, segments, repeat, method)
        report_path = cell_dir / "report.json"
        if report_path.exists():
            report = json.loads(report_path.read_text())
            rows.append(_row_from_report(depth, segments, repeat, method, report))
        else:
            pending.append((depth, segments, repeat, method, cell_dir))

    def record_failure(cell_dir, depth, segments, repeat, method, exc):
        message = f"{type(exc).__name__}: {exc}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(
            cell_dir / "error.json",
            json.dumps(
                {
                    "depth": depth,
                    "segments": segments,
                    "seed": repeat,
                    "method": method,
                    "error": message,
                    "traceback": traceback.format_exc(),
                },
                indent=2,
            ),
        )
        errors.append({"cell": _cell_name(depth, segments, repeat, method), "error": message})

    if workers > 1 and pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(
                    _sweep_cell, cfg.to_dict(), depth, segments, repeat, method, str(cell_dir)
                ): (depth, segments, repeat, method, cell_dir)
                for depth, segments, repeat, method, cell_dir in pending
            }
            for future, (depth, segments, repeat, method, cell_dir) in futures.items():
                try:
                    report = future.result()
                    rows.append(_row_from_report(depth, segments, repeat, method, report))
                except Exception as exc:
                    record_failure(cell_dir, depth, segments, repeat, method, exc)
    else:
        for depth, segments, repeat, method, cell_dir in pending:
            try:
                report = _sweep_cell(
                    cfg.to_dict(), depth, segments, repeat, method, str(cell_dir)
                )
                rows.append(_row_from_report(depth, segments, repeat, method, report))
            except Exception as exc:
                record_failure(cell_dir, depth, segments, repeat, method, exc)

    rows.sort(key=lambda r: (r["method"], r["depth"], r["segments"], r["seed"]))
    write_sweep_csv(rows, out_root / "sweep.csv")
    summary = {"cells": rows, "aggregates": _aggregate(rows), "errors": errors}
    _write_atomic(out_root / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return rows


def generate_dataset_cli(params, out_dir):
    """Generate and persist one dataset from a flat parameter dict."""
    data = make_dataset(
        n=params.get("n", 5),
        n_segments=params.get("segments", 32),
        seg_len=params.get("seg_len", 512),
        depth=params.get("depth", 1),
        family=FamilySpec(params.get("family", "laplacian")),
        lambda_min=params.get("lambda_min", 0.1),
        leaky_slope=params.get("leaky_slope", 0.2),
        cond_bound=params.get("cond_bound", 1e4),
        stationary_count=params.get("stationary_count", 0),
        seed=params.get("seed", 0),
    )
    save_dataset(data, out_dir)
    return data
