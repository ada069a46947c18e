"""Experiment grid execution: scenario setup, per-cell runs, CSV/JSON reports.

A grid is the cross product of source sampling seeds and target distribution
seeds (3 x 3 by default, matching the nine-run error bars); every cell
resynthesizes nothing, splits deterministically, trains the source head, runs
federated adaptation, and reports MARs plus gap deltas. Reruns of the same
resolved config are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .federation import FedConfig, run_adaptation, select_best
from .feature_store import (
    FeatureDataset,
    SynthSpec,
    generate_synthetic,
    identity_transform,
    read_fedf,
    rotation_transform,
)
from .metrics_costs import evaluate_mar
from .partitioner import ImbalanceProfile, build_partition_plan
from .source_trainer import SourceConfig, train_source

SCENARIO_TAGS = ("sbtb", "sbti", "sitb", "siti")

DEFAULT_CONFIG = {
    "data": {
        "kind": "synthetic",          # synthetic | fedf
        "dim": 64,
        "classes": 10,
        "separability": 1.0,
        "noise": 0.28,
        "rotation_degrees": 30.0,     # domain gap used in the "da" setting
        "rotation_seed": 5,
        "source_per_class": 60,
        "target_per_class": 150,
        "eval_per_class": 100,
        "mean_seed": 7,
        "source_path": None,          # fedf mode only
        "target_path": None,
    },
    "scenario": {
        "setting": "da",              # da | tl
        "tag": "sbti",                # sbtb | sbti | sitb | siti
    },
    "partition": {
        "clients": 3,
        "alpha": 0.5,
        "take_fraction": 0.6,
        "test_fraction": 0.2,
        "source_ratios": [10, 20, 50],  # longtail ratio per source seed index
        "class_order_seed": 0,
    },
    "source": {
        "epochs": 40,
        "batch_size": 64,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 1e-3,
        "label_smoothing": 0.1,
        "balanced_sampling": False,
        "bottleneck_dim": 256,
    },
    "federation": {
        "rounds": 10,
        "local_epochs": 5,
        "aggregation": "fedavg",
        "mu": 0.1,
        "sfda_method": "shot",
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "batch_size": 64,
        "ce_weight": 0.3,
        "isfda_margin": 0.2,
        "knn_k": 3,
        "aad_beta": 1.0,
        "nrc_discount": 0.1,
        "lr_schedule": "constant",
        "average_bn_stats": True,
        "weighted_selection": True,
        "parallel_clients": False,
    },
    "grid": {
        "source_seeds": [0, 1, 2],
        "target_seeds": [0, 1, 2],
    },
    "output_dir": "runs/grid",
}


def resolve_config(user: dict | None) -> dict:
    """Deep-merge a user config over the defaults; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(base, override, path):
        for key, value in override.items():
            if key not in base:
                raise ValueError(f"unknown config key {'.'.join(path + [key])!r}")
            if isinstance(base[key], dict) and isinstance(value, dict):
                merge(base[key], value, path + [key])
            else:
                base[key] = value

    if user:
        merge(cfg, user, [])
    if cfg["scenario"]["tag"] not in SCENARIO_TAGS:
        raise ValueError(f"scenario tag must be one of {SCENARIO_TAGS}")
    if cfg["scenario"]["setting"] not in ("da", "tl"):
        raise ValueError("scenario setting must be 'da' or 'tl'")
    return cfg


@dataclass
class GridData:
    source_pool: FeatureDataset
    target_pool: FeatureDataset
    source_eval: FeatureDataset | None
    model_tag: str


def load_grid_data(cfg: dict) -> GridData:
    """Materialize the source/target pools and a balanced source-domain eval set."""
    data = cfg["data"]
    if data["kind"] == "fedf":
        if not data["source_path"] or not data["target_path"]:
            raise ValueError("fedf data needs source_path and target_path")
        source = read_fedf(data["source_path"])
        target = read_fedf(data["target_path"])
        tag = os.path.splitext(os.path.basename(data["source_path"]))[0]
        return GridData(source, target, None, tag)
    if data["kind"] != "synthetic":
        raise ValueError(f"unknown data kind {data['kind']!r}")
    dim, classes = data["dim"], data["classes"]
    mean_seed = data["mean_seed"]
    if cfg["scenario"]["setting"] == "da":
        transform = rotation_transform(
            dim, data["rotation_degrees"], seed=data["rotation_seed"]
        )
    else:
        transform = identity_transform(dim)
    base = dict(
        dim=dim, num_classes=classes, separability=data["separability"],
        noise=data["noise"], mean_seed=mean_seed,
    )
    source_spec = SynthSpec.make(**base, draw_seed=mean_seed * 1000 + 11)
    target_spec = SynthSpec.make(**base, draw_seed=mean_seed * 1000 + 22, transform=transform)
    eval_spec = SynthSpec.make(**base, draw_seed=mean_seed * 1000 + 33)
    return GridData(
        source_pool=generate_synthetic(source_spec, [data["source_per_class"]] * classes, "source"),
        target_pool=generate_synthetic(target_spec, [data["target_per_class"]] * classes, "target"),
        source_eval=generate_synthetic(eval_spec, [data["eval_per_class"]] * classes, "source-eval"),
        model_tag=f"synth-sep{data['separability']:g}",
    )


def _source_profile(cfg: dict, source_index: int, source_seed: int) -> ImbalanceProfile:
    if cfg["scenario"]["tag"][1] == "b":
        return ImbalanceProfile("balanced")
    ratios = cfg["partition"]["source_ratios"]
    ratio = ratios[source_index % len(ratios)]
    return ImbalanceProfile(
        "longtail", ratio=float(ratio),
        class_order_seed=cfg["partition"]["class_order_seed"] + source_seed,
    )


@dataclass
class CellResult:
    scenario: str
    setting: str
    method: str
    aggregation: str
    model: str
    source_seed: int
    target_seed: int
    source_ratio: float
    source_mar: float
    source_only_mar: float
    target_mar: float
    s2t_diff_pp: float
    best_val_mar: float
    best_round: int
    bytes_total: int
    history: list = field(default_factory=list)
    error: str = ""


def run_cell(data: GridData, cfg: dict, source_index: int, target_index: int) -> CellResult:
    """One grid cell: split, train the source head, adapt, evaluate."""
    part = cfg["partition"]
    scen = cfg["scenario"]
    source_seed = cfg["grid"]["source_seeds"][source_index]
    target_seed = cfg["grid"]["target_seeds"][target_index]
    profile = _source_profile(cfg, source_index, source_seed)
    plan = build_partition_plan(
        data.source_pool, data.target_pool, profile,
        take_fraction=part["take_fraction"], num_clients=part["clients"],
        alpha=part["alpha"], test_fraction=part["test_fraction"],
        source_seed=source_seed, target_seed=target_seed,
        target_mode="dirichlet" if scen["tag"][3] == "i" else "stratified",
    )
    # FedETF trains the dedicated fixed-prototype head from the source phase on
    classifier_mode = (
        "etf_fixed" if cfg["federation"]["aggregation"] == "fedetf" else "trainable"
    )
    scfg = SourceConfig(seed=source_seed, classifier_mode=classifier_mode,
                        **cfg["source"])
    head, _ = train_source(plan.source_train, plan.source_val, scfg)
    eval_set = data.source_eval if data.source_eval is not None else plan.source_val
    source_mar = evaluate_mar(head, eval_set)
    source_only_mar = evaluate_mar(head, plan.target_test)

    fed = cfg["federation"]
    fcfg = FedConfig(seed=target_seed, **fed)
    if fcfg.sfda_method == "source-only":
        best, history = head, []
        target_mar, best_round, bytes_total = source_only_mar, 0, 0
        best_val_mar = 0.0
    else:
        best, history = run_adaptation(plan, head, fcfg)
        target_mar = evaluate_mar(best, plan.target_test)
        best_round = select_best(history)
        bytes_total = sum(entry.bytes_transferred for entry in history)
        best_val_mar = history[best_round - 1].weighted_val_mar
    return CellResult(
        scenario=scen["tag"], setting=scen["setting"],
        method=fed["sfda_method"], aggregation=fed["aggregation"],
        model=data.model_tag, source_seed=source_seed, target_seed=target_seed,
        source_ratio=profile.ratio,
        source_mar=source_mar, source_only_mar=source_only_mar,
        target_mar=target_mar, s2t_diff_pp=100.0 * (target_mar - source_mar),
        best_val_mar=best_val_mar, best_round=best_round, bytes_total=bytes_total,
        history=[asdict(entry) for entry in history],
    )


_CSV_FIELDS = (
    "scenario", "setting", "method", "aggregation", "model",
    "source_seed", "target_seed", "source_ratio",
    "source_mar", "source_only_mar", "target_mar", "s2t_diff_pp",
    "best_val_mar", "best_round", "bytes_total", "error",
)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def write_reports(results, cfg, out_dir) -> None:
    """Per-cell JSON, a per-cell CSV, and a grouped mean/min/max summary CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    for res in results:
        cell_dir = os.path.join(out_dir, f"cell_s{res.source_seed}_t{res.target_seed}")
        os.makedirs(cell_dir, exist_ok=True)
        doc = asdict(res)
        history = doc.pop("history")
        with open(os.path.join(cell_dir, "result.json"), "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
        with open(os.path.join(cell_dir, "history.jsonl"), "w") as f:
            for entry in history:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for res in results:
            row = {k: _fmt(v) for k, v in asdict(res).items() if k in _CSV_FIELDS}
            writer.writerow(row)
    ok = [r for r in results if not r.error]
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "scenario", "setting", "method", "aggregation", "model", "runs",
            "target_mar_mean", "target_mar_min", "target_mar_max",
            "source_mar_mean", "s2t_diff_pp_mean",
        ])
        groups = {}
        for r in ok:
            key = (r.scenario, r.setting, r.method, r.aggregation, r.model)
            groups.setdefault(key, []).append(r)
        for key in sorted(groups):
            rows = groups[key]
            tmar = [r.target_mar for r in rows]
            writer.writerow([
                *key, len(rows),
                _fmt(float(np.mean(tmar))), _fmt(min(tmar)), _fmt(max(tmar)),
                _fmt(float(np.mean([r.source_mar for r in rows]))),
                _fmt(float(np.mean([r.s2t_diff_pp for r in rows]))),
            ])


def run_grid(user_cfg: dict | None = None, workers: int = 1, out_dir=None):
    """Execute every (source seed, target seed) cell; failures don't stop the grid.

    Returns (results, failure_count). Reports are written under the config's
    output_dir unless `out_dir` overrides it.
    """
    cfg = resolve_config(user_cfg)
    if out_dir is not None:
        cfg["output_dir"] = str(out_dir)
    data = load_grid_data(cfg)
    coords = [
        (i, j)
        for i in range(len(cfg["grid"]["source_seeds"]))
        for j in range(len(cfg["grid"]["target_seeds"]))
    ]

    def cell(coord):
        i, j = coord
        try:
            return run_cell(data, cfg, i, j)
        except Exception as exc:  # cell failures are recorded, not fatal
            return CellResult(
                scenario=cfg["scenario"]["tag"], setting=cfg["scenario"]["setting"],
                method=cfg["federation"]["sfda_method"],
                aggregation=cfg["federation"]["aggregation"], model=data.model_tag,
                source_seed=cfg["grid"]["source_seeds"][i],
                target_seed=cfg["grid"]["target_seeds"][j],
                source_ratio=0.0, source_mar=0.0, source_only_mar=0.0,
                target_mar=0.0, s2t_diff_pp=0.0, best_val_mar=0.0,
                best_round=0, bytes_total=0,
                error=f"{type(exc).__name__}: {exc}",
            )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cell, coords))
    else:
        results = [cell(c) for c in coords]
    write_reports(results, cfg, cfg["output_dir"])
    failures = sum(1 for r in results if r.error)
    return results, failures
