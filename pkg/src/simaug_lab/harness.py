"""Experiment plumbing: configs, run directories, method comparisons and ablations.

An experiment config is a JSON object::

    {
      "dataset": {...},            # world/dataset overrides, see world.DEFAULT_CONFIG
      "dataset_seed": 0,
      "model": {"hidden_size": 32, "mlp_hidden": 32, "decoder_input": "context"},
      "aug": {"mode": "simaug", "alpha": 0.2, "eps": 0.1, "delta": 0.1, "pgd_iters": 10,
              "no_noise": false, "no_attack": false, "random_view": false,
              "reuse_noise": false, "drop_views": []},
      "optimizer": {"learning_rate": 0.3, "adadelta_eps": 1e-6, "weight_decay": 0.001,
                    "batch_size": 16, "n_steps": 2000},
      "seeds": [0, 1, 2, 3, 4],
      "eval": {"K": 1, "seed": 0}
    }

Missing keys take the defaults above. A (config, seed) pair fixes a run
completely; the config hash is the SHA-256 of its canonical JSON.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import statistics
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .estimator import TrajectoryForecaster
from .metrics import EvalReport, evaluate, format_float, reports_to_csv
from .world import generate_dataset, load_dataset, merge_config, save_dataset

DEFAULT_EXPERIMENT = {
    "dataset": {},
    "dataset_seed": 0,
    "model": {"hidden_size": 32, "mlp_hidden": 32, "decoder_input": "context"},
    "aug": {
        "mode": "simaug",
        "alpha": 0.2,
        "eps": 0.1,
        "delta": 0.1,
        "pgd_iters": 10,
        "no_noise": False,
        "no_attack": False,
        "random_view": False,
        "reuse_noise": False,
        "drop_views": [],
    },
    "optimizer": {"learning_rate": 0.3, "adadelta_eps": 1e-6, "weight_decay": 0.001, "batch_size": 16,
                  "n_steps": 2000},
    "seeds": [0, 1, 2, 3, 4],
    "eval": {"K": 1, "seed": 0},
}

COMPARE_METHODS = ("none", "standard", "fgsm", "pgd", "simaug")
METHOD_LABELS = {
    "none": "Base Model",
    "standard": "Standard Aug",
    "fgsm": "FGSM",
    "pgd": "PGD",
    "simaug": "SimAug",
}
# ablation name -> overrides of the "aug" section
ABLATIONS = {
    "simaug": {},
    "no-top-view": {"drop_views": ["top"]},
    "no-noise": {"no_noise": True},
    "no-attack": {"no_attack": True},
    "random-view": {"random_view": True},
}
THREADS_ENV = "SIMAUG_LAB_THREADS"


class ConfigError(ValueError):
    """Unreadable or malformed experiment config."""


def merge_experiment(overrides: dict | None) -> dict:
    """Deep-merge ``overrides`` onto the defaults (one nesting level)."""
    cfg = json.loads(json.dumps(DEFAULT_EXPERIMENT))
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and key != "dataset":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def load_experiment(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return merge_experiment(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def version_stamp() -> str:
    """Package version plus the git revision when run from a checkout."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def estimator_from_config(cfg: dict, seed: int) -> TrajectoryForecaster:
    aug = cfg["aug"]
    return TrajectoryForecaster(
        hidden_size=int(cfg["model"]["hidden_size"]),
        mlp_hidden=int(cfg["model"]["mlp_hidden"]),
        decoder_input=cfg["model"]["decoder_input"],
        aug=aug["mode"],
        alpha=float(aug["alpha"]),
        eps=float(aug["eps"]),
        delta=float(aug["delta"]),
        pgd_iters=int(aug["pgd_iters"]),
        no_noise=bool(aug["no_noise"]),
        no_attack=bool(aug["no_attack"]),
        random_view=bool(aug["random_view"]),
        reuse_noise=bool(aug["reuse_noise"]),
        drop_views=tuple(aug["drop_views"]),
        learning_rate=float(cfg["optimizer"]["learning_rate"]),
        adadelta_eps=float(cfg["optimizer"]["adadelta_eps"]),
        weight_decay=float(cfg["optimizer"]["weight_decay"]),
        batch_size=int(cfg["optimizer"]["batch_size"]),
        n_steps=int(cfg["optimizer"]["n_steps"]),
        random_state=int(seed),
    )


def build_datasets(cfg: dict, data_dir=None) -> dict:
    """Load ``train``/``test`` from ``data_dir`` or generate them from the config."""
    if data_dir is not None:
        root = Path(data_dir)
        return {split: load_dataset(root / split) for split in ("train", "test")}
    return generate_dataset(cfg["dataset"], int(cfg["dataset_seed"]))


def write_dataset_dir(datasets: dict, out) -> dict:
    """Save both splits under ``out`` and return their directory digests."""
    from .world import directory_digest

    out = Path(out)
    digests = {}
    for split, ds in datasets.items():
        save_dataset(ds, out / split)
        digests[split] = directory_digest(out / split)
    (out / "digest.json").write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n")
    return digests


def loss_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "total", "cls", "reg"])
    for e in curve:
        w.writerow([e["step"], format_float(e["total"]), format_float(e["cls"]), format_float(e["reg"])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# single runs


def train_run(cfg: dict, seed: int, datasets: dict, out_dir=None, log_every: int = 0,
              checkpoint_every: int = 0) -> TrajectoryForecaster:
    """Train one model; with ``out_dir`` also write config, checkpoint, loss CSV and run record."""
    est = estimator_from_config(cfg, seed)
    est.log_every = log_every
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        if checkpoint_every:
            est.checkpoint_every = checkpoint_every
            est.checkpoint_path = str(out / "model.ckpt")
    start = time.perf_counter()
    est.fit(datasets["train"])
    if out_dir is not None:
        est.save(out / "model.ckpt")
        (out / "loss.csv").write_text(loss_csv(est.loss_curve_))
        record = {
            "config_hash": config_hash(cfg),
            "seed": int(seed),
            "version": version_stamp(),
            "wall_time": time.perf_counter() - start,
            "steps": len(est.loss_curve_),
            "final_loss": est.loss_curve_[-1] if est.loss_curve_ else None,
        }
        (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return est


def eval_run(est_or_model, dataset, cfg: dict, method: str, seed: int, out_dir=None, name=None) -> EvalReport:
    model = getattr(est_or_model, "model_", est_or_model)
    report = evaluate(model, dataset, K=int(cfg["eval"]["K"]), seed=int(cfg["eval"]["seed"]), method=method,
                      name=name)
    report.seed = int(seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.csv").write_text(reports_to_csv([report]))
        rec_path = out / "run.json"
        if rec_path.exists():
            rec = json.loads(rec_path.read_text())
            rec["report"] = report.row()
            rec_path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# grids of runs


def _cell(args):
    cfg, method, seed, datasets, out_dir = args
    est = train_run(cfg, seed, datasets, out_dir)
    return eval_run(est, datasets["test"], cfg, method, seed, out_dir)


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_grid(cells: list[tuple[dict, str, int]], datasets: dict, out_dir=None) -> list[EvalReport]:
    """Train and evaluate every ``(config, method, seed)`` cell; results keep the input order."""
    jobs = []
    for cfg, method, seed in cells:
        cdir = None if out_dir is None else Path(out_dir) / "cells" / f"{method}-s{seed}"
        jobs.append((cfg, method, seed, datasets, cdir))
    workers = min(_workers(), len(jobs)) if jobs else 1
    if workers <= 1:
        return [_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, jobs))


def _with_aug(cfg: dict, **aug) -> dict:
    out = json.loads(json.dumps(cfg))
    out["aug"].update(aug)
    return out


def compare(cfg: dict, datasets: dict | None = None, out_dir=None, methods=COMPARE_METHODS) -> list[EvalReport]:
    """Train every method on the same data and seeds; write ``runs.csv`` and ``table.csv``."""
    datasets = build_datasets(cfg) if datasets is None else datasets
    cells = [(_with_aug(cfg, mode=m), m, int(s)) for m in methods for s in cfg["seeds"]]
    reports = run_grid(cells, datasets, out_dir)
    if out_dir is not None:
        write_tables(out_dir, reports, list(methods), [int(s) for s in cfg["seeds"]], kind="compare", cfg=cfg)
    return reports


def ablate(cfg: dict, datasets: dict | None = None, out_dir=None, names=tuple(ABLATIONS)) -> list[EvalReport]:
    """Full multi-view augmentation and its four ablations across the seeds."""
    datasets = build_datasets(cfg) if datasets is None else datasets
    cells = [(_with_aug(cfg, mode="simaug", **ABLATIONS[n]), n, int(s)) for n in names for s in cfg["seeds"]]
    reports = run_grid(cells, datasets, out_dir)
    if out_dir is not None:
        write_tables(out_dir, reports, list(names), [int(s) for s in cfg["seeds"]], kind="ablate", cfg=cfg)
    return reports


def medians(reports: list[EvalReport], method: str) -> dict:
    rs = [r for r in reports if r.method == method]
    return {
        "Grid_Acc": statistics.median(r.grid_acc for r in rs),
        "minADE": statistics.median(r.min_ade for r in rs),
        "minFDE": statistics.median(r.min_fde for r in rs),
    }


def comparison_table(reports, methods) -> str:
    """One row per method: median Grid_Acc / minADE / minFDE over seeds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "label", "n_seeds", "Grid_Acc", "minADE", "minFDE"])
    for m in methods:
        med = medians(reports, m)
        n = sum(r.method == m for r in reports)
        w.writerow([m, METHOD_LABELS.get(m, m), n, format_float(med["Grid_Acc"]), format_float(med["minADE"]),
                    format_float(med["minFDE"])])
    return buf.getvalue()


def ablation_table(reports, names, seeds) -> str:
    """One row per variant, a minADE and a minFDE column per seed, plus medians."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"minADE_s{s}" for s in seeds] + [f"minFDE_s{s}" for s in seeds]
               + ["minADE_median", "minFDE_median"])
    for n in names:
        by_seed = {r.seed: r for r in reports if r.method == n}
        med = medians(reports, n)
        w.writerow([n] + [format_float(by_seed[s].min_ade) for s in seeds]
                   + [format_float(by_seed[s].min_fde) for s in seeds]
                   + [format_float(med["minADE"]), format_float(med["minFDE"])])
    return buf.getvalue()


def write_tables(out_dir, reports, methods, seeds, kind: str, cfg: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out / "runs.csv").write_text(reports_to_csv(reports))
    table = comparison_table(reports, methods) if kind == "compare" else ablation_table(reports, methods, seeds)
    (out / "table.csv").write_text(table)
    (out / "manifest.json").write_text(json.dumps(
        {"kind": kind, "config_hash": config_hash(cfg), "version": version_stamp(), "methods": list(methods),
         "seeds": list(seeds), "dataset": merge_config(cfg["dataset"]).get("grid")},
        indent=2, sort_keys=True) + "\n")
