"""Displacement and grid-accuracy metrics for multi-hypothesis forecasts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

CSV_FIELDS = ("method", "seed", "dataset", "K", "Grid_Acc", "minADE", "minFDE")


def _check(truths, preds) -> tuple[np.ndarray, np.ndarray]:
    try:
        t = np.asarray(truths, dtype=np.float64)
        p = np.asarray(preds, dtype=np.float64)
    except ValueError:
        raise ValueError("ragged trajectories") from None
    if t.ndim != 3 or t.shape[-1] != 2:
        raise ValueError(f"truths must be (N, T-h, 2), got {t.shape}")
    if p.ndim == 3:
        p = p[:, None]
    if p.ndim != 4 or p.shape[0] != t.shape[0] or p.shape[2:] != t.shape[1:]:
        raise ValueError(f"predictions must be (N, K, T-h, 2) matching truths {t.shape}, got {p.shape}")
    if p.shape[1] < 1 or t.shape[1] < 1:
        raise ValueError("need K >= 1 and at least one future step")
    return t, p


def displacement(truths, preds) -> np.ndarray:
    """Per-step distances ``(N, K, T-h)``."""
    t, p = _check(truths, preds)
    return np.linalg.norm(p - t[:, None], axis=-1)


def min_ade_k(truths, preds) -> float:
    """Mean over samples of the smallest summed displacement, divided by the horizon.

    Parameters
    ----------
    truths : array, shape (N, T-h, 2)
    preds : array, shape (N, K, T-h, 2) or (N, T-h, 2) for K = 1
    """
    d = displacement(truths, preds)
    n, _, P = d.shape
    return float(d.sum(axis=2).min(axis=1).sum() / (n * P))


def min_fde_k(truths, preds) -> float:
    """Mean over samples of the smallest final-step displacement."""
    d = displacement(truths, preds)
    return float(d[:, :, -1].min(axis=1).mean())


def grid_acc(pred_dists, true_cells) -> float:
    """Fraction of (sample, step) pairs whose argmax cell is the true cell."""
    pred = np.asarray(pred_dists)
    cells = np.asarray(true_cells)
    if cells.shape == pred.shape:
        cells = np.argmax(cells, axis=-1)
    if pred.shape[:-1] != cells.shape:
        raise ValueError(f"distributions {pred.shape} do not match cells {cells.shape}")
    return float(np.mean(np.argmax(pred, axis=-1) == cells))


@dataclass
class EvalReport:
    """Metrics of one model on one split."""

    dataset: str
    K: int
    N: int
    grid_acc: float
    min_ade: float
    min_fde: float
    method: str = ""
    seed: int = 0
    per_sample: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "dataset": self.dataset,
            "K": self.K,
            "Grid_Acc": self.grid_acc,
            "minADE": self.min_ade,
            "minFDE": self.min_fde,
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    @classmethod
    def from_row(cls, row: dict) -> "EvalReport":
        return cls(
            dataset=row["dataset"],
            K=int(row["K"]),
            N=int(row.get("N", 0) or 0),
            grid_acc=float(row["Grid_Acc"]),
            min_ade=float(row["minADE"]),
            min_fde=float(row["minFDE"]),
            method=row["method"],
            seed=int(row["seed"]),
        )


def format_float(x: float) -> str:
    """Round-trippable text for a float."""
    return repr(float(x))


def reports_to_csv(reports, extra_fields=()) -> str:
    buf = io.StringIO()
    fields = list(CSV_FIELDS) + ["N"] + list(extra_fields)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        row["N"] = r.N
        for k in ("Grid_Acc", "minADE", "minFDE"):
            row[k] = format_float(row[k])
        w.writerow(row)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[EvalReport]:
    return [EvalReport.from_row(row) for row in csv.DictReader(io.StringIO(text))]


def evaluation_set(dataset, views: str = "all"):
    """Stack every (record, view) pair of ``dataset`` into model inputs.

    Returns features ``(M, h, rows, cols, K)``, observed cells ``(M, h, HW)``,
    future cells ``(M, P)`` and future pixels ``(M, P, 2)``.
    """
    grid, h = dataset.grid, dataset.h
    feats, obs, cells, fut = [], [], [], []
    for rec in dataset.records:
        idx = range(len(rec.views)) if views == "all" else [rec.original_view_index]
        for j in idx:
            v = rec.views[j]
            c = grid.cell_index(v.pixels)
            feats.append(v.features[:h])
            obs.append(grid.one_hot(c[:h]))
            cells.append(c[h:])
            fut.append(v.pixels[h:])
    return np.stack(feats), np.stack(obs), np.stack(cells), np.stack(fut)


def sample_cells_sampler(rng: np.random.Generator):
    """Temperature-1 sampling of one cell per row of a ``(N, HW)`` distribution."""

    def draw(probs):
        p = np.asarray(probs, dtype=np.float64)
        p = p / p.sum(axis=-1, keepdims=True)
        u = rng.random((p.shape[0], 1))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        return np.minimum(idx, p.shape[-1] - 1)

    return draw


def evaluate(model, dataset, K: int = 1, seed: int = 0, batch_size: int = 64, views: str = "all",
             method: str = "", name: str | None = None) -> EvalReport:
    """Decode every evaluation trajectory ``K`` times and score it.

    ``K = 1`` decodes greedily; larger ``K`` samples cells at temperature 1
    from a stream seeded by ``seed``. Grid accuracy always uses the greedy
    decode.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if (model.grid.cols, model.grid.rows) != (dataset.grid.cols, dataset.grid.rows) or \
            model.grid.image_size != dataset.grid.image_size:
        raise ValueError(f"model grid {model.grid} does not match dataset grid {dataset.grid}")
    feats, obs, cells, fut = evaluation_set(dataset, views)
    rng = np.random.default_rng(seed)
    probs_all, preds = [], []
    for lo in range(0, len(feats), batch_size):
        sl = slice(lo, lo + batch_size)
        greedy = model.predict(feats[sl], obs[sl])
        probs_all.append(greedy.probs)
        hyps = [greedy.locations]
        for _ in range(K - 1):
            hyps.append(model.predict(feats[sl], obs[sl], sampler=sample_cells_sampler(rng)).locations)
        preds.append(np.stack(hyps, axis=1))
    probs = np.concatenate(probs_all)
    pred = np.concatenate(preds)
    d = displacement(fut, pred)
    per = {
        "ade": (d.sum(axis=2).min(axis=1) / d.shape[2]).tolist(),
        "fde": d[:, :, -1].min(axis=1).tolist(),
    }
    return EvalReport(
        dataset=name or dataset.split,
        K=int(K),
        N=int(len(feats)),
        grid_acc=grid_acc(probs, cells),
        min_ade=min_ade_k(fut, pred),
        min_fde=min_fde_k(fut, pred),
        method=method,
        seed=int(seed),
        per_sample=per,
    )
