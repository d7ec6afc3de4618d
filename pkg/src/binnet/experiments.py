"""Task-suite evaluation and the inner-loop iteration grid.

A suite evaluates several methods (PO, RI, BIN, CBIN, Retrain) on a list of
tasks.  Metrics are computed on de-standardized predictions against raw
values; iteration counts are kept next to every metric.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import prior_only_batch, random_init_batch, retrain_specific
from .data import Dataset, TaskSuite, metrics
from .inference import InferenceOptions, infer_batch
from .model import BinModel
from .training import TrainConfig, Trainer

METHODS = ("PO", "RI", "BIN", "CBIN", "Retrain")


@dataclass
class TaskOutcome:
    method: str
    task: tuple[int, ...]
    label: str
    metric: float
    metric_kind: str
    iterations: float
    final_loss: float | None
    mode: str
    n: int

    def record(self) -> dict:
        rec = asdict(self)
        rec["task"] = " ".join(str(t) for t in self.task)
        return rec


@dataclass
class SuiteResult:
    outcomes: list[TaskOutcome] = field(default_factory=list)

    def get(self, method: str, task) -> TaskOutcome:
        task = tuple(task)
        for o in self.outcomes:
            if o.method == method and o.task == task:
                return o
        raise KeyError((method, task))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(o.method for o in self.outcomes))

    def labels(self) -> list[str]:
        return list(dict.fromkeys(o.label for o in self.outcomes))

    def write_table(self, path, extra: Mapping | None = None) -> None:
        """Wide table: one row per method, metric and mean iterations per task."""
        labels = self.labels()
        header = ["method"] + labels + [f"iters {lab}" for lab in labels]
        if extra:
            header += list(extra)
        by = {(o.method, o.label): o for o in self.outcomes}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for m in self.methods():
                row = [m]
                row += [_fmt(by[(m, lab)].metric) if (m, lab) in by else "" for lab in labels]
                row += [_fmt(by[(m, lab)].iterations) if (m, lab) in by else "" for lab in labels]
                if extra:
                    row += list(extra.values())
                w.writerow(row)

    def write_long(self, path, extra: Mapping | None = None) -> None:
        recs = [{**o.record(), **(extra or {})} for o in self.outcomes]
        _write_records(path, recs)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def _write_records(path, recs: Sequence[dict]) -> None:
    if not recs:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(recs[0]))
        w.writeheader()
        w.writerows(recs)


def _metric_on_raw(dataset: Dataset, kind: str, Vpred_std, Vraw, task) -> float:
    pred = dataset.raw_v(Vpred_std)[:, list(task)]
    return metrics(kind, pred, Vraw[:, list(task)])


def evaluate_model(model: BinModel, dataset: Dataset, task, method: str, kind: str,
                   opts: InferenceOptions | None = None, mode: str = "auto",
                   split: str = "test", seed: int = 0, rows=None) -> TaskOutcome:
    """One method on one task.  ``method`` is PO, RI, or any label for
    iterative inference with ``mode`` (e.g. BIN, CBIN)."""
    task = tuple(sorted(task))
    X, V = dataset.split(split, standardized=True)
    _, Vraw = dataset.split(split, standardized=False)
    if rows is not None:
        X, V, Vraw = X[rows], V[rows], Vraw[rows]
    Vin = V.copy()
    Vin[:, list(task)] = 0.0
    label = "{" + ",".join(dataset.names[t] for t in task) + "}"
    if method == "PO":
        Vp = prior_only_batch(model, X, Vin, task)
        return TaskOutcome(method, task, label, _metric_on_raw(dataset, kind, Vp, Vraw, task),
                           kind, 0.0, None, "prior", len(V))
    if method == "RI":
        res = random_init_batch(model, X, Vin, task, opts, seed=seed)
    else:
        res = infer_batch(model, X, Vin, task, mode, opts)
    return TaskOutcome(method, task, label, _metric_on_raw(dataset, kind, res.V, Vraw, task),
                       kind, float(np.mean(res.iterations)), float(np.mean(res.final_loss)),
                       res.mode, len(V))


def evaluate_retrain(dataset: Dataset, task, kind: str, cfg: TrainConfig, hidden=(64, 64),
                     activation: str = "relu", split: str = "test", rows=None) -> TaskOutcome:
    task = tuple(sorted(task))
    pred = retrain_specific(dataset, task, cfg, hidden, activation)
    X, V = dataset.split(split, standardized=True)
    _, Vraw = dataset.split(split, standardized=False)
    if rows is not None:
        X, V, Vraw = X[rows], V[rows], Vraw[rows]
    Vp = V.copy()
    Vp[:, list(task)] = pred.predict(X, V)
    label = "{" + ",".join(dataset.names[t] for t in task) + "}"
    return TaskOutcome("Retrain", task, label, _metric_on_raw(dataset, kind, Vp, Vraw, task),
                       kind, 0.0, None, "retrain", len(V))


def run_suite(dataset: Dataset, suite: TaskSuite, models: Mapping[str, BinModel],
              methods: Sequence[str] = METHODS, opts: InferenceOptions | None = None,
              mode: str = "auto", retrain_cfg: TrainConfig | None = None,
              hidden=(64, 64), activation: str = "relu", split: str = "test",
              seed: int = 0, rows=None) -> SuiteResult:
    """Evaluate ``methods`` on every task.

    PO and RI use the BIN model if present (else CBIN).  BIN/CBIN rows need
    the matching entry in ``models``; Retrain trains fresh networks and is the
    only method that trains anything.
    """
    out = SuiteResult()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if m in ("BIN", "CBIN") and m not in models:
            raise KeyError(f"no checkpoint for method row {m}")
    base = models.get("BIN") or models.get("CBIN")
    if base is None and any(m in ("PO", "RI") for m in methods):
        raise KeyError("PO and RI rows need a BIN or CBIN checkpoint")
    for m in methods:
        for task in suite.tasks:
            if m == "Retrain":
                out.outcomes.append(evaluate_retrain(
                    dataset, task, suite.metric, retrain_cfg or TrainConfig(seed=seed),
                    hidden, activation, split, rows))
            else:
                model = base if m in ("PO", "RI") else models[m]
                out.outcomes.append(evaluate_model(
                    model, dataset, task, m, suite.metric, opts, mode, split, seed, rows))
    return out


# ---------------------------------------------------------------------------
# (T_in, lambda_c) grid
# ---------------------------------------------------------------------------


@dataclass
class GridPoint:
    T_in: int
    lambda_c: float
    iterations: float
    metric: float
    metric_kind: str
    final_loss: float
    train_seconds: float

    def record(self) -> dict:
        return asdict(self)


def train_grid(dataset: Dataset, cfg: TrainConfig, T_in_values: Sequence[int],
               lambda_values: Sequence[float], hidden=(64, 64), activation: str = "relu",
               parents=None, seed: int | None = None) -> dict[tuple[int, float], BinModel]:
    """Models for every (T_in, lambda_c) pair sharing one warmup run.

    The warmup phase is identical for every grid point (same seed), so it is
    run once and the trainer state (parameters, Adam moments, RNG) is copied.
    ``lambda_c = 0`` points run plain maximum likelihood for the remaining
    ``T_t`` epochs, which is exactly BIN training.
    """
    X, V = dataset.split("train", standardized=True)
    variables = dataset.variables() if parents is None else parents
    model = BinModel.build(variables, dataset.feature_dim, hidden, activation=activation,
                           seed=cfg.seed if seed is None else seed)
    warm = Trainer(model, cfg)
    for _ in range(cfg.T_w):
        warm.warmup_epoch(X, V)
    out = {}
    for lam in lambda_values:
        for T_in in (T_in_values if lam > 0 else [None]):
            tr = copy.deepcopy(warm)
            tr.cfg = replace(cfg, lambda_c=float(lam), T_in=int(T_in or 0))
            t0 = time.perf_counter()
            for _ in range(cfg.T_t):
                if lam > 0:
                    tr.cbin_epoch(X, V)
                else:
                    tr.warmup_epoch(X, V)
            tr.model.meta["train_seconds"] = time.perf_counter() - t0
            keys = [(t, float(lam)) for t in T_in_values] if T_in is None else [(int(T_in), float(lam))]
            for k in keys:
                out[k] = tr.model
    return out


def iteration_grid(dataset: Dataset, suite: TaskSuite, models: Mapping[tuple[int, float], BinModel],
                   opts: InferenceOptions | None = None, split: str = "test",
                   rows=None) -> list[GridPoint]:
    """Mean general-inference iterations and mean metric over the suite's
    tasks for every grid model."""
    points = []
    for (T_in, lam), model in sorted(models.items()):
        its, mets, losses = [], [], []
        for task in suite.tasks:
            o = evaluate_model(model, dataset, task, "grid", suite.metric, opts, "general",
                               split, rows=rows)
            its.append(o.iterations)
            mets.append(o.metric)
            losses.append(o.final_loss)
        points.append(GridPoint(T_in, lam, float(np.mean(its)), float(np.mean(mets)),
                                suite.metric, float(np.mean(losses)),
                                float(model.meta.get("train_seconds", 0.0))))
    return points


def write_grid(path, points: Sequence[GridPoint], extra: Mapping | None = None) -> None:
    _write_records(path, [{**p.record(), **(extra or {})} for p in points])
