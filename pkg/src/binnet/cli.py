"""Batch command line: ``binnet {train,infer,suite,gen-data}``.

Every command reads one YAML experiment file.  Outputs embed a hash of the
resolved configuration (after command-line overrides such as ``--seed``), so
any artifact can be traced back to the exact settings that produced it.
Failures exit with status 2 and print a one-line JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .baselines import BaselineKind, prior_only_batch, random_init_batch
from .data import (
    DERM_TASKS,
    SHHS_TASKS,
    DataError,
    Dataset,
    TaskSuite,
    gen_gaussian_chain,
    gen_shhs_surrogate,
    gen_toy_line,
    load_dermatology,
    make_splits,
)
from .experiments import METHODS, iteration_grid, run_suite, train_grid, write_grid
from .inference import MODES, InferenceOptions, infer_batch
from .model import BinModel, VariableSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, bin_train, cbin_train

log = logging.getLogger("binnet")

EXIT_ERROR = 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_DATASET_KINDS = ("toy_line", "gaussian_chain", "shhs_surrogate", "dermatology", "csv")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {"kind": "toy_line"})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)
    output: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def validate(self) -> None:
        kind = self.dataset.get("kind")
        if kind not in _DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {_DATASET_KINDS}, got {kind!r}")
        if kind == "csv" and "path" not in self.dataset:
            raise ConfigError("csv datasets need dataset.path")
        act = self.model.get("activation", "relu")
        if act not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {act!r}")
        if any(int(h) < 1 for h in self.model.get("hidden", [64, 64])):
            raise ConfigError("hidden widths must be positive")
        method = self.train.get("method", "cbin")
        if method not in ("bin", "cbin"):
            raise ConfigError(f"train.method must be bin or cbin, got {method!r}")
        try:
            self.train_config()
            self.inference_options()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.model.get("hidden", [64, 64]))

    @property
    def activation(self) -> str:
        return self.model.get("activation", "relu")

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k != "method"}
        kw.setdefault("seed", self.seed)
        if kw.get("cl_subsets") is not None:
            kw["cl_subsets"] = [tuple(s) for s in kw["cl_subsets"]]
        return TrainConfig(**kw)

    def inference_options(self) -> InferenceOptions:
        return InferenceOptions(**self.inference)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = dict(cfg.dataset)
    kind = d.pop("kind")
    seed = int(d.pop("seed", cfg.seed))
    if kind == "toy_line":
        return gen_toy_line(int(d.get("m", 6)), seed, float(d.get("noise", 1.0)))
    if kind == "gaussian_chain":
        ds, _ = gen_gaussian_chain(int(d.get("n_vars", 3)), int(d.get("m", 1000)), seed,
                                   feature_dim=int(d.get("feature_dim", 2)))
        return ds
    if kind == "shhs_surrogate":
        return gen_shhs_surrogate(int(d.get("m", 2000)), seed, bool(d.get("independent", False)))
    if kind == "dermatology":
        return load_dermatology(d.get("path"), seed)
    return load_csv_dataset(d["path"], d.get("targets"), seed)


def load_csv_dataset(path, targets: Sequence[str] | None, seed: int) -> Dataset:
    """Header row required; ``targets`` names the V columns in chain order,
    every other column (except an optional ``split``) is a feature."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    if not targets:
        raise ConfigError("csv datasets need dataset.targets")
    missing = [t for t in targets if t not in header]
    if missing:
        raise ConfigError(f"target columns not in {path}: {missing}")
    feats = [h for h in header if h not in targets and h != "split"]
    try:
        X = np.array([[float(r[f]) for f in feats] for r in rows]).reshape(len(rows), len(feats))
        V = np.array([[float(r[t]) for t in targets] for r in rows])
    except (TypeError, ValueError):
        raise DataError(f"{path}: non-numeric or missing value") from None
    if "split" in header:
        lab = np.array([r["split"] for r in rows])
        splits = {s: np.flatnonzero(lab == s) for s in ("train", "val", "test")}
    else:
        splits = make_splits(len(rows), seed)
    return Dataset(X, V, list(targets), splits, feature_names=feats)


def model_variables(cfg: ExperimentConfig, ds: Dataset) -> list[VariableSpec]:
    """Chain over the dataset's targets unless ``model.parents`` overrides
    individual parent sets (by name)."""
    over = cfg.model.get("parents") or {}
    unknown = set(over) - set(ds.names)
    if unknown:
        raise ConfigError(f"model.parents references unknown variables {sorted(unknown)}")
    out = []
    for i, name in enumerate(ds.names):
        if name in over:
            try:
                ps = tuple(sorted(ds.names.index(p) for p in over[name]))
            except ValueError:
                raise ConfigError(f"unknown parent in model.parents[{name!r}]") from None
        else:
            ps = tuple(range(i))
        try:
            out.append(VariableSpec(name, i, ps, ds.kinds[i]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return out


def task_suite(cfg: ExperimentConfig, ds: Dataset) -> TaskSuite:
    s = cfg.suite
    metric = s.get("metric", "accuracy" if set(ds.kinds) == {"binary"} else "rmse")
    tasks = s.get("tasks")
    if tasks is None:
        kind = cfg.dataset["kind"]
        tasks = SHHS_TASKS if kind == "shhs_surrogate" else DERM_TASKS if kind == "dermatology" \
            else [tuple(range(j)) for j in range(1, ds.n_vars)]
    else:
        tasks = [tuple(sorted(parse_targets(t, ds.names))) for t in tasks]
    return TaskSuite(tuple(tuple(t) for t in tasks), metric, ds.n_vars)


def parse_targets(spec, names: Sequence[str]) -> list[int]:
    """Names or 0-based indices, as a list or a comma-separated string."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for it in items:
        it = str(it).strip()
        if it in names:
            out.append(names.index(it))
        elif it.isdigit() and int(it) < len(names):
            out.append(int(it))
        else:
            raise ConfigError(f"unknown variable {it!r}; known: {list(names)}")
    if not out:
        raise ConfigError("no target variables given")
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    ds = build_dataset(cfg)
    tcfg = cfg.train_config()
    method = cfg.train.get("method", "cbin")
    X, V = ds.split("train")
    val = ds.split("val")
    model = BinModel.build(model_variables(cfg, ds), ds.feature_dim, cfg.hidden,
                           activation=cfg.activation, seed=cfg.seed)
    t0 = time.perf_counter()
    report = (bin_train if method == "bin" else cbin_train)(model, X, V, tcfg, val)
    out = _out_dir(args, cfg)
    h = cfg.hash()
    model.meta.update({"config_hash": h, "method": method, "standardization": ds.standardization(),
                       "config": cfg.to_dict()})
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"{method}.ckpt"
    save_checkpoint(model, ckpt)
    report.write_jsonl(out / f"{method}_train_log.jsonl", {"config_hash": h, "method": method})
    summary = {"config_hash": h, "method": method, "checkpoint": str(ckpt),
               "final_joint_nll": report.joint_nll[-1] if report.joint_nll else None,
               "final_val_nll": report.val_nll[-1] if report.val_nll else None,
               "epochs": len(report.phase), "wall_clock": time.perf_counter() - t0}
    _atomic_write_text(out / f"{method}_summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def _load_model(path) -> BinModel:
    if not path:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(path)


def cmd_infer(args, cfg: ExperimentConfig) -> dict:
    ds = build_dataset(cfg)
    model = _load_model(args.checkpoint)
    if model.names != list(ds.names):
        raise ConfigError(f"checkpoint variables {model.names} do not match dataset {ds.names}")
    targets = parse_targets(args.targets, ds.names)
    opts = cfg.inference_options()
    X, V = ds.split(args.split)
    Vin = V.copy()
    Vin[:, targets] = 0.0
    if args.baseline:
        kind = BaselineKind.parse(args.baseline)
        if kind is BaselineKind.PRIOR_ONLY:
            Vp = prior_only_batch(model, X, Vin, targets)
            iters = np.zeros(len(V), dtype=int)
            loss = np.full(len(V), np.nan)
            mode = "prior_only"
        elif kind is BaselineKind.RANDOM_INIT:
            res = random_init_batch(model, X, Vin, targets, opts, seed=cfg.seed)
            Vp, iters, loss, mode = res.V, res.iterations, res.final_loss, "random_init"
        else:
            raise ConfigError("the retrain baseline is a suite method; use `binnet suite`")
    else:
        res = infer_batch(model, X, Vin, targets, args.mode, opts)
        Vp, iters, loss, mode = res.V, res.iterations, res.final_loss, res.mode
    raw = ds.raw_v(Vp)
    if args.out and args.out.endswith(".csv"):
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        path = _out_dir(args, cfg) / "predictions.csv"
    h = cfg.hash()
    idx = ds.splits[args.split]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [ds.names[t] for t in sorted(targets)]
                   + ["final_loss", "iterations_used", "mode", "config_hash"])
        for i in range(len(V)):
            w.writerow([int(idx[i])] + [f"{raw[i, t]:.10g}" for t in sorted(targets)]
                       + [f"{loss[i]:.10g}", int(iters[i]), mode, h])
    return {"config_hash": h, "predictions": str(path), "mode": mode, "rows": len(V),
            "mean_iterations": float(np.mean(iters))}


def _parse_checkpoints(items: Sequence[str] | None) -> dict[str, str]:
    """``--checkpoint BIN=path`` (repeatable); a bare path counts as CBIN if
    its stored method says so, else BIN."""
    out = {}
    for it in items or []:
        if "=" in it:
            k, v = it.split("=", 1)
            k = k.strip().upper()
            if k not in ("BIN", "CBIN"):
                raise ConfigError(f"checkpoint label must be BIN or CBIN, got {k!r}")
            out[k] = v
        else:
            meta = load_checkpoint(it).meta
            out["CBIN" if meta.get("method") == "cbin" else "BIN"] = it
    return out


def cmd_suite(args, cfg: ExperimentConfig) -> dict:
    ds = build_dataset(cfg)
    suite = task_suite(cfg, ds)
    opts = cfg.inference_options()
    ck = _parse_checkpoints(args.checkpoint)
    models = {k: load_checkpoint(v) for k, v in ck.items()}
    methods = cfg.suite.get("methods")
    if methods is None:
        methods = [m for m in METHODS if m in models or m in ("PO", "RI")]
        if args.baseline:
            methods = [m for m in methods if m in models] + [
                {"prior_only": "PO", "random_init": "RI", "retrain": "Retrain"}[
                    BaselineKind.parse(args.baseline).value]]
    rows = None
    limit = cfg.suite.get("max_rows")
    if limit is not None:
        rows = np.arange(min(int(limit), len(ds.splits[cfg.suite.get("split", "test")])))
    out = _out_dir(args, cfg)
    h = cfg.hash()
    result = run_suite(ds, suite, models, methods, opts, args.mode, cfg.train_config(),
                       cfg.hidden, cfg.activation, cfg.suite.get("split", "test"), cfg.seed, rows)
    result.write_table(out / "table.csv", {"config_hash": h})
    result.write_long(out / "results.csv", {"config_hash": h})
    summary = {"config_hash": h, "table": str(out / "table.csv"), "methods": list(methods)}
    grid = cfg.suite.get("grid")
    if grid:
        tcfg = cfg.train_config()
        gmodels = train_grid(ds, tcfg, grid.get("T_in", [0, 1, 2, 4, 8]),
                             grid.get("lambda_c", [tcfg.lambda_c or 1.0]),
                             cfg.hidden, cfg.activation, model_variables(cfg, ds), cfg.seed)
        points = iteration_grid(ds, suite, gmodels, opts, cfg.suite.get("split", "test"), rows)
        write_grid(out / "grid.csv", points, {"config_hash": h})
        summary["grid"] = str(out / "grid.csv")
    return summary


def cmd_gen_data(args, cfg: ExperimentConfig) -> dict:
    ds = build_dataset(cfg)
    out = Path(args.out) if args.out else Path(cfg.output) / cfg.name / "data.csv"
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "data.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    split = np.empty(len(ds.V), dtype=object)
    for name, idx in ds.splits.items():
        split[idx] = name
    fnames = ds.feature_names or [f"x{i + 1}" for i in range(ds.feature_dim)]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fnames + list(ds.names) + ["split"])
        for i in range(len(ds.V)):
            w.writerow([f"{v:.10g}" for v in ds.X[i]] + [f"{v:.10g}" for v in ds.V[i]] + [split[i]])
    return {"config_hash": cfg.hash(), "data": str(out), "rows": len(ds.V)}


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "suite": cmd_suite, "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (or file for infer/gen-data)")
        if name in ("train", "infer"):
            sp.add_argument("--checkpoint", help="checkpoint to write (train) or read (infer)")
        if name == "suite":
            sp.add_argument("--checkpoint", action="append",
                            help="BIN=path or CBIN=path; repeatable")
        if name in ("infer", "suite"):
            sp.add_argument("--mode", choices=MODES, default="auto")
            sp.add_argument("--baseline", choices=[k.value for k in BaselineKind])
        if name == "infer":
            sp.add_argument("--targets", required=True, help="comma-separated target names")
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    return p


def _error_record(command: str, exc: BaseException) -> dict:
    return {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every failure becomes a machine-readable record
        log.debug("command failed", exc_info=True)
        print(json.dumps(_error_record(args.command, exc)), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
