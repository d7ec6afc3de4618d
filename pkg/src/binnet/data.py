"""Datasets, preprocessing, task suites and metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import VariableSpec

DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


def make_splits(m: int, seed: int, ratios=DEFAULT_RATIOS) -> dict[str, np.ndarray]:
    """Seeded disjoint train/val/test index sets covering range(m)."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(m)
    n_train = int(round(ratios[0] * m))
    n_val = int(round(ratios[1] * m))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _stats(a: np.ndarray):
    if a.shape[0] == 0:
        return np.zeros(a.shape[1]), np.ones(a.shape[1])
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


@dataclass
class Dataset:
    """Raw features ``X`` (M, D) and targets ``V`` (M, N) with train-split
    standardization statistics."""

    X: np.ndarray
    V: np.ndarray
    names: list[str]
    splits: dict[str, np.ndarray]
    kinds: list[str] | None = None
    feature_names: list[str] | None = None
    x_mean: np.ndarray = field(init=False)
    x_std: np.ndarray = field(init=False)
    v_mean: np.ndarray = field(init=False)
    v_std: np.ndarray = field(init=False)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.V), -1)
        self.V = np.asarray(self.V, dtype=np.float64)
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.V))):
            raise DataError("non-finite entries in dataset")
        if self.V.shape[1] != len(self.names):
            raise DataError("one name per target column required")
        self.kinds = self.kinds or ["continuous"] * len(self.names)
        tr = self.splits["train"]
        self.x_mean, self.x_std = _stats(self.X[tr])
        self.v_mean, self.v_std = _stats(self.V[tr])

    @property
    def n_vars(self) -> int:
        return self.V.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def variables(self) -> list[VariableSpec]:
        return [VariableSpec(n, i, tuple(range(i)), k)
                for i, (n, k) in enumerate(zip(self.names, self.kinds))]

    def std_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def std_v(self, V):
        return (np.asarray(V, dtype=np.float64) - self.v_mean) / self.v_std

    def raw_v(self, Vs):
        return np.asarray(Vs, dtype=np.float64) * self.v_std + self.v_mean

    def split(self, name: str, standardized: bool = True):
        idx = self.splits[name]
        X, V = self.X[idx], self.V[idx]
        return (self.std_x(X), self.std_v(V)) if standardized else (X, V)

    def standardization(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "v_mean": self.v_mean.tolist(), "v_std": self.v_std.tolist(),
                "names": list(self.names)}


@dataclass(frozen=True)
class TaskSuite:
    """Inference tasks, each a tuple of target indices; the rest are observed."""

    tasks: tuple[tuple[int, ...], ...]
    metric: str = "rmse"
    n_vars: int | None = None

    def __post_init__(self):
        if self.metric not in ("rmse", "accuracy"):
            raise ValueError(f"unknown metric {self.metric!r}")
        for t in self.tasks:
            if not t:
                raise ValueError("empty task")
            if self.n_vars is not None and not set(t) <= set(range(self.n_vars)):
                raise ValueError(f"task {t} references unknown variables")

    def labels(self, names: Sequence[str] | None = None) -> list[str]:
        names = names or [f"v{i + 1}" for i in range(max(max(t) for t in self.tasks) + 1)]
        return ["{" + ",".join(names[i] for i in t) + "}" for t in self.tasks]


# 0-based versions of the published task columns
SHHS_TASKS = ((0, 2), (3, 4), (0, 2, 5, 6), (1, 5, 6), (2, 4, 7), (3, 4, 5), (3, 5, 6))
DERM_TASKS = ((0,), (1,), (0, 1), (0, 2))
DERM_FORWARD_TASKS = ((0,), (0, 1), (0, 1, 2))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gen_toy_line(m: int = 6, seed: int = 0, noise: float = 1.0) -> Dataset:
    """v1 ~ U(0, 1), v2 = 3 v1 + 1 + noise * eps; no features; all rows train."""
    if m < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    v1 = rng.uniform(0.0, 1.0, m)
    v2 = 3.0 * v1 + 1.0 + noise * rng.standard_normal(m)
    splits = {"train": np.arange(m), "val": np.arange(0), "test": np.arange(0)}
    return Dataset(np.zeros((m, 0)), np.column_stack([v1, v2]), ["v1", "v2"], splits)


@dataclass
class GaussianChainTruth:
    """v = B v + A x + c + diag(sigma) eps, with B strictly lower triangular."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    sigma: np.ndarray

    @property
    def n_vars(self) -> int:
        return len(self.c)

    def _L(self):
        return np.linalg.inv(np.eye(self.n_vars) - self.B)

    def mean(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return (X @ self.A.T + self.c) @ self._L().T

    def cov(self) -> np.ndarray:
        L = self._L()
        return L @ np.diag(self.sigma**2) @ L.T

    def conditional_mean(self, X, V, targets) -> np.ndarray:
        """E[v_S | x, v_-S] (also the mode) by Gaussian conditioning, (B, |S|)."""
        t = list(targets)
        o = [i for i in range(self.n_vars) if i not in set(t)]
        mu = self.mean(X)
        C = self.cov()
        if not o:
            return mu[:, t]
        K = C[np.ix_(t, o)] @ np.linalg.inv(C[np.ix_(o, o)])
        return mu[:, t] + (np.atleast_2d(V)[:, o] - mu[:, o]) @ K.T


def gen_gaussian_chain(n_vars: int, m: int, seed: int = 0, feature_dim: int = 2,
                       sigma: Sequence[float] | None = None, ratios=DEFAULT_RATIOS):
    """Linear-Gaussian chain given Gaussian features; returns (Dataset, truth)."""
    if n_vars < 2:
        raise ValueError("need at least two variables")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 0.7, (n_vars, feature_dim))
    B = np.tril(rng.normal(0.0, 0.6, (n_vars, n_vars)), k=-1)
    c = rng.normal(0.0, 0.5, n_vars)
    sig = rng.uniform(0.3, 0.8, n_vars) if sigma is None else np.asarray(sigma, dtype=float)
    X = rng.standard_normal((m, feature_dim))
    V = np.zeros((m, n_vars))
    eps = rng.standard_normal((m, n_vars))
    for n in range(n_vars):
        V[:, n] = X @ A[n] + V @ B[n] + c[n] + sig[n] * eps[:, n]
    names = [f"v{i + 1}" for i in range(n_vars)]
    ds = Dataset(X, V, names, make_splits(m, seed, ratios))
    return ds, GaussianChainTruth(A, B, c, sig)


def binarize_at_train_mean(S: np.ndarray, train_idx) -> tuple[np.ndarray, np.ndarray]:
    thr = S[train_idx].mean(axis=0)
    return (S >= thr).astype(float), thr


def gen_shhs_surrogate(m: int = 2000, seed: int = 0, independent: bool = False,
                       ratios=DEFAULT_RATIOS) -> Dataset:
    """Tabular stand-in for the sleep-study protocol.

    16 Gaussian features drive 8 chained latent scores; each score is
    binarized at its training-split mean.  With ``independent=True`` the
    scores ignore the features and each other.
    """
    if m < 100:
        raise ValueError("need at least 100 samples")
    rng = np.random.default_rng(seed)
    D, N = 16, 8
    X = rng.standard_normal((m, D))
    A = rng.normal(0.0, 0.35, (N, D)) * (rng.uniform(size=(N, D)) < 0.5)
    B = np.tril(rng.normal(0.0, 0.5, (N, N)), k=-1)
    noise = rng.uniform(0.6, 1.0, N)
    Z = np.zeros((m, N))
    eps = rng.standard_normal((m, N))
    for n in range(N):
        if independent:
            Z[:, n] = eps[:, n]
        else:
            Z[:, n] = X @ A[n] + np.tanh(Z) @ B[n] * 1.5 + noise[n] * eps[:, n]
    splits = make_splits(m, seed, ratios)
    V, thr = binarize_at_train_mean(Z, splits["train"])
    names = ["physical_functioning", "role_physical", "general_health", "role_emotional",
             "energy_fatigue", "emotional_wellbeing", "social_functioning", "pain"]
    ds = Dataset(X, V, names, splits, kinds=["binary"] * N)
    ds.extra["thresholds"] = thr
    ds.extra["latent"] = Z
    return ds


# ---------------------------------------------------------------------------
# Dermatology (UCI layout: 34 attributes + class, comma separated, '?' missing)
# ---------------------------------------------------------------------------

DERM_CLINICAL = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 33]
DERM_CLINICAL_NAMES = ["erythema", "scaling", "definite_borders", "itching", "koebner",
                       "polygonal_papules", "follicular_papules", "oral_mucosal",
                       "knee_elbow", "scalp", "family_history", "age"]
DERM_TARGETS = [26, 28, 20]
DERM_TARGET_NAMES = ["vacuolisation_basal_layer", "saw_tooth_retes", "elongation_rete_ridges"]
DERM_AGE = 33


DERMATOLOGY_ENV = "BIN_DERMATOLOGY_PATH"


def default_dermatology_path() -> Path:
    """``$BIN_DERMATOLOGY_PATH`` if set, else the bundled copy.

    The bundled file is a public redistribution of the UCI table with the
    eight rows of missing age removed (358 rows) and the class column recoded;
    point the variable at the original 366-row file to use it instead.
    """
    env = os.environ.get(DERMATOLOGY_ENV)
    if env:
        return Path(env)
    return Path(__file__).with_name("resources") / "dermatology.data"


def load_dermatology(path=None, seed: int = 0, ratios=DEFAULT_RATIOS) -> Dataset:
    """12 clinical columns as features, three histopathological scores (/3) as targets.

    Missing age ('?') is imputed with the training-split mean.
    """
    path = default_dermatology_path() if path is None else Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != 35:
                raise DataError(f"{path}:{lineno}: expected 35 fields, got {len(fields)}")
            try:
                vals = [math.nan if f == "?" else float(f) for f in fields[:34]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric attribute") from None
            if any(math.isnan(v) for i, v in enumerate(vals) if i != DERM_AGE):
                raise DataError(f"{path}:{lineno}: missing value outside the age column")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no rows")
    A = np.array(rows)
    splits = make_splits(len(A), seed, ratios)
    age = A[:, DERM_AGE].copy()
    train_age = age[splits["train"]]
    fill = np.nanmean(train_age) if np.any(~np.isnan(train_age)) else np.nanmean(age)
    A[np.isnan(age), DERM_AGE] = fill
    V = A[:, DERM_TARGETS] / 3.0
    if np.any((V < 0) | (V > 1)):
        raise DataError(f"{path}: histopathological scores outside 0-3")
    ds = Dataset(A[:, DERM_CLINICAL], V, list(DERM_TARGET_NAMES), splits,
                 feature_names=list(DERM_CLINICAL_NAMES))
    ds.extra["n_imputed"] = int(np.isnan(age).sum())
    return ds


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def threshold(pred) -> np.ndarray:
    """Class 1 at or above 0.5."""
    return (np.asarray(pred) >= 0.5).astype(float)


def metrics(kind: str, pred, truth) -> float:
    """Pooled RMSE, or accuracy in percent after thresholding at 0.5."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty task")
    if kind == "rmse":
        return float(np.sqrt(np.mean((pred - truth) ** 2)))
    if kind == "accuracy":
        return float(100.0 * np.mean(threshold(pred) == truth))
    raise ValueError(f"unknown metric {kind!r}")
