"""Reference methods for the inference tasks: prior only (PO), random
initialization (RI) and a network retrained for one specific task."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .inference import (
    InferenceOptions,
    InferenceResult,
    general_infer,
    general_infer_batch,
    init_targets,
    init_targets_batch,
)
from .model import Assignment, BinModel
from .npn import GaussianMoments, NpnSubnetwork, gaussian_nll, subnetwork_forward
from .training import TrainConfig


class BaselineKind(enum.Enum):
    PRIOR_ONLY = "prior_only"
    RANDOM_INIT = "random_init"
    RETRAIN = "retrain"

    @classmethod
    def parse(cls, tag: str) -> "BaselineKind":
        try:
            return cls(tag.replace("-", "_").lower())
        except ValueError:
            raise ValueError(
                f"unknown baseline {tag!r}; choose from {[k.value for k in cls]}") from None


def prior_only_predict(model: BinModel, x, observed: Assignment, targets) -> Assignment:
    """The feedforward initialization itself, reported as the prediction."""
    return init_targets(model, x, observed, targets)


def prior_only_batch(model: BinModel, X, V, targets) -> np.ndarray:
    return init_targets_batch(model, X, V, targets)


def _random_opts(opts: InferenceOptions | None, seed) -> InferenceOptions:
    opts = opts or InferenceOptions()
    return InferenceOptions(opts.max_iters, opts.lr, opts.rel_tol, "random", opts.window, seed)


def random_init_infer(model: BinModel, x, observed: Assignment, targets,
                      opts: InferenceOptions | None = None, seed: int | None = 0) -> InferenceResult:
    """General inference started from N(0, 1) draws (standardized units)."""
    return general_infer(model, x, observed, targets, _random_opts(opts, seed))


def random_init_batch(model: BinModel, X, V, targets, opts: InferenceOptions | None = None,
                      seed: int | None = 0):
    return general_infer_batch(model, X, V, targets, _random_opts(opts, seed))


@dataclass
class RetrainPredictor:
    """One subnetwork per target, each reading ``[x; v_observed]``."""

    targets: tuple[int, ...]
    observed: tuple[int, ...]
    nets: list[NpnSubnetwork]
    losses: list[float]

    def moments(self, X, V) -> list[GaussianMoments]:
        X = np.asarray(X, dtype=np.float64).reshape(len(V), -1)
        inp = np.concatenate([X, np.asarray(V, dtype=np.float64)[:, list(self.observed)]], axis=1)
        zeros = np.zeros_like(inp)
        return [subnetwork_forward(net, GaussianMoments(inp, zeros)) for net in self.nets]

    def predict(self, X, V) -> np.ndarray:
        """Predicted target values (B, |S|); target columns of ``V`` are ignored."""
        return np.stack([m.mean for m in self.moments(X, V)], axis=1)

    def __call__(self, X, V) -> np.ndarray:
        return self.predict(X, V)


def retrain_specific(dataset, task: Sequence[int], cfg: TrainConfig | None = None,
                     hidden=(64, 64), activation: str = "relu") -> RetrainPredictor:
    """Train fresh per-target networks for one task on the standardized
    training split (Gaussian NLL, Adam, ``T_w + T_t`` epochs)."""
    cfg = cfg or TrainConfig()
    targets = tuple(sorted(set(int(t) for t in task)))
    if not targets:
        raise ValueError("empty task")
    observed = tuple(n for n in range(dataset.n_vars) if n not in targets)
    X, V = dataset.split("train", standardized=True)
    inp = np.concatenate([X, V[:, list(observed)]], axis=1)
    rng = np.random.default_rng(cfg.seed)
    nets, losses = [], []
    for t in targets:
        net = NpnSubnetwork.init(inp.shape[1], hidden, rng, activation=activation,
                                 name=f"retrain{t}")
        losses.append(_fit(net, inp, V[:, t], cfg, rng))
        nets.append(net)
    return RetrainPredictor(targets, observed, nets, losses)


def _fit(net: NpnSubnetwork, inp, y, cfg: TrainConfig, rng) -> float:
    params = net.params()
    opt = ad.Adam(params, lr=cfg.rho)      # updates the layer arrays in place
    zeros = np.zeros_like(inp)
    for _ in range(cfg.T_w + cfg.T_t):
        perm = rng.permutation(len(y))
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            tape = ad.Tape()
            bound = {k: tape.leaf(v, name=k) for k, v in params.items()}
            m, s = subnetwork_forward(net, GaussianMoments(inp[idx], zeros[idx]), bound)
            loss = ad.mean(gaussian_nll(y[idx], m, s))
            if not np.isfinite(loss.value):
                raise ad.DivergenceError("non-finite loss while retraining")
            adj = tape.backward(loss)
            opt.step({k: adj[t] for k, t in bound.items()})
    m, s = subnetwork_forward(net, GaussianMoments(inp, zeros))
    return float(np.mean(gaussian_nll(y, m, s)))
