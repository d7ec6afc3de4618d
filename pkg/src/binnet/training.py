"""Maximum-likelihood warmup and composite-likelihood (CBIN) training."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .inference import descend, init_targets_batch
from .model import BinModel, batch_nll, marginal_nll

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_c: float = 0.0
    T_w: int = 50
    T_t: int = 50
    T_in: int = 8
    rho: float = 1e-2
    gamma: float = 0.05
    batch_size: int = 32
    cl_subsets: list[tuple[int, ...]] | None = None
    seed: int = 0
    # gradient through the propagated marginal term; None = only when every
    # subnetwork is a single layer (where the propagated moments are exact)
    marginal_grad: bool | None = None

    def __post_init__(self):
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")
        if min(self.T_w, self.T_t, self.T_in) < 0:
            raise ValueError("epoch and iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.cl_subsets is not None:
            self.cl_subsets = [tuple(sorted(s)) for s in self.cl_subsets]

    def subsets(self, n_vars: int) -> list[tuple[int, ...]]:
        """Configured subsets, defaulting to the prefixes {0..j-1}, j = 1..N-1."""
        if self.cl_subsets is not None:
            return list(self.cl_subsets)
        return [tuple(range(j)) for j in range(1, n_vars)]

    def use_marginal_grad(self, model: BinModel) -> bool:
        if self.marginal_grad is not None:
            return bool(self.marginal_grad)
        return all(len(net.layers) == 1 for net in model.subnets)


@dataclass
class TrainReport:
    phase: list[str] = field(default_factory=list)
    joint_nll: list[float] = field(default_factory=list)
    cl_terms: list[list[float] | None] = field(default_factory=list)
    val_nll: list[float | None] = field(default_factory=list)
    inner_iters: list[int] = field(default_factory=list)
    wall_clock: float = 0.0

    def records(self) -> list[dict]:
        return [
            {"epoch": i, "phase": p, "joint_nll": j, "cl_terms": c, "val_nll": v, "inner_iters": n}
            for i, (p, j, c, v, n) in enumerate(
                zip(self.phase, self.joint_nll, self.cl_terms, self.val_nll, self.inner_iters))
        ]

    def write_jsonl(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                if extra:
                    rec = {**extra, **rec}
                fh.write(json.dumps(rec) + "\n")


def _subset_mask(model: BinModel, B: int, subsets) -> np.ndarray:
    mask = np.zeros((len(subsets) * B, model.n_vars), dtype=bool)
    for j, s in enumerate(subsets):
        s = list(s)
        if not s or len(s) >= model.n_vars:
            raise ValueError("each subset must be a non-empty proper subset of the variables")
        mask[j * B:(j + 1) * B, s] = True
    return mask


def inner_loop_infer(model: BinModel, X, V, subsets: Sequence[Sequence[int]], cfg: TrainConfig) -> dict:
    """Pseudo-targets for every subset: greedy initialization, then ``T_in``
    Adam steps (step size ``gamma``) on the joint NLL with respect to the
    subset's values.  Last iterates are returned as {subset: (B, |S|)}.

    All subsets run as one stacked batch; rows are independent, so this is
    the same as running them one at a time.
    """
    subsets = [tuple(s) for s in subsets]
    B = len(V)
    mask = _subset_mask(model, B, subsets)
    Xs = np.tile(X, (len(subsets), 1))
    Vs = np.tile(V, (len(subsets), 1))
    vals = init_targets_batch(model, Xs, Vs, mask)
    if cfg.T_in > 0:
        vals, *_ = descend(model, Xs, Vs, mask, vals, lr=cfg.gamma, steps=cfg.T_in, keep_best=False)
    return {s: vals[j * B:(j + 1) * B][:, list(s)] for j, s in enumerate(subsets)}


def composite_loss(model: BinModel, X, V, vhat: dict, lambda_c: float, bound=None,
                   subsets: Sequence[Sequence[int]] | None = None, marginal_grad: bool = False):
    """Batch-mean of L(V|X) + lambda_c * sum_j [L(V_hat_Sj, V_-Sj | X) - L(V_-Sj | X)].

    ``vhat`` maps each subset (tuple) to its inferred values (B, |S|); they are
    constants here, so no gradient flows into the inner loop.  With
    ``marginal_grad`` False the propagated marginal term is also held constant:
    its value is reported but training only sees the augmented-data term.
    Returns (total, [per-subset batch-mean CL term]).
    """
    subsets = list(vhat) if subsets is None else [tuple(s) for s in subsets]
    total = ad.mean(batch_nll(model, X, V, bound))
    if not subsets:
        return total, []
    B = len(V)
    Vh = np.tile(np.asarray(V, dtype=np.float64), (len(subsets), 1))
    for j, s in enumerate(subsets):
        if s not in vhat:
            raise KeyError(f"no inferred values for subset {s}")
        Vh[j * B:(j + 1) * B, list(s)] = vhat[s]
    aug = batch_nll(model, np.tile(X, (len(subsets), 1)), Vh, bound)
    parts = []
    for j, s in enumerate(subsets):
        marg = marginal_nll(model, X, V, s, bound if marginal_grad else None)
        rows = ad.take(aug, slice(j * B, (j + 1) * B))
        parts.append(ad.mean(rows - marg))
    cl_sum = parts[0]
    for p in parts[1:]:
        cl_sum = cl_sum + p
    return total + lambda_c * cl_sum, parts


class Trainer:
    """Holds the optimizer and RNG so warmup and CBIN epochs share state."""

    def __init__(self, model: BinModel, cfg: TrainConfig, val=None):
        self.model = model
        self.cfg = cfg
        self.params = model.params()
        self.opt = ad.Adam(self.params, lr=cfg.rho)
        self.rng = np.random.default_rng(cfg.seed)
        self.report = TrainReport()
        self.val = val
        self._epoch = 0

    def _batches(self, m: int):
        perm = self.rng.permutation(m)
        k = self.cfg.batch_size
        return [perm[i:i + k] for i in range(0, m, k)]

    def _apply(self, loss, tape, bound, where: str):
        if not np.isfinite(loss.value):
            raise ad.DivergenceError(f"non-finite loss at {where}")
        adj = tape.backward(loss)
        grads = {k: adj[t] for k, t in bound.items()}
        try:
            self.opt.step(grads)
        except ad.DivergenceError as exc:
            raise ad.DivergenceError(f"{exc} at {where}") from None

    def _log_epoch(self, phase, cl, inner):
        X, V = self.data
        self.report.phase.append(phase)
        self.report.joint_nll.append(float(np.mean(batch_nll(self.model, X, V))))
        self.report.cl_terms.append(cl)
        self.report.inner_iters.append(inner)
        if self.val is not None and len(self.val[1]):
            self.report.val_nll.append(float(np.mean(batch_nll(self.model, *self.val))))
        else:
            self.report.val_nll.append(None)
        log.debug("epoch %d %s nll=%.4f", self._epoch, phase, self.report.joint_nll[-1])
        self._epoch += 1

    def warmup_epoch(self, X, V):
        self.data = (X, V)
        for b, idx in enumerate(self._batches(len(V))):
            tape = ad.Tape()
            bound = self.model.bind(tape)
            loss = ad.mean(batch_nll(self.model, X[idx], V[idx], bound))
            self._apply(loss, tape, bound, f"epoch {self._epoch} batch {b}")
        self._log_epoch("warmup", None, 0)

    def cbin_epoch(self, X, V):
        self.data = (X, V)
        subsets = self.cfg.subsets(self.model.n_vars)
        sums = np.zeros(len(subsets))
        inner = 0
        batches = self._batches(len(V))
        for b, idx in enumerate(batches):
            Xb, Vb = X[idx], V[idx]
            vhat = inner_loop_infer(self.model, Xb, Vb, subsets, self.cfg)
            inner += self.cfg.T_in * len(subsets)
            tape = ad.Tape()
            bound = self.model.bind(tape)
            loss, parts = composite_loss(self.model, Xb, Vb, vhat, self.cfg.lambda_c, bound, subsets,
                                         self.cfg.use_marginal_grad(self.model))
            self._apply(loss, tape, bound, f"epoch {self._epoch} batch {b}")
            sums += [p.value for p in parts]
        self._log_epoch("cbin", list(sums / max(len(batches), 1)), inner)


def _prepare(model, X, V):
    X = np.asarray(X, dtype=np.float64).reshape(len(V), model.feature_dim)
    V = np.asarray(V, dtype=np.float64)
    if len(V) == 0:
        raise ValueError("empty dataset")
    if V.shape[1] != model.n_vars:
        raise ValueError("V columns do not match the model's variables")
    return X, V


def warmup_train(model: BinModel, X, V, cfg: TrainConfig, val=None,
                 trainer: Trainer | None = None) -> TrainReport:
    """``cfg.T_w`` epochs of minibatch Adam on the joint NLL."""
    X, V = _prepare(model, X, V)
    trainer = trainer or Trainer(model, cfg, val)
    t0 = time.perf_counter()
    for _ in range(cfg.T_w):
        trainer.warmup_epoch(X, V)
    trainer.report.wall_clock += time.perf_counter() - t0
    return trainer.report


def cbin_train(model: BinModel, X, V, cfg: TrainConfig, val=None) -> TrainReport:
    """Warmup for ``T_w`` epochs, then ``T_t`` epochs on the composite objective."""
    X, V = _prepare(model, X, V)
    trainer = Trainer(model, cfg, val)
    warmup_train(model, X, V, cfg, val, trainer)
    t0 = time.perf_counter()
    for _ in range(cfg.T_t):
        trainer.cbin_epoch(X, V)
    trainer.report.wall_clock += time.perf_counter() - t0
    return trainer.report


def bin_train(model: BinModel, X, V, cfg: TrainConfig, val=None) -> TrainReport:
    """Plain maximum likelihood for ``T_w + T_t`` epochs (lambda_c ignored)."""
    X, V = _prepare(model, X, V)
    trainer = Trainer(model, cfg, val)
    t0 = time.perf_counter()
    for _ in range(cfg.T_w + cfg.T_t):
        trainer.warmup_epoch(X, V)
    trainer.report.wall_clock = time.perf_counter() - t0
    return trainer.report


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
