"""Query modes: feedforward initialization, general (BP) inference, forward
prediction and hybrid inference.

Batch functions take ``X`` (B, D) and a full value matrix ``V`` (B, N) whose
target columns are ignored; every row is an independent task sharing the same
target set.  Single-sample wrappers work with :class:`~binnet.model.Assignment`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import Assignment, BinModel, batch_nll, conditional_moments_batch

MODES = ("auto", "forward", "hybrid", "general")


class ForwardPreconditionError(ValueError):
    """Forward prediction needs an ancestrally closed observed set."""


@dataclass
class InferenceOptions:
    max_iters: int = 500
    lr: float = 0.05
    rel_tol: float = 1e-6
    init: str = "feedforward"
    window: int = 10
    seed: int | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative")
        if self.init not in ("feedforward", "random", "given"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class InferenceResult:
    estimates: dict[int, float]
    final_loss: float
    iterations_used: int
    converged: bool
    mode: str = "general"
    trajectory: list[float] = field(default_factory=list)


@dataclass
class BatchResult:
    """Results for a batch of tasks; ``V`` holds observed values plus estimates."""

    V: np.ndarray
    targets: tuple[int, ...]
    final_loss: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    mode: str
    history: np.ndarray | None = None

    @property
    def estimates(self) -> np.ndarray:
        return self.V[:, list(self.targets)]

    def row(self, i: int) -> InferenceResult:
        traj = [] if self.history is None else [float(h) for h in self.history[:, i]]
        return InferenceResult(
            {t: float(self.V[i, t]) for t in self.targets},
            float(self.final_loss[i]),
            int(self.iterations[i]),
            bool(self.converged[i]),
            self.mode,
            traj,
        )


def _as_batch(model: BinModel, X, V):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.feature_dim == 0:
        X = X.reshape(len(np.atleast_2d(V)), 0)
    V = np.atleast_2d(np.asarray(V, dtype=np.float64)).copy()
    if V.shape[1] != model.n_vars or X.shape[0] != V.shape[0]:
        raise ValueError("X and V shapes disagree with the model")
    return X, V


def _check_targets(model: BinModel, targets) -> tuple[int, ...]:
    targets = tuple(sorted(set(int(t) for t in targets)))
    if any(t < 0 or t >= model.n_vars for t in targets):
        raise ValueError(f"target index out of range: {targets}")
    return targets


def observed_of(model: BinModel, targets) -> list[int]:
    t = set(targets)
    return [n for n in range(model.n_vars) if n not in t]


def select_mode(model: BinModel, targets) -> str:
    """Forward if the observed set is ancestrally closed, hybrid if the last
    variable is a target, general otherwise."""
    observed = observed_of(model, targets)
    if model.ancestrally_closed(observed):
        return "forward"
    if model.n_vars - 1 not in observed:
        return "hybrid"
    return "general"


def init_targets_batch(model: BinModel, X, V, targets) -> np.ndarray:
    """Sweep in topological order setting each target to its conditional mean.

    ``targets`` is a shared index list or a (B, N) boolean mask."""
    X, V = _as_batch(model, X, V)
    if np.asarray(targets).dtype == bool and np.ndim(targets) == 2:
        mask = _target_mask(model, len(V), targets)
    else:
        mask = _target_mask(model, len(V), _check_targets(model, targets))
    for n in range(model.n_vars):
        if mask[:, n].any():
            V[:, n] = np.where(mask[:, n], conditional_moments_batch(model, n, X, V).mean, V[:, n])
    return V


def init_targets(model: BinModel, x, observed: Assignment, targets) -> Assignment:
    targets = _check_targets(model, targets)
    v = np.array([observed.values.get(i, 0.0) for i in range(model.n_vars)])
    out = init_targets_batch(model, x, v, targets)[0]
    return Assignment({i: float(out[i]) for i in range(model.n_vars)}, observed.observed)


def joint_loss(model: BinModel, X, V, terms=None) -> np.ndarray:
    return np.asarray(batch_nll(model, X, V, terms=terms))


def _target_mask(model: BinModel, B: int, targets) -> np.ndarray:
    """(B, N) boolean mask from a shared target list or a per-row mask."""
    arr = np.asarray(targets)
    if arr.dtype == bool and arr.ndim == 2:
        if arr.shape != (B, model.n_vars):
            raise ValueError("target mask must have shape (B, N)")
        return arr.copy()
    mask = np.zeros((B, model.n_vars), dtype=bool)
    mask[:, list(targets)] = True
    return mask


def _loss_and_grad(model, X, base, mask, T, terms):
    tape = ad.Tape()
    t = tape.leaf(T)
    per = batch_nll(model, X, base + t * mask, terms=terms)
    grad = tape.backward(ad.sum(per))[t] * mask
    return per.value.copy(), grad


def descend(model: BinModel, X, V, targets, start, *, lr: float, steps: int,
            rel_tol: float | None = None, window: int = 10, terms=None,
            keep_best: bool = True, beta1: float = 0.9, beta2: float = 0.999,
            eps: float = 1e-8):
    """Per-row Adam on the joint NLL with respect to the target entries.

    ``targets`` is either a list of variable indices shared by all rows (then
    ``start`` and the returned values are (B, k)) or a (B, N) boolean mask
    (then they are full (B, N) matrices whose unmasked entries are ignored).

    Rows are independent: each has its own Adam moments, step count and
    stopping decision (best-loss relative improvement below ``rel_tol`` over
    ``window`` steps).  Returns (values, loss, iterations, converged, history)
    where values are the best iterates if ``keep_best`` else the last ones.
    """
    X, V = _as_batch(model, X, V)
    B = len(V)
    mask = _target_mask(model, B, targets)
    shared = not (np.asarray(targets).dtype == bool and np.ndim(targets) == 2)
    cols = list(targets) if shared else None
    fmask = mask.astype(np.float64)
    base = np.where(mask, 0.0, V)
    T = np.zeros((B, model.n_vars))
    if shared:
        T[:, cols] = np.asarray(start, dtype=np.float64).reshape(B, len(cols))
    else:
        T[mask] = np.asarray(start, dtype=np.float64)[mask]
    T0 = T.copy()

    loss, g = _loss_and_grad(model, X, base, fmask, T, terms)
    if not np.all(np.isfinite(loss)):
        raise ad.DivergenceError("non-finite loss at initialization")
    best, best_T, last_loss = loss.copy(), T.copy(), loss.copy()
    history = [best.copy()]
    m = np.zeros_like(T)
    v = np.zeros_like(T)
    t = np.zeros(B)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    active = np.ones(B, dtype=bool)
    diverged = np.zeros(B, dtype=bool)

    for it in range(1, steps + 1):
        bad = active & ~np.all(np.isfinite(g), axis=1)
        diverged |= bad
        active &= ~bad
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        gi = g[idx]
        m[idx] = beta1 * m[idx] + (1 - beta1) * gi
        v[idx] = beta2 * v[idx] + (1 - beta2) * gi * gi
        t[idx] += 1
        m_hat = m[idx] / (1 - beta1 ** t[idx])[:, None]
        v_hat = v[idx] / (1 - beta2 ** t[idx])[:, None]
        T[idx] = T[idx] - lr * m_hat / (np.sqrt(v_hat) + eps)
        iters[idx] += 1

        li, gi = _loss_and_grad(model, X[idx], base[idx], fmask[idx], T[idx], terms)
        last_loss[idx] = li
        g[idx] = gi
        better = np.isfinite(li) & (li < best[idx])
        best[idx[better]] = li[better]
        best_T[idx[better]] = T[idx[better]]
        history.append(best.copy())
        if rel_tol is not None and it >= window:
            ref = history[it - window]
            rel = (ref - best) / np.maximum(np.abs(ref), 1e-12)
            done = active & (rel < rel_tol)
            converged |= done
            active &= ~done

    if keep_best:
        out, loss_out = best_T, best
    else:
        bad = diverged | ~np.all(np.isfinite(T), axis=1) | ~np.isfinite(last_loss)
        T[bad] = T0[bad]
        out, loss_out = T, last_loss
    if shared:
        out = out[:, cols]
    return out, loss_out, iters, converged, np.array(history)


def _start_values(model, X, V, targets, opts: InferenceOptions):
    if opts.init == "feedforward":
        return init_targets_batch(model, X, V, targets)[:, list(targets)]
    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        return rng.standard_normal((len(V), len(targets)))
    return V[:, list(targets)]


def general_infer_batch(model: BinModel, X, V, targets, opts: InferenceOptions | None = None,
                        terms=None) -> BatchResult:
    """MAP estimate of the targets by Adam on the joint NLL; best iterate returned."""
    opts = opts or InferenceOptions()
    X, V = _as_batch(model, X, V)
    targets = _check_targets(model, targets)
    if not targets:
        raise ValueError("general inference needs at least one target")
    obs = observed_of(model, targets)
    if not np.all(np.isfinite(V[:, obs])):
        raise ValueError("observed values must be finite")
    start = _start_values(model, X, V, targets, opts)
    vals, loss, iters, conv, hist = descend(
        model, X, V, targets, start, lr=opts.lr, steps=opts.max_iters,
        rel_tol=opts.rel_tol, window=opts.window, terms=terms)
    V[:, list(targets)] = vals
    return BatchResult(V, targets, loss, iters, conv, "general", hist)


def forward_predict_batch(model: BinModel, X, V, targets) -> BatchResult:
    """One topological sweep of conditional means (no iterations)."""
    X, V = _as_batch(model, X, V)
    targets = _check_targets(model, targets)
    if not model.ancestrally_closed(observed_of(model, targets)):
        raise ForwardPreconditionError(
            "observed variables have target ancestors; use hybrid or general inference")
    V = init_targets_batch(model, X, V, targets)
    B = len(V)
    return BatchResult(V, targets, joint_loss(model, X, V), np.zeros(B, dtype=int),
                       np.ones(B, dtype=bool), "forward")


def hybrid_infer_batch(model: BinModel, X, V, targets, opts: InferenceOptions | None = None) -> BatchResult:
    """General inference for targets before the last observed variable ``q``
    (objective: terms up to ``q``), then forward prediction for the rest."""
    opts = opts or InferenceOptions()
    X, V = _as_batch(model, X, V)
    targets = _check_targets(model, targets)
    observed = observed_of(model, targets)
    if model.n_vars - 1 in observed:
        raise ValueError("hybrid inference needs the last variable among the targets")
    if not observed:
        return forward_predict_batch(model, X, V, targets)
    q = max(observed)
    before = tuple(t for t in targets if t < q)
    iters = np.zeros(len(V), dtype=int)
    conv = np.ones(len(V), dtype=bool)
    if before:
        sub = general_infer_batch(model, X, V, before, opts, terms=range(q + 1))
        V[:, list(before)] = sub.V[:, list(before)]
        iters, conv = sub.iterations, sub.converged
    V = init_targets_batch(model, X, V, [t for t in targets if t > q])
    return BatchResult(V, targets, joint_loss(model, X, V), iters, conv, "hybrid")


def infer_batch(model: BinModel, X, V, targets, mode: str = "auto",
                opts: InferenceOptions | None = None) -> BatchResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    targets = _check_targets(model, targets)
    if mode == "auto":
        mode = select_mode(model, targets)
    if mode == "forward":
        return forward_predict_batch(model, X, V, targets)
    if mode == "hybrid":
        return hybrid_infer_batch(model, X, V, targets, opts)
    return general_infer_batch(model, X, V, targets, opts)


# -- single-sample wrappers --------------------------------------------------

def _row(model, observed: Assignment, targets):
    return np.array([observed.values.get(i, 0.0) for i in range(model.n_vars)])


def general_infer(model, x, observed: Assignment, targets, opts=None) -> InferenceResult:
    return general_infer_batch(model, x, _row(model, observed, targets), targets, opts).row(0)


def forward_predict(model, x, observed: Assignment, targets=None) -> Assignment:
    if targets is None:
        targets = [i for i in range(model.n_vars) if i not in observed.observed]
    res = forward_predict_batch(model, x, _row(model, observed, targets), targets)
    return Assignment({i: float(res.V[0, i]) for i in range(model.n_vars)}, observed.observed)


def hybrid_infer(model, x, observed: Assignment, targets, opts=None) -> InferenceResult:
    return hybrid_infer_batch(model, x, _row(model, observed, targets), targets, opts).row(0)
