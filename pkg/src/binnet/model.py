"""The bidirectional inference network: one NPN subnetwork per conditional.

Variables are kept in topological (declaration) order and addressed by their
0-based position.  Subnetwork ``n`` reads ``[x, v[parents[n]]]`` and outputs
the Gaussian moments of ``v[n]``; the joint negative log-likelihood is the
sum of the per-conditional Gaussian terms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .npn import (
    GaussianMoments,
    NpnLinearLayer,
    NpnSubnetwork,
    gaussian_nll,
    subnetwork_forward,
    subnetwork_propagate,
)

CHECKPOINT_MAGIC = b"BINNETCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpec:
    name: str
    index: int
    parents: tuple[int, ...] = ()
    kind: str = "continuous"

    def __post_init__(self):
        if any(p >= self.index or p < 0 for p in self.parents):
            raise ValueError(
                f"parents of {self.name!r} must precede it in topological order")
        if len(set(self.parents)) != len(self.parents):
            raise ValueError(f"duplicate parent in {self.name!r}")
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown variable kind {self.kind!r}")


@dataclass
class Assignment:
    """Values for some or all variables; ``observed`` marks the known ones."""

    values: dict[int, float]
    observed: frozenset[int] = frozenset()

    def __post_init__(self):
        self.observed = frozenset(self.observed)
        for i in self.observed:
            if i not in self.values or not np.isfinite(self.values[i]):
                raise ValueError(f"observed variable {i} needs a finite value")

    @classmethod
    def full(cls, v: Sequence[float]) -> "Assignment":
        return cls({i: float(x) for i, x in enumerate(v)}, frozenset(range(len(v))))

    def to_array(self, n: int) -> np.ndarray:
        missing = [i for i in range(n) if i not in self.values]
        if missing:
            raise ValueError(f"unassigned variables: {missing}")
        return np.array([self.values[i] for i in range(n)], dtype=np.float64)


def chain_variables(names: Sequence[str], kind: str = "continuous") -> list[VariableSpec]:
    """Full chain-rule factorization: parents(n) = all earlier variables."""
    return [VariableSpec(nm, i, tuple(range(i)), kind) for i, nm in enumerate(names)]


@dataclass
class BinModel:
    variables: list[VariableSpec]
    subnets: list[NpnSubnetwork]
    feature_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.subnets) != len(self.variables):
            raise ValueError("need exactly one subnetwork per variable")
        for i, (var, net) in enumerate(zip(self.variables, self.subnets)):
            if var.index != i:
                raise ValueError("variable indices must match declaration order")
            if net.n_in != self.feature_dim + len(var.parents):
                raise ValueError(
                    f"subnet {i} expects {net.n_in} inputs, factorization gives "
                    f"{self.feature_dim + len(var.parents)}")

    @classmethod
    def build(cls, variables: Sequence[VariableSpec], feature_dim: int,
              hidden: Sequence[int] = (64, 64), *, activation: str = "relu",
              seed: int = 0, **init_kw) -> "BinModel":
        rng = np.random.default_rng(seed)
        subnets = [
            NpnSubnetwork.init(feature_dim + len(v.parents), hidden, rng,
                               activation=activation, name=f"net{v.index}",
                               inputs=tuple([f"x{j}" for j in range(feature_dim)]
                                            + [variables[p].name for p in v.parents]),
                               **init_kw)
            for v in variables
        ]
        return cls(list(variables), subnets, feature_dim)

    @classmethod
    def chain(cls, names: Sequence[str], feature_dim: int, hidden=(64, 64), **kw) -> "BinModel":
        return cls.build(chain_variables(names), feature_dim, hidden, **kw)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for net in self.subnets:
            out.update(net.params())
        return out

    def bind(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        """Differentiable leaves for every parameter array."""
        return {k: tape.leaf(v, name=k) for k, v in self.params().items()}

    def children(self, n: int) -> list[int]:
        return [v.index for v in self.variables if n in v.parents]

    def ancestrally_closed(self, subset) -> bool:
        """True if every parent of every member is itself a member."""
        s = set(subset)
        return all(set(self.variables[i].parents) <= s for i in s)


def _features(model: BinModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.feature_dim:
        raise ValueError(f"expected {model.feature_dim} features, got {X.shape[1]}")
    return X


def subnet_inputs(model: BinModel, n: int, X, V):
    """Mean input matrix [x, v[parents]] for subnetwork ``n``; V is (B, N)."""
    parents = list(model.variables[n].parents)
    if not parents:
        return X
    return ad.concat([X, ad.take(V, (slice(None), parents))], axis=1)


def conditional_moments_batch(model: BinModel, n: int, X, V, bound=None) -> GaussianMoments:
    """Moments of p(v_n | x, parents) with zero input variance; arrays of shape (B,)."""
    inp = subnet_inputs(model, n, X, V)
    zeros = np.zeros(np.shape(ad.value_of(inp)))
    return subnetwork_forward(model.subnets[n], GaussianMoments(inp, zeros), bound)


def conditional_moments(model: BinModel, n: int, x, parent_values: Mapping[int, float] | Sequence[float]):
    """(mean, variance) of v_n given features and the values of its parents."""
    spec = model.variables[n]
    if isinstance(parent_values, Mapping):
        missing = [p for p in spec.parents if p not in parent_values]
        if missing:
            raise ValueError(f"unassigned parents of {spec.name!r}: {missing}")
        vals = [parent_values[p] for p in spec.parents]
    else:
        vals = list(parent_values)
        if len(vals) != len(spec.parents):
            raise ValueError(f"{spec.name!r} has {len(spec.parents)} parents")
    X = _features(model, x)
    V = np.zeros((1, model.n_vars))
    V[0, list(spec.parents)] = vals
    m, s = conditional_moments_batch(model, n, X, V)
    return float(m[0]), float(s[0])


def nll_terms(model: BinModel, X, V, bound=None, terms: Sequence[int] | None = None):
    """Per-sample NLL of each requested conditional, shape (B, len(terms))."""
    terms = range(model.n_vars) if terms is None else terms
    cols = []
    for n in terms:
        m, s = conditional_moments_batch(model, n, X, V, bound)
        target = ad.take(V, (slice(None), n))
        cols.append(ad.reshape(gaussian_nll(target, m, s), (-1, 1)))
    return ad.concat(cols, axis=1)


def batch_nll(model: BinModel, X, V, bound=None, terms: Sequence[int] | None = None):
    """Joint NLL per sample, shape (B,)."""
    return ad.sum(nll_terms(model, X, V, bound, terms), axis=1)


def joint_nll(model: BinModel, x, v) -> float:
    """Joint negative log-likelihood of one fully assigned sample."""
    if isinstance(v, Assignment):
        v = v.to_array(model.n_vars)
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    if v.shape[1] != model.n_vars or not np.all(np.isfinite(v)):
        raise ValueError("all variables must be assigned finite values")
    return float(batch_nll(model, _features(model, x), v)[0])


def marginal_moments(model: BinModel, X, V, marginalized: Sequence[int], bound=None):
    """Moments of each variable with ``marginalized`` integrated out.

    Marginalized variables are drawn from their prior p(v_S | x) and written
    as ``v_S = mu + F e`` with standard normal ``e``.  Each new variable adds
    one row to F: its sensitivity to the existing noise plus its own residual
    noise.  This keeps correlated parents (and the hidden units they drive)
    coupled, and is exact for single-layer subnetworks.  Variables outside the
    set see observed parents as fixed values and marginalized parents as
    random inputs.

    Returns a list of (mean, var) per variable (each (B,)) and the covariance
    F F^T of the marginalized set, ordered as ``marginalized``.
    """
    S = sorted(set(marginalized))
    if not model.ancestrally_closed(S):
        raise ValueError("marginalized set must be ancestrally closed (a topological prefix)")
    B = np.shape(ad.value_of(X))[0]
    r = len(S)
    pos = {n: i for i, n in enumerate(S)}
    factor = np.zeros((B, r, r))
    mean_cols: dict[int, object] = {}
    out = []
    for n, spec in enumerate(model.variables):
        parents = spec.parents
        d = model.feature_dim + len(parents)
        select = np.zeros((d, r))
        parent_cols = []
        for j, p in enumerate(parents):
            if p in pos:
                select[model.feature_dim + j, pos[p]] = 1.0
                parent_cols.append(ad.reshape(mean_cols[p], (-1, 1)))
            else:
                parent_cols.append(ad.reshape(ad.take(V, (slice(None), p)), (-1, 1)))
        inp = ad.concat([X, *parent_cols], axis=1) if parent_cols else X
        if r:
            m, s, sens, resid = subnetwork_propagate(model.subnets[n], inp, select, factor, bound)
        else:
            m, s = subnetwork_forward(
                model.subnets[n], GaussianMoments(inp, np.zeros(np.shape(ad.value_of(inp)))), bound)
        out.append((m, s))
        if n in pos:
            mean_cols[n] = m
            e = np.zeros(r)
            e[pos[n]] = 1.0
            row = sens + ad.reshape(ad.sqrt(resid), (-1, 1)) * e      # (B, r)
            factor = factor + e[None, :, None] * ad.reshape(row, (B, 1, r))
    cov = ad.matmul(factor, ad.transpose(factor)) if r else factor
    return out, cov


def marginal_nll(model: BinModel, X, V, marginalized: Sequence[int], bound=None):
    """Approximate -log p(v_{-S} | x) per sample, shape (B,).

    Sum over the non-marginalized variables of the Gaussian NLL under their
    propagated moments.  With an empty set this is the joint NLL.
    """
    S = set(marginalized)
    moments, _ = marginal_moments(model, X, V, marginalized, bound)
    cols = [ad.reshape(gaussian_nll(ad.take(V, (slice(None), n)), m, s), (-1, 1))
            for n, (m, s) in enumerate(moments) if n not in S]
    if not cols:
        return np.zeros(np.shape(ad.value_of(X))[0])
    return ad.sum(ad.concat(cols, axis=1), axis=1)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic (8 bytes) | version (uint32 LE) | header length (uint64 LE)
#         | UTF-8 JSON header | parameter blob (little-endian float64)
# ---------------------------------------------------------------------------


def save_checkpoint(model: BinModel, path) -> None:
    arrays, blob, offset = {}, [], 0
    for name, arr in model.params().items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        arrays[name] = {"offset": offset, "shape": list(a.shape)}
        blob.append(a.tobytes())
        offset += a.size
    header = {
        "feature_dim": model.feature_dim,
        "variables": [
            {"name": v.name, "parents": list(v.parents), "kind": v.kind} for v in model.variables
        ],
        "subnets": [
            {
                "activation": net.activation,
                "var_floor": net.var_floor,
                "inputs": list(net.inputs),
                "layers": [{"name": l.name, "n_in": l.n_in, "n_out": l.n_out} for l in net.layers],
            }
            for net in model.subnets
        ],
        "arrays": arrays,
        "n_values": offset,
        "meta": model.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(b"".join(blob))
    tmp.replace(path)


def load_checkpoint(path) -> BinModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    try:
        return _model_from_header(header, raw[start + hlen:], path)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None


def _model_from_header(header: dict, data: bytes, path) -> BinModel:
    if len(data) != 8 * header["n_values"]:
        raise CheckpointError(f"{path}: parameter blob has wrong length")
    values = np.frombuffer(data, dtype="<f8").astype(np.float64)

    def arr(name):
        info = header["arrays"][name]
        size = int(np.prod(info["shape"], dtype=int))
        return values[info["offset"]:info["offset"] + size].reshape(info["shape"]).copy()

    variables = [VariableSpec(v["name"], i, tuple(v["parents"]), v["kind"])
                 for i, v in enumerate(header["variables"])]
    subnets = []
    for s in header["subnets"]:
        layers = [NpnLinearLayer(*(arr(f"{l['name']}.{k}") for k in NpnLinearLayer.PARAM_NAMES),
                                 name=l["name"]) for l in s["layers"]]
        subnets.append(NpnSubnetwork(layers, s["activation"], tuple(s["inputs"]),
                                     s["var_floor"], name=layers[0].name.split(".")[0]))
    return BinModel(variables, subnets, header["feature_dim"], header.get("meta", {}))
