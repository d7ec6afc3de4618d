"""Gaussian natural-parameter network (NPN) layers.

Weights, biases and activations are independent Gaussians described by a
(mean, variance) pair.  Layers map input moments to output moments in closed
form; the functions here accept numpy arrays or autodiff tensors alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

OUTPUT_VAR_FLOOR = 1e-6
HIDDEN_INIT_VAR = 1e-3
OUTPUT_INIT_BIAS_VAR = 1.0


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class GaussianMoments:
    """Per-component mean and variance (diagonal covariance)."""

    mean: object
    var: object

    def __iter__(self):
        yield self.mean
        yield self.var

    @classmethod
    def deterministic(cls, x) -> "GaussianMoments":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.zeros_like(x))


@dataclass
class NpnLinearLayer:
    """Linear layer with Gaussian weights N(w_mean, softplus(w_var_raw))."""

    w_mean: np.ndarray
    w_var_raw: np.ndarray
    b_mean: np.ndarray
    b_var_raw: np.ndarray
    name: str = ""

    PARAM_NAMES = ("w_mean", "w_var_raw", "b_mean", "b_var_raw")

    def __post_init__(self):
        if self.w_mean.shape != self.w_var_raw.shape:
            raise ValueError("w_mean and w_var_raw shapes differ")
        if self.b_mean.shape != self.b_var_raw.shape:
            raise ValueError("b_mean and b_var_raw shapes differ")
        if self.b_mean.shape != (self.w_mean.shape[1],):
            raise ValueError("bias length must equal output dimension")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, *,
             w_var: float = HIDDEN_INIT_VAR, b_var: float = HIDDEN_INIT_VAR,
             name: str = "") -> "NpnLinearLayer":
        bound = 1.0 / np.sqrt(max(n_in, 1))
        return cls(
            w_mean=rng.uniform(-bound, bound, size=(n_in, n_out)),
            w_var_raw=np.full((n_in, n_out), softplus_inverse(w_var)),
            b_mean=np.zeros(n_out),
            b_var_raw=np.full(n_out, softplus_inverse(b_var)),
            name=name,
        )

    @property
    def n_in(self) -> int:
        return self.w_mean.shape[0]

    @property
    def n_out(self) -> int:
        return self.w_mean.shape[1]

    @property
    def w_var(self) -> np.ndarray:
        return np.logaddexp(0.0, self.w_var_raw)

    @property
    def b_var(self) -> np.ndarray:
        return np.logaddexp(0.0, self.b_var_raw)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": getattr(self, k) for k in self.PARAM_NAMES}

    def resolve(self, bound: Mapping[str, object] | None = None):
        """(W_m, W_s, b_m, b_s), taking tensors from ``bound`` where present."""
        get = (lambda k: getattr(self, k)) if not bound else (
            lambda k: bound.get(f"{self.name}.{k}", getattr(self, k)))
        return get("w_mean"), ad.softplus(get("w_var_raw")), get("b_mean"), ad.softplus(get("b_var_raw"))


def npn_linear(inp: GaussianMoments, layer: NpnLinearLayer, bound=None) -> GaussianMoments:
    """Moments of y = x W + b with independent Gaussian x, W, b.

    mean = x_m W_m + b_m
    var  = x_s W_s + x_m^2 W_s + x_s W_m^2 + b_s
    """
    x_m, x_s = inp
    if np.shape(ad.value_of(x_m))[-1] != layer.n_in:
        raise ValueError(
            f"input dimension {np.shape(ad.value_of(x_m))[-1]} != layer input {layer.n_in}")
    w_m, w_s, b_m, b_s = layer.resolve(bound)
    out = ad.npn_linear_moments(x_m, x_s, w_m, w_s, b_m, b_s)
    return GaussianMoments(ad.take(out, 0), ad.take(out, 1))


def npn_activation(inp: GaussianMoments, kind: str = "relu") -> GaussianMoments:
    if kind == "identity":
        return inp
    if kind == "relu":
        out = ad.relu_moments(inp.mean, inp.var)
        return GaussianMoments(ad.take(out, 0), ad.take(out, 1))
    raise ValueError(f"unknown activation {kind!r}")


def gaussian_nll(target, mean, var):
    """(mean - target)^2 / (2 var) + log(var) / 2, elementwise (no 2*pi constant)."""
    if np.any(ad.value_of(var) <= 0):
        raise ValueError("gaussian_nll needs strictly positive variance")
    return ad.square(mean - target) / (2.0 * var) + 0.5 * ad.log(var)


@dataclass
class NpnSubnetwork:
    """Linear/activation stack ending in a single Gaussian output unit.

    ``inputs`` names what the network conditions on, in input order.
    """

    layers: list[NpnLinearLayer]
    activation: str = "relu"
    inputs: tuple[str, ...] = ()
    var_floor: float = OUTPUT_VAR_FLOOR
    name: str = ""

    def __post_init__(self):
        if not self.layers:
            raise ValueError("subnetwork needs at least one layer")
        if self.layers[-1].n_out != 1:
            raise ValueError("last layer must have a single output")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("consecutive layer shapes do not chain")

    @classmethod
    def init(cls, n_in: int, hidden: Sequence[int], rng: np.random.Generator, *,
             activation: str = "relu", name: str = "", inputs=(),
             hidden_var: float = HIDDEN_INIT_VAR,
             output_bias_var: float = OUTPUT_INIT_BIAS_VAR) -> "NpnSubnetwork":
        dims = [n_in, *hidden, 1]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            layers.append(NpnLinearLayer.init(
                a, b, rng, w_var=hidden_var,
                b_var=output_bias_var if last else hidden_var, name=f"{name}.layer{i}"))
        return cls(layers, activation, tuple(inputs), name=name)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def subnetwork_forward(net: NpnSubnetwork, inputs: GaussianMoments, bound=None) -> GaussianMoments:
    """Output (mean, variance) of the subnetwork, each shaped like the batch.

    The output variance is the propagated variance plus a small floor, so it
    is strictly positive.
    """
    h = inputs
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        h = npn_linear(h, layer, bound)
        if i < last:
            h = npn_activation(h, net.activation)
    mean = ad.take(h.mean, (Ellipsis, 0))
    var = ad.take(h.var, (Ellipsis, 0)) + net.var_floor
    return GaussianMoments(mean, var)


def subnetwork_propagate(net: NpnSubnetwork, mean, select: np.ndarray, factor, bound=None):
    """Propagate inputs that include correlated random variables.

    The r random variables are written as ``u = mu + F e`` with ``e`` standard
    normal; ``factor`` holds the rows of F, shape (B, r, r).  ``select`` is a
    constant (d, r) one-hot map from input slot to random variable (all-zero
    row for deterministic inputs), and ``mean`` is (B, d).

    Every unit carries its sensitivity to ``e`` (linear maps transform it
    exactly, ReLU scales it by the Gaussian-averaged slope) plus an
    independent residual variance.  For a single linear layer the output
    mean, variance and covariance with ``u`` are exact.

    Returns (mean (B,), var (B,), sensitivity (B, r), residual var (B,)).
    """
    J = ad.matmul(select, factor)                        # (B, d, r)
    resid = np.zeros(np.shape(ad.value_of(mean)))
    h_mean = mean
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        w_m, w_s, b_m, b_s = layer.resolve(bound)
        explained = ad.sum(ad.square(J), axis=-1)
        second = ad.square(h_mean) + resid + explained
        h_mean, resid, J = (
            ad.matmul(h_mean, w_m) + b_m,
            ad.matmul(second, w_s) + ad.matmul(resid, ad.square(w_m)) + b_s,
            ad.matmul(ad.transpose(w_m), J),
        )
        if i < last and net.activation == "relu":
            var = resid + ad.sum(ad.square(J), axis=-1)
            slope = ad.relu_slope(h_mean, var)
            J = J * ad.reshape(slope, np.shape(ad.value_of(slope)) + (1,))
            out_var = ad.relu_var(h_mean, var)
            h_mean = ad.relu_mean(h_mean, var)
            resid = ad.relu(out_var - ad.sum(ad.square(J), axis=-1))
    sens = ad.take(J, (Ellipsis, 0, slice(None)))
    resid = ad.take(resid, (Ellipsis, 0)) + net.var_floor
    var = resid + ad.sum(ad.square(sens), axis=-1)
    return ad.take(h_mean, (Ellipsis, 0)), var, sens, resid
