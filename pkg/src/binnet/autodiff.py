"""Reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on a :class:`Tape` in
evaluation order.  The tape can be replayed with new leaf values
(:meth:`Tape.evaluate`) and differentiated with respect to any scalar node
(:meth:`Tape.backward`).  Every public op also accepts plain arrays; when no
input is a ``Tensor`` the op simply returns the numpy result, so the same
model code runs untaped for fast evaluation.

All values are 64-bit floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtr, expit

__all__ = [
    "DomainError",
    "DivergenceError",
    "Tensor",
    "Tape",
    "AdamState",
    "Adam",
    "adam_step",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "log",
    "exp",
    "softplus",
    "relu",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "reshape",
    "concat",
    "take",
    "normal_cdf",
    "relu_mean",
    "relu_var",
    "relu_slope",
    "relu_moments",
    "npn_linear_moments",
    "value_of",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DomainError(ArithmeticError):
    """A primitive was applied outside its domain (log of x <= 0, x / 0, ...)."""


class DivergenceError(FloatingPointError):
    """Non-finite gradient or loss encountered during optimization."""


# ---------------------------------------------------------------------------
# primitives: name -> (forward, vjp)
#   forward(values, attrs) -> ndarray
#   vjp(g, values, out, attrs) -> tuple of input cotangents (unbroadcast later)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Primitive:
    forward: Callable[[Sequence[np.ndarray], dict], np.ndarray]
    vjp: Callable[[np.ndarray, Sequence[np.ndarray], np.ndarray, dict], tuple]


_PRIMITIVES: dict[str, _Primitive] = {}


def _primitive(name: str, forward, vjp) -> None:
    _PRIMITIVES[name] = _Primitive(forward, vjp)


def _check_log(x):
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return np.log(x)


def _check_div(a, b):
    if np.any(b == 0):
        raise DomainError("division by zero")
    return a / b


def _check_sqrt(x):
    if np.any(x < 0):
        raise DomainError("sqrt of negative value")
    return np.sqrt(x)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _cdf(z):
    return ndtr(z)


# mean, variance and slope primitives (and their vjps) are usually applied to
# the same tape values; keep the last few results keyed on array identity
_PARTS_CACHE: list = []


def _relu_parts(m, v):
    """Shared pieces of the rectified-Gaussian moments.

    Returns (cdf, pdf, std, random_mask) where entries with v <= 0 are treated
    as deterministic inputs (cdf = 1[m > 0], pdf = 0).
    """
    for cm, cv, parts in _PARTS_CACHE:
        if cm is m and cv is v:
            return parts
    parts = _relu_parts_uncached(m, v)
    _PARTS_CACHE.insert(0, (m, v, parts))
    del _PARTS_CACHE[32:]
    return parts


def _relu_parts_uncached(m, v):
    m, v = np.broadcast_arrays(m, v)
    rand = v > 0
    s = np.sqrt(np.where(rand, v, 1.0))
    z = np.where(rand, m / s, 0.0)
    cdf = np.where(rand, _cdf(z), (m > 0).astype(float))
    pdf = np.where(rand, _phi(z), 0.0)
    return cdf, pdf, s, rand


def _relu_mean_fwd(vals, attrs):
    m, v = vals
    cdf, pdf, s, rand = _relu_parts(m, v)
    return np.where(rand, m * cdf + s * pdf, np.maximum(m, 0.0))


def _relu_mean_vjp(g, vals, out, attrs):
    m, v = vals
    cdf, pdf, s, rand = _relu_parts(m, v)
    return g * cdf, g * np.where(rand, pdf / (2.0 * s), 0.0)


def _relu_var_fwd(vals, attrs):
    m, v = vals
    cdf, pdf, s, rand = _relu_parts(m, v)
    first = m * cdf + s * pdf
    second = (m * m + v) * cdf + m * s * pdf
    return np.where(rand, np.maximum(second - first * first, 0.0), 0.0)


def _relu_var_vjp(g, vals, out, attrs):
    m, v = vals
    cdf, pdf, s, rand = _relu_parts(m, v)
    first = np.where(rand, m * cdf + s * pdf, np.maximum(m, 0.0))
    d_m = 2.0 * first * (1.0 - cdf)
    d_v = np.where(rand, cdf - first * pdf / s, cdf)
    return g * d_m, g * d_v


def _relu_slope_fwd(vals, attrs):
    m, v = vals
    return _relu_parts(m, v)[0]


def _relu_slope_vjp(g, vals, out, attrs):
    m, v = vals
    cdf, pdf, s, rand = _relu_parts(m, v)
    d_m = np.where(rand, pdf / s, 0.0)
    d_v = np.where(rand, -pdf * m / (2.0 * s * s * s), 0.0)
    return g * d_m, g * d_v


def _sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _sum_vjp(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _concat_vjp(g, vals, out, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def _take_vjp(g, vals, out, attrs):
    x = vals[0]
    full = np.zeros(x.shape)
    key = attrs["key"]
    if _basic_index(key):
        full[key] += g          # basic indexing never repeats an element
    else:
        np.add.at(full, key, g)
    return (full,)


_primitive("add", lambda v, a: v[0] + v[1], lambda g, v, o, a: (g, g))
_primitive("sub", lambda v, a: v[0] - v[1], lambda g, v, o, a: (g, -g))
_primitive("mul", lambda v, a: v[0] * v[1], lambda g, v, o, a: (g * v[1], g * v[0]))
_primitive(
    "div",
    lambda v, a: _check_div(v[0], v[1]),
    lambda g, v, o, a: (g / v[1], -g * v[0] / (v[1] * v[1])),
)
_primitive("neg", lambda v, a: -v[0], lambda g, v, o, a: (-g,))
_primitive("square", lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],))
_primitive("sqrt", lambda v, a: _check_sqrt(v[0]), lambda g, v, o, a: (g / (2.0 * o),))
_primitive("log", lambda v, a: _check_log(v[0]), lambda g, v, o, a: (g / v[0],))
_primitive("relu", lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),))
_primitive("exp", lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,))
_primitive("softplus", lambda v, a: _softplus(v[0]), lambda g, v, o, a: (g * expit(v[0]),))
_primitive(
    "matmul",
    lambda v, a: np.matmul(v[0], v[1]),
    lambda g, v, o, a: (np.matmul(g, _swap(v[1])), np.matmul(_swap(v[0]), g)),
)
_primitive("transpose", lambda v, a: _swap(v[0]), lambda g, v, o, a: (_swap(g),))
_primitive("sum", _sum_fwd, _sum_vjp)
_primitive(
    "reshape",
    lambda v, a: np.reshape(v[0], a["shape"]),
    lambda g, v, o, a: (np.reshape(g, v[0].shape),),
)
_primitive("concat", lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_vjp)
_primitive("take", lambda v, a: v[0][a["key"]], _take_vjp)
_primitive("normal_cdf", lambda v, a: _cdf(v[0]), lambda g, v, o, a: (g * _phi(v[0]),))
_primitive("relu_mean", _relu_mean_fwd, _relu_mean_vjp)
_primitive("relu_var", _relu_var_fwd, _relu_var_vjp)
_primitive("relu_slope", _relu_slope_fwd, _relu_slope_vjp)


def _relu_moments_fwd(vals, attrs):
    return np.stack([_relu_mean_fwd(vals, attrs), _relu_var_fwd(vals, attrs)])


def _relu_moments_vjp(g, vals, out, attrs):
    gm, gv = _relu_mean_vjp(g[0], vals, None, attrs)
    vm, vv = _relu_var_vjp(g[1], vals, None, attrs)
    return gm + vm, gv + vv


def _flat2(a):
    return a.reshape(int(np.prod(a.shape[:-1])), a.shape[-1])


def _npn_linear_fwd(vals, attrs):
    x_m, x_s, w_m, w_s, b_m, b_s = vals
    mean = x_m @ w_m + b_m
    var = x_s @ (w_s + w_m * w_m) + (x_m * x_m) @ w_s + b_s
    return np.stack(np.broadcast_arrays(mean, var))


def _npn_linear_vjp(g, vals, out, attrs):
    x_m, x_s, w_m, w_s, b_m, b_s = vals
    g_m, g_v = g[0], g[1]
    x_m, x_s = np.broadcast_arrays(x_m, x_s)
    d_xm = g_m @ w_m.T + 2.0 * x_m * (g_v @ w_s.T)
    d_xs = g_v @ (w_s + w_m * w_m).T
    fm, fs, fgm, fgv = _flat2(x_m), _flat2(x_s), _flat2(g_m), _flat2(g_v)
    d_wm = fm.T @ fgm + 2.0 * w_m * (fs.T @ fgv)
    d_ws = (fs + fm * fm).T @ fgv
    return d_xm, d_xs, d_wm, d_ws, fgm.sum(0), fgv.sum(0)


_primitive("relu_moments", _relu_moments_fwd, _relu_moments_vjp)
_primitive("npn_linear", _npn_linear_fwd, _npn_linear_vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Tensor:
    """A node on a :class:`Tape`: op tag, ordered inputs and evaluated value."""

    __slots__ = ("tape", "index", "op", "inputs", "attrs", "value", "name", "requires_grad")

    def __init__(self, tape, index, op, inputs, attrs, value, name, requires_grad):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(#{self.index} {self.op}{label}, shape={self.shape})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)

    __array_priority__ = 1000  # numpy defers to our reflected operators


class Tape:
    """Records tensors in evaluation order.

    >>> tape = Tape()
    >>> x = tape.leaf(3.0, name="x")
    >>> y = x * x
    >>> tape.backward(y)[x]
    array(6.)
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._adjoints: list[np.ndarray | None] | None = None

    def leaf(self, value=None, name: str | None = None) -> Tensor:
        """A differentiable input; ``value=None`` defers it to :meth:`evaluate`."""
        val = None if value is None else np.array(value, dtype=np.float64)
        return self._push("leaf", (), {}, val, name, True)

    def constant(self, value, name: str | None = None) -> Tensor:
        return self._push("const", (), {}, np.array(value, dtype=np.float64), name, False)

    def _push(self, op, inputs, attrs, value, name, requires_grad) -> Tensor:
        node = Tensor(self, len(self.nodes), op, inputs, attrs, value, name, requires_grad)
        self.nodes.append(node)
        self._adjoints = None
        return node

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError(f"{x!r} belongs to a different tape")
            return x
        return self.constant(x)

    def _apply(self, op: str, args: Sequence[Any], attrs: dict) -> Tensor:
        inputs = tuple(self._lift(a) for a in args)
        if any(i.value is None for i in inputs):
            value = None
        else:
            value = _run_forward(op, [i.value for i in inputs], attrs, len(self.nodes))
        req = any(i.requires_grad for i in inputs)
        return self._push(op, inputs, attrs, value, None, req)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.op == "leaf"]

    def evaluate(self, leaf_values: dict | None = None) -> dict[Tensor, np.ndarray]:
        """Replay the tape, optionally with new leaf values; returns node -> value."""
        leaf_values = leaf_values or {}
        for node in self.nodes:
            if node.op == "leaf":
                if node in leaf_values:
                    node.value = np.array(leaf_values[node], dtype=np.float64)
                if node.value is None:
                    raise ValueError(f"leaf {node!r} has no value")
            elif node.op != "const":
                node.value = _run_forward(
                    node.op, [i.value for i in node.inputs], node.attrs, node.index
                )
        self._adjoints = None
        return {n: n.value for n in self.nodes}

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Adjoints d(root)/d(leaf) for every leaf on the tape (zero if unreachable)."""
        if root.tape is not self:
            raise ValueError("root is not on this tape")
        if root.value is None:
            raise RuntimeError("backward called before evaluate")
        if np.size(root.value) != 1:
            raise ValueError(f"root must be scalar, got shape {root.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = adj[node.index]
            if g is None or node.op in ("leaf", "const") or not node.requires_grad:
                continue
            vals = [i.value for i in node.inputs]
            cots = _PRIMITIVES[node.op].vjp(g, vals, node.value, node.attrs)
            for inp, c in zip(node.inputs, cots):
                if not inp.requires_grad:
                    continue
                c = _unbroadcast(np.asarray(c, dtype=np.float64), np.shape(inp.value))
                prev = adj[inp.index]
                adj[inp.index] = c if prev is None else prev + c
        self._adjoints = adj
        return {n: self.adjoint(n) for n in self.nodes if n.op == "leaf"}

    def adjoint(self, node: Tensor) -> np.ndarray:
        """Adjoint of any node from the last :meth:`backward` (zero if unreached)."""
        if self._adjoints is None:
            raise RuntimeError("no backward pass recorded")
        a = self._adjoints[node.index]
        return np.zeros(np.shape(node.value)) if a is None else a

    def grad(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        adj = self.backward(root)
        return [adj[w] for w in wrt]


def _run_forward(op, values, attrs, index) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            return np.asarray(_PRIMITIVES[op].forward(values, attrs), dtype=np.float64)
    except DomainError as exc:
        raise DomainError(f"{exc} at node #{index} ({op})") from None


def _dispatch(op: str, *args, **attrs):
    for a in args:
        if isinstance(a, Tensor):
            return a.tape._apply(op, args, attrs)
    vals = [np.asarray(a, dtype=np.float64) for a in args]
    if op.startswith("relu_"):
        # caller-owned arrays may be mutated between calls; only tape values are cached
        _PARTS_CACHE.clear()
    with np.errstate(all="ignore"):
        return np.asarray(_PRIMITIVES[op].forward(vals, attrs), dtype=np.float64)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def add(a, b):
    return _dispatch("add", a, b)


def sub(a, b):
    return _dispatch("sub", a, b)


def mul(a, b):
    return _dispatch("mul", a, b)


def div(a, b):
    return _dispatch("div", a, b)


def neg(a):
    return _dispatch("neg", a)


def square(a):
    return _dispatch("square", a)


def sqrt(a):
    return _dispatch("sqrt", a)


def log(a):
    return _dispatch("log", a)


def exp(a):
    return _dispatch("exp", a)


def relu(a):
    return _dispatch("relu", a)


def softplus(a):
    return _dispatch("softplus", a)


def matmul(a, b):
    return _dispatch("matmul", a, b)


def transpose(a):
    """Swap the last two axes."""
    return _dispatch("transpose", a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _dispatch("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return div(sum(a, axis=axis), float(n))


def reshape(a, shape):
    return _dispatch("reshape", a, shape=tuple(shape))


def concat(parts, axis=-1):
    return _dispatch("concat", *parts, axis=axis)


def relu_moments(m, v):
    """Stacked (mean, variance) of max(z, 0) for z ~ N(m, v); shape (2, ...)."""
    return _dispatch("relu_moments", m, v)


def npn_linear_moments(x_m, x_s, w_m, w_s, b_m, b_s):
    """Stacked (mean, variance) of x W + b with independent Gaussian x, W, b:

    mean = x_m W_m + b_m
    var  = x_s W_s + x_m^2 W_s + x_s W_m^2 + b_s
    """
    return _dispatch("npn_linear", x_m, x_s, w_m, w_s, b_m, b_s)


def take(a, key):
    return _dispatch("take", a, key=key)


def normal_cdf(a):
    return _dispatch("normal_cdf", a)


def relu_mean(m, v):
    """E[max(0, z)] for z ~ N(m, v)."""
    return _dispatch("relu_mean", m, v)


def relu_var(m, v):
    """Var[max(0, z)] for z ~ N(m, v)."""
    return _dispatch("relu_var", m, v)


def relu_slope(m, v):
    """P(z > 0) for z ~ N(m, v); the Gaussian-averaged ReLU derivative."""
    return _dispatch("relu_slope", m, v)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and the state.

    Raises DivergenceError (state untouched) if any gradient is non-finite.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("state, params and grads must have matching lengths")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(m) or np.shape(g) != np.shape(m):
            raise ValueError("shape mismatch between state and parameters")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, out = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return out, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place."""

    params: dict[str, np.ndarray]
    lr: float = 1e-3
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(list(self.params.values()))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        names = list(self.params)
        new, self.state = adam_step(
            self.state, [self.params[k] for k in names], [grads[k] for k in names], self.lr
        )
        for k, p in zip(names, new):
            self.params[k][...] = p
