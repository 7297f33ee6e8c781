"""Small reverse-mode autodiff over numpy arrays, plus Adam and checkpoints.

Every op returns a :class:`Tensor` holding a float64 array.  When gradient
recording is enabled each result keeps references to its parents and a
closure that pushes the upstream gradient back to them; :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ROLES = ("teacher_high", "teacher_value", "teacher_low", "student")

_grad_enabled = True


class GraphError(ValueError):
    """Raised for malformed graphs: unknown parameter names, shape mismatches."""


class NonFiniteError(FloatingPointError):
    """Raised when a node produces NaN or inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # a node may be shared with an earlier backward pass; start clean
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, name):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by node {name!r}")
    out = Tensor(data, name=name)
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b, name="add"):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(g)
        b._accum(g)

    return _result(a.data + b.data, (a, b), bw, name)


def sub(a, b, name="sub"):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(g)
        b._accum(-g)

    return _result(a.data - b.data, (a, b), bw, name)


def mul(a, b, name="mul"):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(g * b.data)
        b._accum(g * a.data)

    return _result(a.data * b.data, (a, b), bw, name)


def tanh(x, name="tanh"):
    y = np.tanh(x.data)

    def bw(g):
        x._accum(g * (1.0 - y * y))

    return _result(y, (x,), bw, name)


def relu(x, name="relu"):
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask)

    return _result(x.data * mask, (x,), bw, name)


def sigmoid(x, name="sigmoid"):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._accum(g * y * (1.0 - y))

    return _result(y, (x,), bw, name)


def log_sigmoid(x, name="log_sigmoid"):
    d = x.data
    y = -np.logaddexp(0.0, -d)
    s = 0.5 * (1.0 + np.tanh(0.5 * d))

    def bw(g):
        x._accum(g * (1.0 - s))

    return _result(y, (x,), bw, name)


def log(x, name="log"):
    if np.any(x.data <= 0):
        raise NonFiniteError(f"log of non-positive value at node {name!r}")

    def bw(g):
        x._accum(g / x.data)

    return _result(np.log(x.data), (x,), bw, name)


def exp(x, name="exp"):
    y = np.exp(x.data)

    def bw(g):
        x._accum(g * y)

    return _result(y, (x,), bw, name)


def square(x, name="square"):
    def bw(g):
        x._accum(2.0 * g * x.data)

    return _result(x.data * x.data, (x,), bw, name)


# ---------------------------------------------------------------- structural

def matmul(a, b, name="matmul"):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise GraphError(f"shape mismatch at node {name!r}: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(gb)

    return _result(a.data @ b.data, (a, b), bw, name)


def affine(x, w, b, name="affine"):
    """``x @ w + b``; ``w`` has shape (fan_in, fan_out)."""
    x = as_tensor(x)
    if x.data.shape[-1] != w.data.shape[0] or b.data.shape[-1] != w.data.shape[1]:
        raise GraphError(
            f"shape mismatch at node {name!r}: input {x.data.shape}, "
            f"weight {w.data.shape}, bias {b.data.shape}"
        )

    def bw(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            xd = x.data.reshape(-1, x.data.shape[-1])
            w._accum(xd.T @ g.reshape(-1, g.shape[-1]))
        if b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data @ w.data + b.data, (x, w, b), bw, name)


def transpose(x, name="transpose"):
    def bw(g):
        x._accum(np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), bw, name)


def reshape(x, shape, name="reshape"):
    orig = x.data.shape

    def bw(g):
        x._accum(g.reshape(orig))

    return _result(x.data.reshape(shape), (x,), bw, name)


def concat(xs: Sequence[Tensor], axis=-1, name="concat"):
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            x._accum(piece)

    return _result(data, xs, bw, name)


def take(x, idx, name="take"):
    """Basic/advanced indexing; gradients scatter-add back."""

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accum(full)

    return _result(x.data[idx], (x,), bw, name)


def pick(x, index, name="pick"):
    """Select ``x[..., index[...]]`` along the last axis (one entry per row)."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    if x.data.ndim != 2 or index.shape != (x.data.shape[0],):
        raise GraphError(f"shape mismatch at node {name!r}: {x.data.shape} vs index {index.shape}")
    return take(x, (rows, index), name=name)


def total(x, axis=None, keepdims=False, name="sum"):
    shape = x.data.shape

    def bw(g):
        if axis is None:
            x._accum(np.broadcast_to(g, shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(np.broadcast_to(gg, shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, name)


def mean(x, axis=None, keepdims=False, name="mean"):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(total(x, axis=axis, keepdims=keepdims, name=name), 1.0 / n, name=name)


def softmax(x, axis=-1, name="softmax"):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), bw, name)


def log_softmax(x, axis=-1, name="log_softmax"):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        x._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), bw, name)


# ---------------------------------------------------------------- composites

def attention(q, k, v, mask=None, name="attention"):
    """Scaled dot-product attention.

    ``q`` (m, d), ``k`` (n, d), ``v`` (n, dv); ``mask`` is an optional
    boolean (m, n) array of allowed pairs.  Returns ``(out, weights)``.
    Rows with no allowed sender produce zero output.
    """
    d = q.data.shape[-1]
    if k.data.shape[-1] != d or k.data.shape[0] != v.data.shape[0]:
        raise GraphError(
            f"shape mismatch at node {name!r}: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    scores = mul(matmul(q, transpose(k), name=name + ".qk"), 1.0 / math.sqrt(d), name=name + ".scale")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores = add(scores, np.where(mask, 0.0, -1e9), name=name + ".mask")
        empty = ~mask.any(axis=-1, keepdims=True)
    w = softmax(scores, name=name + ".softmax")
    if mask is not None and empty.any():
        w = mul(w, (~empty).astype(np.float64), name=name + ".empty")
    return matmul(w, v, name=name + ".out"), w


def gru_cell(x, h, p: Mapping[str, Tensor], prefix: str, name="gru"):
    """Gated recurrent cell with update/reset gates.

    Expects parameters ``{prefix}.wz/uz/bz``, ``.wr/ur/br``, ``.wh/uh/bh``.
    """
    z = sigmoid(add(affine(x, p[f"{prefix}.wz"], p[f"{prefix}.bz"], name=name + ".z"),
                    matmul(h, p[f"{prefix}.uz"])), name=name + ".zgate")
    r = sigmoid(add(affine(x, p[f"{prefix}.wr"], p[f"{prefix}.br"], name=name + ".r"),
                    matmul(h, p[f"{prefix}.ur"])), name=name + ".rgate")
    cand = tanh(add(affine(x, p[f"{prefix}.wh"], p[f"{prefix}.bh"], name=name + ".h"),
                    matmul(mul(r, h), p[f"{prefix}.uh"])), name=name + ".cand")
    # h' = (1 - z) * h + z * cand
    return add(h, mul(z, sub(cand, h)), name=name + ".out")


def mlp(x, p: Mapping[str, Tensor], prefix: str, n_layers: int, act=tanh, final_act=False):
    """Stack of affine layers ``{prefix}.w{i}``/``{prefix}.b{i}``."""
    for i in range(n_layers):
        x = affine(x, p[f"{prefix}.w{i}"], p[f"{prefix}.b{i}"], name=f"{prefix}.{i}")
        if i < n_layers - 1 or final_act:
            x = act(x)
    return x


# ---------------------------------------------------------------- parameters

@dataclass
class ParamSet:
    role: str
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role.split(":")[0] not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def add(self, name: str, value) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"parameter {name!r} is not finite")
        self.entries[name] = value

    def copy(self) -> "ParamSet":
        return ParamSet(self.role, {k: v.copy() for k, v in self.entries.items()})

    def size(self) -> int:
        return sum(v.size for v in self.entries.values())

    def equal(self, other: "ParamSet") -> bool:
        return (self.entries.keys() == other.entries.keys()
                and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items()))

    def tensors(self, requires_grad=False) -> "ParamView":
        return ParamView({k: Tensor(v, requires_grad=requires_grad, name=k)
                          for k, v in self.entries.items()})


class ParamView(dict):
    """Name -> Tensor mapping that reports unknown names as graph errors."""

    def __missing__(self, key):
        raise GraphError(f"graph references unknown parameter {key!r}")


def init_linear(ps: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    bound = math.sqrt(1.0 / fan_in)
    ps.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    ps.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def init_mlp(ps: ParamSet, prefix: str, sizes: Sequence[int], rng: np.random.Generator):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(1.0 / a)
        ps.add(f"{prefix}.w{i}", rng.uniform(-bound, bound, size=(a, b)))
        ps.add(f"{prefix}.b{i}", rng.uniform(-bound, bound, size=(b,)))


def init_gru(ps: ParamSet, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator):
    bx, bh = math.sqrt(1.0 / n_in), math.sqrt(1.0 / n_hidden)
    for g in "zrh":
        ps.add(f"{prefix}.w{g}", rng.uniform(-bx, bx, size=(n_in, n_hidden)))
        ps.add(f"{prefix}.u{g}", rng.uniform(-bh, bh, size=(n_hidden, n_hidden)))
        ps.add(f"{prefix}.b{g}", rng.uniform(-bx, bx, size=(n_hidden,)))


@dataclass
class GradResult:
    value: float | np.ndarray
    grads: dict


def evaluate_with_gradients(graph: Callable, params: ParamSet, inputs: Iterable = ()) -> GradResult:
    """Run ``graph(param_view, *inputs)`` and differentiate its scalar output."""
    view = params.tensors(requires_grad=True)
    out = graph(view, *[as_tensor(x) for x in inputs])
    if out.data.size != 1:
        raise GraphError(f"graph output must be scalar, got shape {out.data.shape}")
    out.backward()
    grads = {}
    for k, t in view.items():
        grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return GradResult(value=float(out.data), grads=grads)


def evaluate(graph: Callable, params: ParamSet, inputs: Iterable = ()):
    with no_grad():
        return graph(params.tensors(), *[as_tensor(x) for x in inputs])


def grad_check(graph: Callable, params: ParamSet, h: float = 1e-5, inputs: Iterable = (),
               order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one,
    which tolerates a larger ``h`` (less round-off) for tiny gradient entries.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    inputs = list(inputs)
    analytic = evaluate_with_gradients(graph, params, inputs).grads
    work = params.copy()
    worst = 0.0

    def at(flat, i, x):
        flat[i] = x
        return float(evaluate(graph, work, inputs).data)

    for name, value in work.entries.items():
        flat = value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            if order == 2:
                num = (at(flat, i, orig + h) - at(flat, i, orig - h)) / (2 * h)
            else:
                num = (8 * (at(flat, i, orig + h) - at(flat, i, orig - h))
                       - (at(flat, i, orig + 2 * h) - at(flat, i, orig - 2 * h))) / (12 * h)
            flat[i] = orig
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer

@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, **kw) -> "OptState":
        return cls(m={k: np.zeros_like(v) for k, v in params.entries.items()},
                   v={k: np.zeros_like(v) for k, v in params.entries.items()}, **kw)


def adam_step(params: ParamSet, grads, state: OptState, lr: float, maximize=False):
    """One Adam update, applied in place; returns ``(params, state)``.

    ``grads`` is a GradResult or a plain name -> array mapping.  Entries
    with non-finite gradients are skipped.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    g_all = grads.grads if isinstance(grads, GradResult) else grads
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.entries.items():
        g = g_all.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise GraphError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            logger.warning("skipping Adam update for %s: non-finite gradient", name)
            continue
        if maximize:
            g = -g
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- checkpoints

def save_params(params: ParamSet, path) -> None:
    """Write a ParamSet as an ``.npz`` archive with a JSON header entry."""
    header = {
        "format_version": FORMAT_VERSION,
        "role": params.role,
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in params.entries.items()],
    }
    arrays = {f"p{i}": v for i, v in enumerate(params.entries.values())}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> ParamSet:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        ps = ParamSet(header["role"])
        for i, entry in enumerate(header["entries"]):
            arr = z[f"p{i}"]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"checkpoint entry {entry['name']!r} has wrong shape")
            ps.add(entry["name"], arr)
    return ps
