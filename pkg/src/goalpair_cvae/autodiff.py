"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation returns a :class:`Tensor` that remembers its inputs and a
closure propagating the output adjoint back to them. :func:`backward` sorts
the recorded graph topologically and runs the closures once each, in reverse
order. Only what the models in this package need is implemented: dense
affine maps, a few activations, softmax heads, reductions, indexing and the
two losses (BCE and categorical KL).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, TrainingError

EPS = 1e-7
CHECKPOINT_FORMAT = "goalpair-cvae-params"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return Tensor(a.data / b.data, (a, b), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out ** 2))

    return Tensor(out, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor(out, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return Tensor(out, (x,), bw)


def log(x, eps: float | None = None) -> Tensor:
    """Natural log; with ``eps`` the input is clamped below (zero gradient there)."""
    x = as_tensor(x)
    xd = x.data if eps is None else np.maximum(x.data, eps)
    active = np.ones_like(xd) if eps is None else (x.data >= eps).astype(np.float64)

    def bw(g):
        x._accumulate(g * active / xd)

    return Tensor(np.log(xd), (x,), bw)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return Tensor(x.data ** 2, (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra, shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    out = matmul(x, W)
    return out if b is None else add(out, b)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape

    def bw(g):
        x._accumulate(g.reshape(orig))

    return Tensor(x.data.reshape(shape), (x,), bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            x._accumulate(piece)

    return Tensor(out, xs, bw)


def take(x, idx) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate their gradients."""
    x = as_tensor(x)

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor(x.data[idx], (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return Tensor(np.broadcast_to(x.data, shape).copy(), (x,), bw)


# ----------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# softmax heads


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        x._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (x,), bw)


# ----------------------------------------------------------------------------
# losses


def bce(pred, target, axis=None, eps: float = EPS) -> Tensor:
    """Binary cross-entropy summed over ``axis`` (all elements by default).

    ``pred`` is clamped to ``[eps, 1 - eps]``; the gradient is zero where the
    clamp is active.
    """
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ContractError(f"bce: prediction shape {pred.shape} != target shape {t.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    inside = (pred.data > eps) & (pred.data < 1.0 - eps)
    elem = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        pred._accumulate(g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)))

    return Tensor(elem.sum(axis=axis), (pred,), bw)


def categorical_kl(q, p, axis: int = -1, eps: float = EPS) -> Tensor:
    """KL(q || p) along ``axis`` for normalized inputs, with 0 log 0 = 0."""
    q, p = as_tensor(q), as_tensor(p)
    if q.shape != p.shape:
        raise ContractError(f"categorical_kl: shape {q.shape} != {p.shape}")
    pc = np.maximum(p.data, eps)
    pos = q.data > 0
    qs = np.where(pos, q.data, 1.0)
    elem = np.where(pos, q.data * (np.log(qs) - np.log(pc)), 0.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        q._accumulate(g * np.where(pos, np.log(qs) - np.log(pc) + 1.0, 0.0))
        p._accumulate(g * -(q.data / pc) * (p.data >= eps))

    return Tensor(elem.sum(axis=axis), (q, p), bw)


def kl_from_logits(q_logits, p_logits, axis: int = -1) -> Tensor:
    """KL(softmax(q_logits) || softmax(p_logits)), computed in log space."""
    log_q = log_softmax(q_logits, axis)
    log_p = log_softmax(p_logits, axis)
    return reduce_sum(mul(exp(log_q), sub(log_q, log_p)), axis=axis)


# ----------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite loss: {float(loss.data)}")
    order = _topo_order(loss)
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ----------------------------------------------------------------------------
# parameters and optimisation


class ParameterStore:
    """Named parameters with Adam moment estimates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = parameter(value)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False

    # checkpoints ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"checkpoint is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(f"parameter {k}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    grads = store.grads() if grads is None else grads
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def save_checkpoint(path: str | Path, stores: dict[str, ParameterStore], meta: dict | None = None) -> None:
    tensors = {}
    for group, store in stores.items():
        for name, arr in store.state_dict().items():
            tensors[f"{group}/{name}"] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": tensors}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Return ``({group: {name: array}}, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, rec in doc["tensors"].items():
        group, name = key.split("/", 1)
        groups.setdefault(group, {})[name] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return groups, doc.get("meta", {})


# ----------------------------------------------------------------------------
# layers


class MLP:
    """Fully connected network with tanh hidden activations."""

    def __init__(self, store: ParameterStore, prefix: str, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "tanh", out_scale: float = 0.1):
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least an input and an output size")
        self.sizes = list(sizes)
        self.activation = {"tanh": tanh, "relu": relu}[activation]
        self.layers = []
        n = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(1.0 / fan_in) * (out_scale if i == n - 1 else 1.0)
            W = store.add(f"{prefix}.W{i}", rng.normal(0.0, scale, size=(fan_in, fan_out)))
            b = store.add(f"{prefix}.b{i}", np.zeros(fan_out))
            self.layers.append((W, b))

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, (W, b) in enumerate(self.layers):
            h = linear(h, W, b)
            if i < len(self.layers) - 1:
                h = self.activation(h)
        return h


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g

