"""Dense tensors with tape-free reverse-mode autodiff on top of numpy.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph in reverse
topological order. Parameters are leaf tensors owned by a ``ParamStore``;
their ``grad`` arrays are the accumulators (``+=`` semantics).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

NEG_INF_LOGIT = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=False)
    return Tensor(data, parents, backward_fn, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics, including batch broadcasting and 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        # promote vectors to matrices so one rule covers all cases
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, ad.shape)
        else:
            ga = _unbroadcast(ga, ad.shape)
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
            gb = _unbroadcast(gb, bd.shape)
        else:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, bw)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tensors, bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; advanced indices scatter back with ``np.add.at``."""
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), bw)


def embedding(table: Tensor, indices: np.ndarray, padding_idx: int | None = 0) -> Tensor:
    """Row lookup; the padding row never receives gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return _node(out, (table,), bw)


# ---------------------------------------------------------------------------
# reductions with routing
# ---------------------------------------------------------------------------

def _mask_bool(mask, shape, axis):
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        m = np.broadcast_to(m, shape)
    return m


def softmax(a: Tensor, axis=-1, mask=None) -> Tensor:
    """Max-subtracted softmax; masked-out entries get exactly zero mass."""
    x = a.data
    m = _mask_bool(mask, x.shape, axis)
    if m is not None:
        x = np.where(m, x, NEG_INF_LOGIT)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    if m is not None:
        e = np.where(m, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw)


def max_pool(a: Tensor, axis=0, mask=None) -> Tensor:
    """Max over ``axis``; the gradient goes only to the argmax position.

    ``mask`` (broadcastable to ``a``) excludes positions from the max.
    """
    x = a.data
    ax = axis % x.ndim
    m = _mask_bool(mask, x.shape, ax)
    if m is not None:
        if not m.any(axis=ax).all():
            raise ValueError("max_pool: a slice is fully masked")
        x = np.where(m, x, -np.inf)
    arg = np.argmax(x, axis=ax)
    out = np.take_along_axis(x, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _node(out, (a,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; exact identity when ``train`` is off or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's ``grad``.

    Leaves owned by ``store`` accumulate into the store's buffers.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------

class ParamStore:
    """Named learnable leaves with gradient accumulators of matching shape."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.version = 0  # bumped by every optimizer step

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad[...] = 0.0

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self._params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        for name, value in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            t = self._params[name]
            if t.shape != value.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {t.shape}")
            t.data[...] = value
        if strict:
            missing = set(self._params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, t in self._params.items():
            other.add(k, t.data)
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, store: ParamStore, fingerprint: dict | None = None) -> None:
    """Write named tensors plus a config fingerprint to an ``.npz`` atomically."""
    arrays = {f"param::{k}": t.data for k, t in store.items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps({"fingerprint": fingerprint or {}, "names": store.names()}).encode(), dtype=np.uint8
    )
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        state = OrderedDict((name, z[f"param::{name}"].copy()) for name in meta["names"])
    return state, meta["fingerprint"]


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if v > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    def format(self) -> str:
        lines = [f"{'parameter':<28} {'entries':>8} {'max_rel_err':>12}"]
        for k, v in self.max_rel_error.items():
            flag = "  FAIL" if v > self.tol else ""
            lines.append(f"{k:<28} {self.checked[k]:>8} {v:>12.3e}{flag}")
        lines.append(f"worst={self.worst:.3e} tol={self.tol:.1e} -> {'OK' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps roundoff on ~0 gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn, store: ParamStore, eps: float = 1e-5, tol: float = 1e-4,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn(store) -> scalar Tensor`` with central differences.

    Tensors larger than ``max_entries`` are checked on a random subsample.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    backward(fn(store), store)
    analytic = {k: g.copy() for k, g in store.grads().items()}
    report = GradCheckReport(tol=tol)
    for name, param in store.items():
        flat = param.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(store).item()
            flat[i] = orig - eps
            fm = fn(store).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric, floor))
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx)
    store.zero_grad()
    return report
