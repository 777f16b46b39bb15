"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every differentiable op appends a :class:`Node` carrying a monotonically
increasing sequence number.  ``backward`` collects the nodes reachable from a
scalar output and visits them once each in reverse creation order, which is a
valid reverse topological order because inputs are always created before the
ops that consume them.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation / inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- backward ---------------------------------------------------------------

def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``output``."""
    if output.data.size != 1:
        raise ValueError(f"backward() needs a scalar output, got shape {output.shape}")
    if output.node is None:
        if output.requires_grad:
            output.grad = np.ones_like(output.data) if output.grad is None else output.grad + 1.0
        return

    nodes: dict[int, Node] = {}
    stack = [output.node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        for p in node.parents:
            if p.node is not None and p.node.seq not in nodes:
                stack.append(p.node)

    grads: dict[int, np.ndarray] = {output.node.seq: np.ones_like(output.data)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        if node.backward is None:
            raise RuntimeError("graph already consumed by a previous backward pass")
        parent_grads = node.backward(g)
        node.backward = None
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                k = p.node.seq
                grads[k] = pg if k not in grads else grads[k] + pg


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        s = float(b)
        return _make(a.data * s, "scale", (a,), lambda g: (g * s,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value; clamp the input first")
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def power(x: Tensor, exponent: float) -> Tensor:
    """``x ** exponent`` for a constant exponent.

    Where the derivative is unbounded (zero base, exponent < 1) the gradient is
    taken as zero; exponent 0 yields a constant.
    """
    e = float(exponent)
    xd = x.data
    if e == 0.0:
        return _make(np.ones_like(xd), "pow", (x,), lambda g: (np.zeros_like(g),))
    y = np.power(xd, e)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(xd, e - 1.0)
        if e < 1.0:
            d = np.where(xd == 0.0, 0.0, d)
        return (g * d,)

    return _make(y, "pow", (x,), bw)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    xd = x.data
    y = np.clip(xd, lo, hi)
    mask = y == xd
    return _make(y, "clamp", (x,), lambda g: (g * mask,))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (xd * np.expand_dims(scale, axis),)

    return _make(n, "norm", (x,), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor, activation: bool = False) -> Tensor:
    """``x @ weight + bias``, optionally followed by ReLU, as one graph node."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd
    y += bias.data
    mask = None
    if activation:
        mask = y > 0
        y *= mask

    def bw(g):
        if mask is not None:
            g = g * mask
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        return gx, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)

    return _make(y, "linear", (x, weight, bias), bw)


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis`` plus argmax indices; gradient goes to the argmax only."""
    xd = x.data
    idx = np.argmax(xd, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    vals = np.take_along_axis(xd, idx_k, axis=axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    out = vals if keepdims else np.squeeze(vals, axis=axis)
    return _make(out, "max", (x,), bw), idx


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax input contains non-finite values")
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an m x c score matrix."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"softmax_rows expects an m x c matrix, got {x.shape}")
    return softmax(x, axis=1)


# -- shape manipulation ---------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if x.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows (axis 0) by an integer index array of any shape.

    The result has shape ``index.shape + x.shape[1:]``; duplicated indices
    accumulate their gradients.
    """
    index = np.asarray(index, dtype=np.intp)
    m = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= m):
        raise IndexError(f"gather_rows index out of range for {m} rows")
    shape = x.shape

    def bw(g):
        return (scatter_add_rows(index.reshape(-1), g.reshape((-1,) + shape[1:]), m),)

    return _make(x.data[index], "gather", (x,), bw)


def scatter_add_rows(index: np.ndarray, rows: np.ndarray, m: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` into an ``m``-row zero array."""
    flat = rows.reshape(len(index), -1)
    sel = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                            shape=(m, len(index)))
    return np.asarray(sel @ flat).reshape((m,) + rows.shape[1:])


def pick(x: Tensor, index) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[rows, index] = g
        return (gx,)

    return _make(x.data[rows, index], "pick", (x,), bw)


def broadcast_rows(x: Tensor, m: int) -> Tensor:
    """Broadcast a 1 x c row over ``m`` rows."""
    if x.ndim != 2 or x.shape[0] != 1:
        raise ValueError(f"broadcast_rows expects a 1 x c row, got {x.shape}")
    return _make(np.repeat(x.data, m, axis=0), "broadcast", (x,),
                 lambda g: (g.sum(axis=0, keepdims=True),))


def repeat_rows(x: Tensor, ratio: int) -> Tensor:
    """Parent-major duplication: row i occupies rows i*ratio .. i*ratio+ratio-1."""
    return gather_rows(x, np.repeat(np.arange(x.shape[0]), ratio))


# -- gradient checking ------------------------------------------------------------

def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x, h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor (then ``f(x)`` is evaluated) or a sequence of Tensors that
    ``f()`` closes over.  ``max_entries`` caps the number of probed entries per
    tensor (chosen by ``seed``); every tensor is still probed.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = call()
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            probe = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                probe = rng.choice(flat.size, size=max_entries, replace=False)
            for i in probe:
                orig = flat[i]
                flat[i] = orig + h
                fp = call().item()
                flat[i] = orig - h
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = a.reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad = rg
        t.grad = g
    return worst


# -- optimisation -------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"adam shape mismatch: param {p.data.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step_index: int, base_lr: float = 1e-3, decay: float = 0.99, every: int = 2) -> float:
    """Step decay: ``base_lr * decay ** (step_index // every)`` (step = epoch)."""
    if step_index < 0:
        raise ValueError("step_index must be non-negative")
    return base_lr * decay ** (step_index // every)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
