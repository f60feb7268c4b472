"""Dense tensors with reverse-mode differentiation on a recorded operation tape.

Design rules:
  * No implicit broadcasting. Binary elementwise ops require identical shapes;
    the only shape-adapting primitives are explicit (`scale`, `add_row`,
    `mul_row`, `reshape`, `repeat_axis`, ...).
  * Recording happens only inside a `with Graph():` block and only when an
    input has `requires_grad`. Evaluation outside a graph costs nothing extra.
  * `backward` never zeroes gradient slots; repeated calls accumulate. Clearing
    is the trainer's job (`zero_grads`).

Row-oriented ops (`softmax_rows`, `rows_l2_normalize`, ...) treat the last axis
as the row; leading axes are free, so the same primitives serve 2-D contract
shapes and batched [B, T, ...] model shapes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .precision import active_dtype, check_finite_enabled

_ids = itertools.count()


class Tensor:
    """N-dimensional array of run-precision reals with an optional grad slot."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=active_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tid = next(_ids)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.tid = next(_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar for composite code; all routed through
    # the audited primitives below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """Untracked tensor (masks, detached values)."""
    return Tensor(data, requires_grad=False)


def detach(t: Tensor) -> Tensor:
    return Tensor._wrap(t.data, requires_grad=False)


class Node:
    """One recorded operation: kind, inputs, output, and its gradient rule.

    `backward(out_grad, needs)` returns one array (or None) per input;
    `needs[i]` tells the rule whether input i's gradient is actually wanted.
    """

    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Tape of operations in execution order; backward replays it reversed."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graph stack corrupted"
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._output_ids.add(node.output.tid)

    def produced(self, t: Tensor) -> bool:
        return t.tid in self._output_ids


def _active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operation produces NaN or Inf."""


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward: Callable) -> Tensor:
    if check_finite_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite output from {kind}")
    graph = _active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=track)
    if track:
        graph.record(Node(kind, inputs, out, backward))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate grad slots of every tracked tensor reachable from `loss`.

    Accumulates into existing grads; does not reset anything.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.produced(loss):
        raise ValueError("loss was not produced by this graph")
    flowing: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = flowing.get(node.output.tid)
        if g_out is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        grads = node.backward(g_out, needs)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            acc = flowing.get(t.tid)
            flowing[t.tid] = g if acc is None else acc + g
    # Flush into grad slots (leaves and intermediates alike).
    seen: dict[int, Tensor] = {loss.tid: loss}
    for node in graph.nodes:
        for t in node.inputs:
            seen[t.tid] = t
        seen[node.output.tid] = node.output
    for tid, g in flowing.items():
        t = seen[tid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B.  B may be a 2-D projection applied to any leading shape of A;
    otherwise leading dims must match exactly (stacked matmul)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g, needs):
        ga = g @ np.swapaxes(b.data, -1, -2) if needs[0] else None
        gb = None
        if needs[1]:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out_data, bwd)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g, needs: (g if needs[0] else None,
                                   g if needs[1] else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g, needs: (g if needs[0] else None,
                                   -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g, needs: (g * b.data if needs[0] else None,
                                   g * a.data if needs[1] else None))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (the one sanctioned 'broadcast')."""
    c = active_dtype()(c)
    return _emit("scale", (a,), a.data * c,
                 lambda g, needs: (g * c if needs[0] else None,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _emit("exp", (a,), out_data,
                 lambda g, needs: (g * out_data if needs[0] else None,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", (a,), s,
                 lambda g, needs: (g * s * (1.0 - s) if needs[0] else None,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out_data = a.data * s

    def bwd(g, needs):
        return (g * s * (1.0 + a.data * (1.0 - s)) if needs[0] else None,)

    return _emit("silu", (a,), out_data, bwd)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"exp": exp, "sigmoid": sigmoid, "silu": silu}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind: {add, sub, mul} binary, {exp, sigmoid, silu} unary,
    'scale' takes a python scalar as b."""
    if kind == "scale":
        if not isinstance(b, (int, float)):
            raise ValueError("scale needs a python scalar second operand")
        return scale(a, b)
    if kind in _ELEMENTWISE_BINARY:
        if not isinstance(b, Tensor):
            raise ValueError(f"{kind} needs a tensor second operand")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _ELEMENTWISE_UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add_row(a: Tensor, v: Tensor) -> Tensor:
    """a[..., n] + v[n] (explicit bias add over rows)."""
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ValueError(f"add_row shape mismatch: {a.shape} + {v.shape}")

    def bwd(g, needs):
        gv = g.reshape(-1, v.shape[0]).sum(axis=0) if needs[1] else None
        return (g if needs[0] else None, gv)

    return _emit("add_row", (a, v), a.data + v.data, bwd)


def mul_row(a: Tensor, v: Tensor) -> Tensor:
    """a[..., n] * v[n] (explicit per-channel scaling over rows)."""
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ValueError(f"mul_row shape mismatch: {a.shape} * {v.shape}")

    def bwd(g, needs):
        ga = g * v.data if needs[0] else None
        gv = (g * a.data).reshape(-1, v.shape[0]).sum(axis=0) if needs[1] else None
        return ga, gv

    return _emit("mul_row", (a, v), a.data * v.data, bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stable softmax over the last axis (max-subtraction applied)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _emit("softmax_rows", (a,), out_data, bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    sm = np.exp(out_data)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", (a,), out_data, bwd)


def rows_l2_normalize(a: Tensor, eps: float) -> Tensor:
    """Rows scaled to unit L2 norm; rows with norm < eps are scaled by 1/eps."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = a.data / denom
    small = norm < eps

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        ga = np.where(small, g / eps, (g - out_data * dot) / denom)
        return (ga,)

    return _emit("rows_l2_normalize", (a,), out_data, bwd)


def rows_l2_norm(a: Tensor) -> Tensor:
    """L2 norm of each row: [..., n] -> [...]. Gradient at a zero row is 0."""
    norm = np.sqrt((a.data ** 2).sum(axis=-1))

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        safe = np.maximum(norm, np.finfo(a.data.dtype).tiny)
        return ((g / safe)[..., None] * a.data,)

    return _emit("rows_l2_norm", (a,), norm, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g, needs: (g.reshape(a.shape) if needs[0] else None,))


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _emit("swap_axes", (a,), np.swapaxes(a.data, ax1, ax2),
                 lambda g, needs: (np.swapaxes(g, ax1, ax2) if needs[0] else None,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, needs):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _emit("concat", tuple(tensors), out_data, bwd)


def repeat_axis(a: Tensor, axis: int, k: int) -> Tensor:
    """Repeat each slice along `axis` k times (block repeat, for KV grouping)."""
    out_data = np.repeat(a.data, k, axis=axis)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        ax = axis % a.ndim
        shp = g.shape[:ax] + (a.shape[ax], k) + g.shape[ax + 1:]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _emit("repeat_axis", (a,), out_data, bwd)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids (ids are data, not a Tensor)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"token id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    out_data = table.data[ids]

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embed", (table,), out_data, bwd)


def shift_rows_down(a: Tensor, first: Optional[Tensor] = None) -> Tensor:
    """Shift along axis -2 by one step: out[..., t, :] = a[..., t-1, :].

    Row 0 comes from `first` (an untracked [n] vector) or zeros. Used for
    token-shift; gradient w.r.t. `first` is not propagated.
    """
    out_data = np.empty_like(a.data)
    out_data[..., 1:, :] = a.data[..., :-1, :]
    if first is None:
        out_data[..., 0, :] = 0.0
    else:
        if first.requires_grad:
            raise ValueError("shift_rows_down: `first` must be untracked")
        out_data[..., 0, :] = first.data

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        ga = np.zeros_like(a.data)
        ga[..., :-1, :] = g[..., 1:, :]
        return (ga,)

    return _emit("shift_rows_down", (a,), out_data, bwd)


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), a.data.sum(dtype=a.data.dtype).reshape(()),
                 lambda g, needs: (np.broadcast_to(g, a.shape).copy() if needs[0] else None,))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def normalize_rows(a: Tensor, eps: float) -> Tensor:
    """Zero-mean unit-variance per row (parameter-free group normalization)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    n = (a.data - mu) * inv

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gm = g - g.mean(axis=-1, keepdims=True)
        return (inv * (gm - n * (g * n).mean(axis=-1, keepdims=True)),)

    return _emit("normalize_rows", (a,), n, bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all positions of -log softmax(logits)[target]."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"cross_entropy target shape {targets.shape} != {logits.shape[:-1]}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = flat.shape[0]
    loss = np.asarray(-logp[np.arange(n), tgt].mean(), dtype=logits.data.dtype)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        sm = np.exp(logp)
        sm[np.arange(n), tgt] -= 1.0
        return ((g / n) * sm.reshape(logits.shape),)

    return _emit("cross_entropy", (logits,), loss.reshape(()), bwd)


def straight_through(primary: Tensor, reference: Tensor) -> Tensor:
    """Forward returns `reference`'s values bit-exactly; gradient flows to
    `primary`. Realizes y = primary + stopgrad(reference - primary) without
    the floating-point round-off the literal expression would introduce."""
    _same_shape("straight_through", primary, reference)
    return _emit("straight_through", (primary, reference), reference.data.copy(),
                 lambda g, needs: (g if needs[0] else None, None))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic grad of f at x and central
    finite differences. Meant for f64 mode; f must be deterministic."""
    if eps <= 0:
        raise ValueError(f"grad_check eps must be positive, got {eps}")
    xa = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as g:
        loss = f(xa)
    backward(loss, g)
    analytic = np.zeros_like(xa.data) if xa.grad is None else xa.grad

    numeric = np.zeros_like(xa.data)
    xp = Tensor(x.data.copy())
    flat = xp.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(xp).item()
        flat[i] = orig - eps
        fm = f(xp).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
