"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every operation records a node on an implicit tape (the chain of
``GraphNode`` objects hanging off output tensors).  ``backward`` walks the
recorded graph once in reverse topological order and accumulates adjoints
into the ``grad`` buffers of the participating leaves.  Tensors are float64
throughout; broadcasting is limited to bias addition.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "GraphNode",
    "no_grad",
    "matmul",
    "transpose",
    "relu",
    "conv2d",
    "maxpool2d",
    "reshape",
    "add",
    "scale",
    "add_bias",
    "sum_all",
    "softmax",
    "softmax_cross_entropy",
    "straight_through",
    "backward",
]

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (fast inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional handle into the autodiff graph.

    ``grad`` is lazily allocated: ``None`` means zero.  Data is treated as
    immutable once the tensor participates in a graph; the only sanctioned
    in-place mutation is an optimizer updating parameter values between
    steps (after the step's graph has been consumed).
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["GraphNode"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, contribution: np.ndarray) -> None:
        if contribution.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {contribution.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = contribution.copy()
        else:
            self.grad += contribution

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, context: str = "tensor") -> None:
        if not self.is_finite():
            raise NumericError(f"non-finite values in {context}")

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add(self, Tensor(np.full_like(self.data, float(other))))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor*tensor product not supported; use matmul")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req}{tag})"


class GraphNode:
    """One recorded operation: op kind, input handles, output handle, and a
    closure computing input adjoints from the output adjoint."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """The recorded operations reachable from one output, in topological
    order (every node's inputs precede it)."""

    def __init__(self, nodes: Sequence[GraphNode]):
        self.nodes = list(nodes)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        nodes: list[GraphNode] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor._node
            if node is None:
                continue
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((tensor, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in visited:
                    stack.append((inp, False))
        return cls(nodes)


def _tracked(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad or t._node is not None for t in tensors)


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _tracked(*inputs):
        out.requires_grad = True
        out._node = GraphNode(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate (sum) into the same
    buffers.  Each recorded node is visited exactly once, in reverse
    topological order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = Graph.trace(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        out_adj = adjoints.pop(id(node.output), None)
        if out_adj is None:
            continue
        contributions = node.backward_fn(out_adj)
        for inp, contrib in zip(node.inputs, contributions):
            if contrib is None:
                continue
            prev = adjoints.get(id(inp))
            adjoints[id(inp)] = contrib if prev is None else prev + contrib
            if inp._node is None and inp.requires_grad:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        adj = adjoints.get(key)
        if adj is not None:
            leaf.accumulate_grad(np.asarray(adj, dtype=np.float64).reshape(leaf.data.shape))


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors; backward is dA = g Bᵀ, dB = Aᵀ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return g @ b_data.T, a_data.T @ g

    return _make("matmul", (a, b), a_data @ b_data, backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.data.shape}")

    def backward_fn(g):
        return (g.T,)

    return _make("transpose", (a,), a.data.T, backward_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _make("relu", (x,), np.where(mask, x.data, 0.0), backward_fn)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with FCkk kernels.

    Accumulation runs in fixed (c, kh, kw) order, one shifted slice at a
    time, so the result is bit-reproducible against a straight per-element
    loop summing in the same order.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d tensors, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape}, kernel {w.data.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d output size not integral: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if pad:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    w_data = w.data

    out = np.zeros((n, f, ho, wo))
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, ci, u:u + stride * ho:stride, v:v + stride * wo:stride]
                out += xs[:, None, :, :] * w_data[None, :, ci, u, v, None, None]

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w_data)
        for ci in range(c):
            for u in range(kh):
                for v in range(kw):
                    xs = xp[:, ci, u:u + stride * ho:stride, v:v + stride * wo:stride]
                    dw[:, ci, u, v] += np.tensordot(g, xs, axes=([0, 2, 3], [0, 1, 2]))
                    dxp[:, ci, u:u + stride * ho:stride, v:v + stride * wo:stride] += np.einsum(
                        "nfij,f->nij", g, w_data[:, ci, u, v]
                    )
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw

    return _make("conv2d", (x, w), out, backward_fn)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties route gradient to the first
    maximum in window scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d tensor, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d size {h}x{w} not divisible by window {k}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, k * k
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, argmax[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _make("maxpool2d", (x,), out, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.data.shape

    def backward_fn(g):
        return (g.reshape(orig),)

    return _make("reshape", (x,), x.data.reshape(shape), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward_fn(g):
        return g, g

    return _make("add", (a, b), a.data + b.data, backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _make("scale", (x,), x.data * factor, backward_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: b has length x.shape[1], broadcast over the
    remaining axes.  The only broadcasting this engine supports."""
    if b.data.ndim != 1 or x.data.ndim < 2 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"bias shape {b.data.shape} incompatible with input {x.data.shape}")
    bshape = (1, b.data.shape[0]) + (1,) * (x.data.ndim - 2)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def backward_fn(g):
        return g, g.sum(axis=reduce_axes)

    return _make("add_bias", (x, b), x.data + b.data.reshape(bshape), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).copy() if shape else g.copy(),)

    return _make("sum", (x,), np.asarray(x.data.sum()), backward_fn)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-d array (plain numpy, no graph)."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target], max-shifted for
    stability."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x C logits, got {logits.data.shape}")
    n, c = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch size {n}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise IndexError(f"target class out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), targets].mean()
    probs = np.exp(log_probs)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return _make("softmax_cross_entropy", (logits,), np.asarray(loss), backward_fn)


def straight_through(x: Tensor, values: np.ndarray,
                     grad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Forward to precomputed ``values``; backward passes the upstream
    gradient through to ``x`` unchanged, optionally zeroed by ``grad_mask``."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != x.data.shape:
        raise ShapeError(f"straight_through value shape {values.shape} vs input {x.data.shape}")

    def backward_fn(g):
        return (g if grad_mask is None else g * grad_mask,)

    return _make("straight_through", (x,), values, backward_fn)
