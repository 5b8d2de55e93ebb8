"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every operation is applied eagerly and recorded as a node.  A
:class:`ComputeGraph` is the topologically ordered list of nodes reachable
from an output; it can be replayed on new leaf values (:func:`evaluate`) and
differentiated (:func:`backpropagate`).

Layouts follow channel-last conventions: images and feature maps are
``(N, H, W, C)`` and convolution kernels are ``(kh, kw, C_in, C_out)``.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "evaluate",
    "backpropagate",
    "finite_difference_check",
    "OPS",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the operation signature."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(f"node {node_id}: {message}" if node_id is not None else message)
        self.node_id = node_id


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or inf."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(f"node {node_id}: {message}" if node_id is not None else message)
        self.node_id = node_id


class GraphError(RuntimeError):
    pass


_node_ids = itertools.count()


def _f64(x: Any) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(x, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.data = _f64(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> ComputeGraph:
        graph = ComputeGraph.trace(self)
        backpropagate(graph, seed)
        return graph

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # thin operator sugar over the primitive set
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, _as_tensor(other))

    def __radd__(self, other: Tensor) -> Tensor:
        return add(_as_tensor(other), self)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, _as_tensor(other))

    def __mul__(self, c: float) -> Tensor:
        if isinstance(c, Tensor):
            raise TypeError("only multiplication by a Python scalar is supported")
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    output: Tensor
    ctx: Any = None
    requires_grad: bool = False


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]


OPS: dict[str, OpDef] = {}


def _register(name: str):
    def wrap(cls):
        OPS[name] = OpDef(cls.forward, cls.backward)
        return cls

    return wrap


def _run(op: str, arrays: Sequence[np.ndarray], attrs: dict, node_id: int) -> tuple[np.ndarray, Any]:
    try:
        out, ctx = OPS[op].forward(*arrays, **attrs)
    except ShapeError as exc:
        raise ShapeError(f"{op}: {exc}", node_id) from None
    out = _f64(out)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value", node_id)
    return out, ctx


def _apply(op: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    node_id = next(_node_ids)
    out, ctx = _run(op, [t.data for t in inputs], attrs, node_id)
    result = Tensor(out)
    rg = any(t.requires_grad for t in inputs)
    result.requires_grad = rg
    result.node = Node(node_id, op, tuple(inputs), attrs, result, ctx, rg)
    return result


# ---------------------------------------------------------------------------
# primitives


def _suffix_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


@_register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(x, k, stride=1, padding=0):
        if x.ndim != 4 or k.ndim != 4:
            raise ShapeError(f"expected NHWC input and (kh,kw,ci,co) kernel, got {x.shape}, {k.shape}")
        n, h, w, ci = x.shape
        kh, kw, kci, co = k.shape
        if kci != ci:
            raise ShapeError(f"kernel expects {kci} channels, input has {ci}")
        hp, wp = h + 2 * padding, w + 2 * padding
        if hp < kh or wp < kw:
            raise ShapeError("kernel larger than padded input")
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
        cols = np.empty((n, ho, wo, kh, kw, ci))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
        cols = cols.reshape(n * ho * wo, kh * kw * ci)
        out = cols @ k.reshape(kh * kw * ci, co)
        return out.reshape(n, ho, wo, co), (cols, x.shape, stride, padding)

    @staticmethod
    def backward(g, ctx, x, k, stride=1, padding=0):
        cols, xshape, stride, padding = ctx
        n, h, w, ci = xshape
        kh, kw, _, co = k.shape
        ho, wo = g.shape[1], g.shape[2]
        g2 = g.reshape(-1, co)
        dk = (cols.T @ g2).reshape(k.shape)
        dcols = (g2 @ k.reshape(-1, co).T).reshape(n, ho, wo, kh, kw, ci)
        dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, ci))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        return dx, dk


@_register("relu")
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0.0), None

    @staticmethod
    def backward(g, ctx, x):
        return (g * (x > 0),)


@_register("hinge")
class _Hinge(_Relu):
    pass


@_register("abs")
class _Abs:
    @staticmethod
    def forward(x):
        return np.abs(x), None

    @staticmethod
    def backward(g, ctx, x):
        return (g * np.sign(x),)


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _suffix_broadcast(a, b)
        return a + b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return g, _reduce_to(g, b.shape)


@_register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _suffix_broadcast(a, b)
        return a - b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return g, -_reduce_to(g, b.shape)


@_register("scale")
class _Scale:
    @staticmethod
    def forward(x, c=1.0):
        return x * c, None

    @staticmethod
    def backward(g, ctx, x, c=1.0):
        return (g * c,)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(x, axis=None):
        return np.sum(x, axis=axis), None

    @staticmethod
    def backward(g, ctx, x, axis=None):
        return (np.array(_expand_reduced(g, x.shape, axis)),)


@_register("mean")
class _Mean:
    @staticmethod
    def forward(x, axis=None):
        if x.size == 0:
            raise ShapeError("mean of an empty tensor")
        return np.mean(x, axis=axis), None

    @staticmethod
    def backward(g, ctx, x, axis=None):
        count = x.size // max(np.size(np.sum(x, axis=axis)), 1)
        return (np.array(_expand_reduced(g, x.shape, axis)) / count,)


@_register("l2norm")
class _L2Norm:
    """Euclidean norm over the last (channel) axis."""

    @staticmethod
    def forward(x):
        out = np.sqrt(np.sum(x * x, axis=-1))
        return out, out

    @staticmethod
    def backward(g, ctx, x):
        norm = ctx[..., None]
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g[..., None] * x / safe, 0.0),)


@_register("normalize")
class _Normalize:
    """Unit vectors along the last axis; zero vectors map to zero."""

    @staticmethod
    def forward(x):
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        u = x / safe
        return u, (u, norm, safe)

    @staticmethod
    def backward(g, ctx, x):
        u, norm, safe = ctx
        proj = np.sum(g * u, axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - u * proj) / safe, 0.0),)


@_register("dot")
class _Dot:
    """Inner product over the last axis of two same-shape tensors."""

    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"dot needs equal shapes, got {a.shape} and {b.shape}")
        return np.sum(a * b, axis=-1), None

    @staticmethod
    def backward(g, ctx, a, b):
        return g[..., None] * b, g[..., None] * a


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        p = z / z.sum(axis=-1, keepdims=True)
        return p, p

    @staticmethod
    def backward(g, p, x):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)


@_register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(x):
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out, out

    @staticmethod
    def backward(g, out, x):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


@_register("cmax")
class _ChannelMax:
    """Max over the last axis; ties route gradient to the lowest index."""

    @staticmethod
    def forward(x):
        idx = np.argmax(x, axis=-1)
        return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], idx

    @staticmethod
    def backward(g, idx, x):
        dx = np.zeros_like(x)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx,)


def _check_window(x: np.ndarray, w: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects NHWC, got {x.shape}")
    if w < 1 or x.shape[1] % w or x.shape[2] % w:
        raise ShapeError(f"{what}: spatial dims {x.shape[1:3]} not divisible by {w}")


@_register("avgpool")
class _AvgPool:
    @staticmethod
    def forward(x, window=2):
        _check_window(x, window, "avgpool")
        n, h, w, c = x.shape
        return x.reshape(n, h // window, window, w // window, window, c).mean(axis=(2, 4)), None

    @staticmethod
    def backward(g, ctx, x, window=2):
        up = np.repeat(np.repeat(g, window, axis=1), window, axis=2)
        return (up / (window * window),)


@_register("upsample")
class _Upsample:
    """Nearest-neighbour upsampling by an integer factor."""

    @staticmethod
    def forward(x, factor=2):
        if x.ndim != 4 or factor < 1:
            raise ShapeError(f"upsample expects NHWC and factor >= 1, got {x.shape}, {factor}")
        return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2), None

    @staticmethod
    def backward(g, ctx, x, factor=2):
        n, h, w, c = x.shape
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape=()):
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    @staticmethod
    def backward(g, ctx, x, shape=()):
        return (g.reshape(x.shape),)


@_register("index_select")
class _IndexSelect:
    """Rows of a tensor picked along axis 0."""

    @staticmethod
    def forward(x, index=()):
        idx = np.asarray(index, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError(f"index out of range for axis of length {x.shape[0]}")
        return x[idx], idx

    @staticmethod
    def backward(g, idx, x, index=()):
        dx = np.zeros_like(x)
        np.add.at(dx, idx, g)
        return (dx,)


@_register("pick")
class _Pick:
    """``out[..., ] = x[..., index[...]]`` along the last axis."""

    @staticmethod
    def forward(x, index=()):
        idx = np.asarray(index, dtype=np.intp)
        if idx.shape != x.shape[:-1]:
            raise ShapeError(f"pick index shape {idx.shape} does not match {x.shape[:-1]}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
            raise ShapeError("pick index out of range")
        return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], idx

    @staticmethod
    def backward(g, idx, x, index=()):
        dx = np.zeros_like(x)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx,)


# ---------------------------------------------------------------------------
# functional front-end


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return _apply("conv2d", (x, k), stride=stride, padding=padding)


def relu(x: Tensor) -> Tensor:
    return _apply("relu", (x,))


def hinge(x: Tensor) -> Tensor:
    """max(0, x)."""
    return _apply("hinge", (x,))


def absolute(x: Tensor) -> Tensor:
    return _apply("abs", (x,))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _apply("sub", (a, b))


def scale(x: Tensor, c: float) -> Tensor:
    return _apply("scale", (x,), c=float(c))


def tsum(x: Tensor, axis=None) -> Tensor:
    return _apply("sum", (x,), axis=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    return _apply("mean", (x,), axis=axis)


def l2norm(x: Tensor) -> Tensor:
    return _apply("l2norm", (x,))


def normalize(x: Tensor) -> Tensor:
    return _apply("normalize", (x,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return _apply("dot", (a, b))


def softmax(x: Tensor) -> Tensor:
    return _apply("softmax", (x,))


def log_softmax(x: Tensor) -> Tensor:
    return _apply("log_softmax", (x,))


def channel_max(x: Tensor) -> Tensor:
    return _apply("cmax", (x,))


def avgpool(x: Tensor, window: int) -> Tensor:
    return _apply("avgpool", (x,), window=int(window))


def upsample(x: Tensor, factor: int) -> Tensor:
    return _apply("upsample", (x,), factor=int(factor))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", (x,), shape=tuple(shape))


def index_select(x: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    return _apply("index_select", (x,), index=np.asarray(index, dtype=np.intp))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    return _apply("pick", (x,), index=np.asarray(index, dtype=np.intp))


def add_all(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# graphs


@dataclass(eq=False)
class ComputeGraph:
    """Topologically ordered nodes reachable from ``output``."""

    output: Tensor
    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    evaluated: bool = True

    @classmethod
    def trace(cls, output: Tensor) -> ComputeGraph:
        nodes: list[Node] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep graphs would overflow recursion
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t.node)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                leaves.append(t)
                continue
            stack.append((t, True))
            for parent in reversed(t.node.inputs):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output, nodes, leaves)

    def named_leaves(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.leaves if t.name is not None}

    def reset(self) -> None:
        """Mark outputs stale; :func:`backpropagate` refuses until re-evaluated."""
        self.evaluated = False


def evaluate(graph: ComputeGraph, inputs: Mapping[str, Any] | None = None) -> dict[str, np.ndarray]:
    """Re-run every node with leaf values rebound from ``inputs`` (by leaf name)."""
    named = graph.named_leaves()
    for key, value in (inputs or {}).items():
        if key not in named:
            raise GraphError(f"no leaf named {key!r} in graph")
        arr = _f64(value)
        if arr.shape != named[key].shape:
            raise ShapeError(f"input {key!r} has shape {arr.shape}, expected {named[key].shape}")
        named[key].data = arr
    results: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        out, ctx = _run(node.op, [t.data for t in node.inputs], node.attrs, node.id)
        node.output.data = out
        node.ctx = ctx
        if node.output.name is not None:
            results[node.output.name] = out
    graph.evaluated = True
    results["output"] = graph.output.data
    return results


def backpropagate(graph: ComputeGraph, seed: np.ndarray | float | None = None) -> dict[int, np.ndarray]:
    """Fill ``.grad`` of every requires_grad leaf in ``graph``.

    Leaves that receive no gradient get zeros.  Returns the gradient map keyed
    by ``id(tensor)``.
    """
    if not graph.evaluated:
        raise GraphError("backpropagate called before evaluate")
    out = graph.output
    if seed is None:
        if out.data.size != 1:
            raise ShapeError("seed required for non-scalar output")
        seed_arr = np.ones_like(out.data)
    else:
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != out.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} does not match output {out.shape}")
    grads: dict[int, np.ndarray] = {id(out): seed_arr}
    for node in reversed(graph.nodes):
        if not node.requires_grad:
            continue
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = OPS[node.op].backward(g, node.ctx, *[t.data for t in node.inputs], **node.attrs)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in graph.leaves:
        if leaf.requires_grad:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
    return grads


def finite_difference_check(
    scalar_fn: Callable[..., Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error of the analytic gradient against central differences.

    ``scalar_fn(*params)`` must return a one-element tensor.  The error per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = scalar_fn(*params)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError("scalar_fn must return one finite value")
    graph = ComputeGraph.trace(out)
    backpropagate(graph)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        v = float(scalar_fn(*params).data)
        if not np.isfinite(v):
            raise NonFiniteError("scalar_fn returned a non-finite value")
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = value()
            flat[i] = orig - epsilon
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
