"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable value in the package is a :class:`Tensor` wrapping a
float64 numpy array.  Primitives record a backward closure when any input
requires a gradient; :func:`backward` replays them in reverse creation order.

Shapes are explicit: elementwise ops accept equal shapes or a scalar on one
side, and anything else must go through :func:`broadcast_to`.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()
_state = threading.local()

CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's contract."""


class NonFiniteError(ValueError):
    """Raised when a primitive receives NaN or infinite values."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# --- MAC instrumentation -----------------------------------------------------


class MacCounter:
    """Accumulates multiply-accumulate counts of matmuls, keyed by section."""

    def __init__(self) -> None:
        self.by_section: dict[str, int] = {}
        self.section_name = "other"

    def add(self, macs: int, section: str | None = None) -> None:
        key = section or self.section_name
        self.by_section[key] = self.by_section.get(key, 0) + int(macs)

    @contextmanager
    def section(self, name: str):
        prev, self.section_name = self.section_name, name
        try:
            yield self
        finally:
            self.section_name = prev

    def total(self) -> int:
        return sum(self.by_section.values())


def active_counter() -> MacCounter | None:
    return getattr(_state, "counter", None)


@contextmanager
def count_macs():
    """Count matmul MACs executed in the block (summed over the batch)."""
    counter = MacCounter()
    prev = active_counter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def mac_section(name: str):
    counter = active_counter()
    if counter is None:
        yield None
        return
    with counter.section(name):
        yield counter


# --- Tensor ------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or infinity")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_inputs(op: str, *arrays: np.ndarray) -> None:
    if not CHECK_FINITE:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --- backward traversal ------------------------------------------------------


class GradientTape:
    """Operations reachable from a root, in an order where producers precede consumers."""

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        # ids are issued at creation, so creation order is a topological order
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the full map from node id to gradient, root included.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    if not root.requires_grad:
        return grads
    tape = GradientTape(root)
    for node in reversed(tape.nodes):
        g = grads.get(node._id)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return grads


# --- elementwise binary --------------------------------------------------------


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    _check_inputs(op, a.data, b.data)
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand broadcast against a full tensor
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _fit(g, a.shape), _fit(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _fit(g, a.shape), _fit(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _fit(g * b.data, a.shape), _fit(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("scale", a.data)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


# --- linear algebra and shape --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported layouts: ``(..., n, k) @ (..., k, m)`` with identical leading
    dims, ``(..., n, k) @ (k, m)`` (a shared linear map), and ``(n, k) @ (k,)``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim == 1:
        if a.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    elif b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    elif a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _check_inputs("matmul", a.data, b.data)
    out = a.data @ b.data

    counter = active_counter()
    if counter is not None:
        inner = a.shape[-1]
        counter.add(out.size * inner)

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; the backward pass sums over repeated axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    keep_axes = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if keep_axes:
            g = g.sum(axis=tuple(ax - lead for ax in keep_axes), keepdims=True)
        return (g.reshape(a.shape),)

    return _make(np.array(out), (a,), bw, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing (slicing)."""
    a = _as_tensor(a)
    out = np.array(a.data[key])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def take(a: Tensor, index: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an index list (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    ax = axis % a.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax])):
        raise ShapeError(f"take: index out of range for axis of length {a.shape[ax]}")

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=ax), (a,), bw, "take")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, k] = a[b, index[b, k]]`` for ``a`` of shape (B, N, ...)."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not fit {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("gather_rows: index out of range")
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(a.data[rows, idx], (a,), bw, "gather_rows")


# --- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))
    return _make(out, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis)),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis))
    count = a.size // max(out.size, 1)

    def bw(g):
        return (np.array(_expand_reduced(g, a.shape, axis)) / count,)

    return _make(out, (a,), bw, "mean")


# --- unary nonlinearities ----------------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("exp", a.data)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("log", a.data)
    if np.any(a.data <= 0):
        raise ValueError("log: input outside the domain (0, inf)")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def cosh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("cosh", a.data)
    return _make(np.cosh(a.data), (a,), lambda g: (g * np.sinh(a.data),), "cosh")


def log_cosh(a: Tensor) -> Tensor:
    """log(cosh(x)) evaluated as |x| + log1p(exp(-2|x|)) - log 2."""
    a = _as_tensor(a)
    _check_inputs("log_cosh", a.data)
    ax = np.abs(a.data)
    out = ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)
    return _make(out, (a,), lambda g: (g * np.tanh(a.data),), "log_cosh")


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("square", a.data)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    _check_inputs("gelu", a.data)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_inputs("softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def masked_softmax(scores: Tensor, mask: Tensor) -> Tensor:
    """Row softmax weighted by a multiplicative mask along the last axis.

    ``out_ij = exp(s_ij) m_ij / sum_k exp(s_ik) m_ik``; gradients reach both
    the scores and the mask.  The row maximum is taken over entries with a
    positive mask so the result is independent of masked-out scores.
    """
    s = _as_tensor(scores)
    m = _as_tensor(mask)
    if s.shape != m.shape:
        raise ShapeError(f"masked_softmax: scores {s.shape} vs mask {m.shape}")
    _check_inputs("masked_softmax", s.data, m.data)
    live = m.data > 0
    if not np.all(live.any(axis=-1)):
        raise ValueError("masked_softmax: a row has no admissible entry")
    shift = np.where(live, s.data, -np.inf).max(axis=-1, keepdims=True)
    # masked entries keep their true exp so the mask gradient is exact
    e = np.exp(np.minimum(s.data - shift, 700.0))
    w = e * m.data
    z = w.sum(axis=-1, keepdims=True)
    out = w / z

    def bw(g):
        centered = g - (g * out).sum(axis=-1, keepdims=True)
        return out * centered, (e / z) * centered

    return _make(out, (s, m), bw, "masked_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    _check_inputs("layer_norm", x.data, gamma.data, beta.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# --- gradient routing --------------------------------------------------------


def maximum(*scalars: Tensor, straight_through: bool = False) -> Tensor:
    """Maximum of scalar tensors.

    By default the gradient goes to the first maximal argument.  With
    ``straight_through`` every argument receives the upstream gradient
    unchanged.
    """
    ts = [_as_tensor(s) for s in scalars]
    if not ts:
        raise ShapeError("maximum of nothing")
    for t in ts:
        if t.size != 1:
            raise ShapeError(f"maximum expects scalars, got shape {t.shape}")
    _check_inputs("maximum", *(t.data for t in ts))
    vals = [float(t.data) for t in ts]
    winner = int(np.argmax(vals))
    shape = ts[0].shape

    def bw(g):
        if straight_through:
            return tuple(np.array(g).reshape(t.shape) for t in ts)
        return tuple(
            np.array(g).reshape(t.shape) if i == winner else np.zeros(t.shape) for i, t in enumerate(ts)
        )

    return _make(np.array(vals[winner]).reshape(shape), tuple(ts), bw, "maximum")


def ste(hard, soft: Tensor) -> Tensor:
    """Forward value of ``hard``, backward routes the gradient to ``soft`` unchanged."""
    hard = _as_tensor(hard)
    soft = _as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeError(f"ste: hard {hard.shape} vs soft {soft.shape}")
    _check_inputs("ste", hard.data, soft.data)
    return _make(hard.data.copy(), (hard, soft), lambda g: (None, g), "ste")


def stop_gradient(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.copy())


# --- helpers -------------------------------------------------------------------


def parameters_like(arrays: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


PRIMITIVES = (
    "matmul", "add", "sub", "mul", "div", "scale", "transpose", "reshape", "broadcast_to",
    "softmax", "masked_softmax", "layer_norm", "gelu", "mean", "sum", "concat", "getitem",
    "take", "gather_rows", "exp", "log", "cosh", "log_cosh", "square", "maximum", "ste",
)
