"""A small reverse-mode automatic differentiation core.

Tensors wrap float64 numpy arrays. Every operation records its parents and
a vector-Jacobian closure on the produced tensor; ``backward`` walks the
recorded graph once in reverse topological order and accumulates gradients
on every visited tensor. ``detach`` cuts the recording, which is how the
distillation teacher is frozen.

Graphs are plain per-tensor object references with no module state, so
independent graphs on different threads never interact. All arithmetic is
performed in 64-bit floats, including reductions.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "Tensor",
    "add",
    "backward",
    "concat_last_dim",
    "detach",
    "exp",
    "gather_rows",
    "grad_check",
    "leaky_relu",
    "log_softmax_rows",
    "matmul",
    "mean_all",
    "mul_elementwise",
    "reshape",
    "scale",
    "segment_mean",
    "sigmoid",
    "softmax_rows",
    "sum_all",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Light operator sugar over the functional ops below.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add(self, Tensor(np.float64(other)))
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul_elementwise(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, Tensor(np.float64(-other)))
        return add(self, scale(other, -1.0))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over the leading dims of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from err
    if out.shape != a.shape:
        raise ShapeError(f"add result {out.shape} must keep the shape of {a.shape}")
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result(out, (a, b), vjp)


def mul_elementwise(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from err
    if out.shape != a.shape:
        raise ShapeError(f"multiply result {out.shape} must keep the shape of {a.shape}")
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g * bd, a_shape), _unbroadcast(g * ad, b_shape)

    return _result(out, (a, b), vjp)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), vjp)


def concat_last_dim(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(
            f"concat needs matching leading dims, got {a.shape} and {b.shape}"
        )
    split = a.shape[-1]

    def vjp(g):
        return g[..., :split], g[..., split:]

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)

    def vjp(g):
        return (np.where(positive, g, slope * g),)

    return _result(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Evaluate through exp(-|x|) so neither branch can overflow.
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _result(out, (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor, stabilized by max subtraction."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _result(out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    return exp(log_softmax_rows(a))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.float64(a.data.sum()), (a,), vjp)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValidationError("mean_all of an empty tensor is undefined")
    shape, n = a.shape, a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.float64(a.data.mean()), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {old} to {shape}") from err

    def vjp(g):
        return (g.reshape(old),)

    return _result(out, (a,), vjp)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor by an integer index array.

    Repeated indices are allowed; their gradients accumulate.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"indices must be 1-D, got shape {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"gather index out of range for {n} rows")
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.data[idx], (a,), vjp)


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    """Average rows of a 2-D tensor into ``num_segments`` groups.

    Every segment id must occur at least once so no mean is taken over an
    empty group. Accumulation happens in float64.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"segment_mean needs a 2-D tensor, got {a.shape}")
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError("segment_ids must have one entry per row")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValidationError("segment id out of range")
    counts = np.bincount(seg, minlength=num_segments)
    if np.any(counts == 0):
        raise ValidationError("every segment must contain at least one row")
    total = np.zeros((num_segments, a.shape[1]))
    np.add.at(total, seg, a.data)
    out = total / counts[:, None]
    inv = 1.0 / counts

    def vjp(g):
        return ((g * inv[:, None])[seg],)

    return _result(out, (a,), vjp)


def detach(a) -> Tensor:
    """Return a copy of ``a`` that is disconnected from the graph."""
    return _as_tensor(a).detach()


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through its graph.

    Each reachable tensor is visited exactly once, in reverse topological
    order, and gradients accumulate into ``.grad`` (so grads must be
    cleared between optimization steps).
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=np.float64)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``. The
    callable must rebuild its graph on every invocation and return a scalar
    tensor.
    """
    if not x.requires_grad:
        raise ValidationError("grad_check needs a tensor with requires_grad set")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = (
        np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=np.float64)
    ).reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = f(x).item()
        flat[i] = original - eps
        lo = f(x).item()
        flat[i] = original
        numeric[i] = (hi - lo) / (2.0 * eps)
    x.grad = None
    if flat.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
