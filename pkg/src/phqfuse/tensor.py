"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it implements exactly the operations
the rest of the pipeline needs, builds an implicit compute graph through
parent references, and differentiates by topologically ordered reverse
traversal. Every op output is checked for NaN/Inf so numeric blow-ups
surface at the op that produced them. A finite-difference gradient-check
harness lives at the bottom of the module.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

Array = np.ndarray

_F32 = np.float32


def _as_f32(value) -> Array:
    return np.asarray(value, dtype=_F32)


def _check_finite(arr: Array, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Float32 array plus optional gradient buffer and graph linkage.

    Tensors written by an op are treated as immutable; mutating ``data``
    in place invalidates any graph built on top of it (the gradient-check
    harness does this deliberately between full re-evaluations).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        _check_finite(self.data, "leaf")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], None] | None = None
        self._op = "leaf"

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

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """Wrap raw data as a non-trainable leaf."""
    return Tensor(value, requires_grad=False)


def make_op(
    data: Array,
    parents: Sequence[Tensor],
    backward_fn: Callable[[Array], None] | None,
    op: str,
) -> Tensor:
    """Create an op result node. Used by this module and by fused ops
    defined elsewhere (rotary embedding, token-level cross entropy)."""
    out = Tensor.__new__(Tensor)
    out.data = _as_f32(data)
    _check_finite(out.data, op)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents)
    out._backward_fn = backward_fn if out.requires_grad else None
    out._op = op
    return out


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=_F32, copy=True)
    else:
        t.grad = t.grad + _as_f32(g)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


class ComputeGraph:
    """Topologically ordered op records reachable from one root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` onto every requires_grad leaf.

    Grads of all nodes reachable from the loss are zeroed first, so
    repeated calls on the same graph are idempotent.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph.from_root(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones((), dtype=_F32)
    for node in reversed(graph.nodes):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return make_op(out_data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(out_data, (a, b), bwd, "div")


def _sigmoid(x: Array) -> Array:
    # evaluate exp only on non-positive arguments so large |x| cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _coerce(a)
    s = _sigmoid(a.data)
    out_data = a.data * s

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return make_op(out_data, (a,), bwd, "silu")


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g * (0.5 / out_data))

    return make_op(out_data, (a,), bwd, "sqrt")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=_F32)
    count = a.size if axis is None else a.shape[axis]

    def bwd(g: Array) -> None:
        if not a.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / _F32(count))

    return make_op(out_data, (a,), bwd, "mean")


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=_F32)

    def bwd(g: Array) -> None:
        if not a.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(_F32))

    return make_op(out_data, (a,), bwd, "sum")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return make_op(out_data, (a,), bwd, "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs >=2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out_data = np.transpose(a.data, axes)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, np.transpose(g, inverse))

    return make_op(out_data, (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accum(t, g[tuple(index)])

    return make_op(out_data, tuple(tensors), bwd, "concat")


def stack_padded(tensors: Sequence[Tensor]) -> Tensor:
    """Stack (S_i, D) tensors into (B, max S_i, D), zero padding the tail."""
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ContractError("stack_padded of zero tensors")
    dim = tensors[0].shape[-1]
    for t in tensors:
        if t.ndim != 2 or t.shape[-1] != dim:
            raise DimensionError(
                f"stack_padded expects (S, {dim}) operands, got {t.shape}"
            )
    max_len = max(t.shape[0] for t in tensors)
    out_data = np.zeros((len(tensors), max_len, dim), dtype=_F32)
    for i, t in enumerate(tensors):
        out_data[i, : t.shape[0]] = t.data

    def bwd(g: Array) -> None:
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, g[i, : t.shape[0]])

    return make_op(out_data, tuple(tensors), bwd, "stack_padded")


# ---------------------------------------------------------------------------
# gather / matmul / softmax


def gather_rows(a, indices) -> Tensor:
    """Index axis 0 with an integer array; output shape idx.shape + a.shape[1:]."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(
            f"gather index out of range for axis of length {a.shape[0]}"
        )
    out_data = a.data[idx]

    def bwd(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return make_op(out_data, (a,), bwd, "gather_rows")


def embedding_lookup(table, ids) -> Tensor:
    """Row lookup in an embedding table; backward scatter-adds into it."""
    return gather_rows(table, ids)


def select_positions(a, positions) -> Tensor:
    """For (B, S, D) input and per-row position indices, return (B, D)."""
    a = _coerce(a)
    pos = np.asarray(positions, dtype=np.int64)
    if a.ndim != 3 or pos.shape != (a.shape[0],):
        raise DimensionError(
            f"select_positions expects (B,S,D) and (B,) indices, got {a.shape} and {pos.shape}"
        )
    if pos.size and (pos.min() < 0 or pos.max() >= a.shape[1]):
        raise ContractError(f"position index out of range for length {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, pos]

    def bwd(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, pos), g)
            _accum(a, buf)

    return make_op(out_data, (a,), bwd, "select_positions")


def matmul(a, b) -> Tensor:
    """Matrix product. Supports 2Dx2D, ND x 2D (applied to last axis), and
    batched 3Dx3D with equal batch size."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim >= 2 and b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
        out_data = a.data @ b.data

        def bwd(g: Array) -> None:
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, b.shape[1])
                _accum(b, a2.T @ g2)

        return make_op(out_data, (a, b), bwd, "matmul")

    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[-1] != b.shape[1]:
            raise DimensionError(f"matmul batch dims differ: {a.shape} x {b.shape}")
        out_data = a.data @ b.data

        def bwd(g: Array) -> None:
            if a.requires_grad:
                _accum(a, g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                _accum(b, a.data.swapaxes(-1, -2) @ g)

        return make_op(out_data, (a, b), bwd, "matmul")

    raise DimensionError(f"unsupported matmul operand ranks: {a.shape} x {b.shape}")


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(a, (g - inner) * out_data)

    return make_op(out_data, (a,), bwd, "softmax_rows")


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class GradCheckResult:
    """Outcome of one finite-difference comparison."""

    def __init__(self, name: str, max_rel_err: float, tol: float, checked: int):
        self.name = name
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.checked = checked

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (
            f"gradcheck {self.name}: max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tol:.0e} over {self.checked} entries [{status}]"
        )


# Below this magnitude, finite-difference noise in float32 dominates, so the
# relative error uses an absolute floor in the denominator.
_REL_ERR_FLOOR = 0.1


def gradient_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-2,
    name: str = "fn",
) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` must rebuild its graph from the current parameter data on every
    call and be deterministic. All elements of every parameter are
    perturbed, so keep the instances small.
    """
    params = list(params)
    loss = fn()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.astype(np.float64))

    max_rel = 0.0
    checked = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = _F32(orig + eps)
            lo = _F32(orig - eps)
            flat[i] = hi
            f_plus = float(fn().data)
            flat[i] = lo
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (float(hi) - float(lo))
            a = float(ga_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_ERR_FLOOR)
            if rel > max_rel:
                max_rel = rel
            checked += 1
    return GradCheckResult(name, max_rel, tol, checked)


def probe_loss(out: Tensor, probe: Array) -> Tensor:
    """Reduce an op output to a well-scaled scalar for gradient checks.

    The probe should have entries bounded away from zero so every output
    element influences the loss detectably.
    """
    weighted = mul(out, constant(probe))
    return div(sum_(weighted), float(np.sqrt(out.size)))
