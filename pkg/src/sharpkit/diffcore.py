"""Dense reverse-mode differentiation over numpy arrays.

Every primitive records its vector-Jacobian product (vjp) as a function of
the upstream cotangent and the op's inputs. The vjps are written with the
same polymorphic primitives used in the forward pass, so they run on plain
ndarrays for a cheap first-order backward pass and on :class:`Tensor` values
when the gradient itself must be differentiated again (``create_graph``).
Reverse-over-reverse gives the exact Hessian-vector product.

Parameter vectors are flat float64 arrays. A model's parameters are flattened
in declaration order and row-major (C order) within each array.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np


class DiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class NonFiniteLoss(DiffError):
    def __init__(self, message: str, batch_index: Optional[int] = None):
        super().__init__(message)
        self.batch_index = batch_index


class ZeroProbe(DiffError):
    pass


class ShapeMismatch(DiffError):
    pass


class EmptyBatch(DiffError):
    pass


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tensor:
    """A node on the tape: an ndarray value plus how it was produced."""

    __slots__ = ("value", "parents")
    __array_priority__ = 100.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        # each parent entry: (input Tensor, vjp(g, *inputs) -> cotangent)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor({self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(value, inputs, vjps):
    """Build a tape node, keeping only the inputs that are Tensors."""
    parents = tuple(
        (i, x, fn) for i, (x, fn) in enumerate(zip(inputs, vjps)) if isinstance(x, Tensor)
    )
    if not parents:
        return value
    out = Tensor(value)
    out.parents = (tuple(inputs), parents)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    gshape = _val(g).shape if isinstance(g, Tensor) else np.shape(g)
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    axes = list(range(extra))
    for i, n in enumerate(shape):
        if n == 1 and gshape[extra + i] != 1:
            axes.append(extra + i)
    out = sum_(g, axis=tuple(axes), keepdims=False)
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# Primitives. Each accepts Tensors or array-likes; without Tensor inputs the
# result is a plain ndarray and nothing is recorded.
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av + bv,
        (a, b),
        (
            lambda g, a, b: _unbroadcast(g, np.shape(_val(a))),
            lambda g, a, b: _unbroadcast(g, np.shape(_val(b))),
        ),
    )


def neg(a):
    return _record(-_val(a), (a,), (lambda g, a: neg(g),))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av * bv,
        (a, b),
        (
            lambda g, a, b: _unbroadcast(mul(g, b), np.shape(_val(a))),
            lambda g, a, b: _unbroadcast(mul(g, a), np.shape(_val(b))),
        ),
    )


def reciprocal(a):
    return _record(
        1.0 / _val(a),
        (a,),
        (lambda g, a: neg(mul(g, reciprocal(mul(a, a)))),),
    )


def matmul(a, b):
    return _record(
        _val(a) @ _val(b),
        (a, b),
        (
            lambda g, a, b: matmul(g, transpose(b)),
            lambda g, a, b: matmul(transpose(a), g),
        ),
    )


def transpose(a):
    return _record(_val(a).T, (a,), (lambda g, a: transpose(g),))


def reshape(a, shape):
    shape = tuple(shape)
    return _record(
        _val(a).reshape(shape),
        (a,),
        (lambda g, a: reshape(g, np.shape(_val(a))),),
    )


def getitem(a, index):
    return _record(
        _val(a)[index],
        (a,),
        (lambda g, a: scatter(g, index, np.shape(_val(a))),),
    )


def scatter(g, index, shape):
    """Zeros of ``shape`` with ``g`` written at ``index`` (adjoint of getitem)."""
    out = np.zeros(shape)
    out[index] = _val(g)
    return _record(out, (g,), (lambda h, g: getitem(h, index),))


def sum_(a, axis=None, keepdims=False):
    av = _val(a)

    def vjp(g, a):
        shape = np.shape(_val(a))
        if axis is None:
            kept = (1,) * len(shape)
        else:
            axes = (axis,) if np.isscalar(axis) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
        return broadcast_to(reshape(g, kept), shape)

    return _record(np.sum(av, axis=axis, keepdims=keepdims), (a,), (vjp,))


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _record(
        np.broadcast_to(_val(a), shape).copy(),
        (a,),
        (lambda g, a: _unbroadcast(g, np.shape(_val(a))),),
    )


def mean(a):
    n = _val(a).size
    return mul(sum_(a), 1.0 / n)


def exp(a):
    return _record(np.exp(_val(a)), (a,), (lambda g, a: mul(g, exp(a)),))


def log(a):
    return _record(np.log(_val(a)), (a,), (lambda g, a: mul(g, reciprocal(a)),))


def sqrt(a):
    return _record(
        np.sqrt(_val(a)),
        (a,),
        (lambda g, a: mul(g, mul(0.5, reciprocal(sqrt(a)))),),
    )


def tanh(a):
    def vjp(g, a):
        t = tanh(a)
        return mul(g, add(1.0, neg(mul(t, t))))

    return _record(np.tanh(_val(a)), (a,), (vjp,))


def relu(a):
    av = _val(a)
    # the mask is piecewise constant, so its own derivative is zero
    mask = (av > 0).astype(np.float64)
    return _record(av * mask, (a,), (lambda g, a: mul(g, mask),))


def logsumexp(a, axis=-1):
    """Row-wise log-sum-exp, keeping the reduced axis (size 1)."""
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    value = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))

    def vjp(g, a):
        return mul(g, exp(add(a, neg(logsumexp(a, axis=axis)))))

    return _record(value, (a,), (vjp,))


def dot(a, b):
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.parents:
            for _, parent, _ in node.parents[1]:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order[::-1]


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False):
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned gradients are Tensors still attached to
    the tape, so they can be differentiated again.
    """
    if not isinstance(output, Tensor):
        return [np.zeros_like(_val(x)) for x in inputs]
    if output.value.size != 1:
        raise ShapeMismatch("grad needs a scalar output")
    seed = np.ones_like(output.value)
    cot = {id(output): Tensor(seed) if create_graph else seed}
    for node in _toposort(output):
        g = cot.pop(id(node), None)
        if g is None or not node.parents:
            if g is not None:
                cot[id(node)] = g
            continue
        all_inputs, parents = node.parents
        args = all_inputs if create_graph else tuple(_val(x) for x in all_inputs)
        for _, parent, fn in parents:
            contrib = fn(g, *args)
            prev = cot.get(id(parent))
            cot[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for x in inputs:
        g = cot.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.value)) if create_graph else np.zeros_like(x.value)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """A mini-batch of examples. ``index`` is its position in the epoch."""

    features: np.ndarray
    labels: np.ndarray
    index: Optional[int] = None

    def __len__(self):
        return len(self.labels)


class DifferentiableObjective:
    """Mean loss over a batch as a function of a flat parameter vector.

    Subclasses implement :meth:`loss` using the primitives of this module;
    everything else (gradients, Hessian-vector products) follows from it.
    Objectives hold no mutable state, so concurrent evaluations are safe.
    """

    param_count: int
    deterministic: bool = True

    def loss(self, w, batch: Batch):
        raise NotImplementedError

    def shapes(self) -> list[tuple[int, ...]]:
        return [(self.param_count,)]

    def eval(self, w, batch: Batch) -> float:
        return float(_val(self.loss(np.asarray(w, dtype=np.float64), batch)))


@dataclass(frozen=True)
class GradResult:
    loss: float
    grad: np.ndarray


class HvpKind(enum.Enum):
    EXACT_SECOND_ORDER = "exact_second_order"
    GRADIENT_FD = "gradient_fd"


@dataclass(frozen=True)
class HvpBackend:
    kind: HvpKind = HvpKind.EXACT_SECOND_ORDER
    # None selects 1e-4 * (1 + |w|_inf)
    fd_step: Optional[float] = None

    def __post_init__(self):
        if self.fd_step is not None and not self.fd_step > 0:
            raise ValueError("fd_step must be positive")

    def step_for(self, w: np.ndarray) -> float:
        if self.fd_step is not None:
            return self.fd_step
        return 1e-4 * (1.0 + float(np.max(np.abs(w))))


EXACT = HvpBackend()


def _check_inputs(obj: DifferentiableObjective, w, batch) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (obj.param_count,):
        raise ShapeMismatch(f"expected {obj.param_count} parameters, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteLoss("parameter vector has non-finite entries", _batch_index(batch))
    if batch is not None and len(batch) == 0:
        raise EmptyBatch("batch is empty")
    return w


def _batch_index(batch):
    return getattr(batch, "index", None)


def _checked_loss(value: float, batch) -> float:
    if not np.isfinite(value):
        idx = _batch_index(batch)
        raise NonFiniteLoss(f"non-finite loss {value} on batch {idx}", idx)
    return value


def value_and_grad(
    obj: DifferentiableObjective, w, batch: Batch, use_tape: bool = False
) -> GradResult:
    """Loss and gradient at ``w``: one forward and one reverse pass.

    Objectives that define ``fused_value_and_grad`` (a hand-written backward
    pass checked against the tape) use it unless ``use_tape`` is set.
    """
    w = _check_inputs(obj, w, batch)
    fused = None if use_tape else getattr(obj, "fused_value_and_grad", None)
    if fused is not None:
        loss, g = fused(w, batch)
        loss = _checked_loss(float(loss), batch)
    else:
        wt = Tensor(w)
        out = obj.loss(wt, batch)
        loss = _checked_loss(float(_val(out)), batch)
        (g,) = grad(out, [wt])
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteLoss(f"non-finite gradient on batch {_batch_index(batch)}", _batch_index(batch))
    return GradResult(loss, g)


def hvp(
    obj: DifferentiableObjective,
    w,
    v,
    batch: Batch,
    backend: HvpBackend = EXACT,
) -> np.ndarray:
    """Hessian-vector product ``H v`` of the batch loss at ``w``."""
    w = _check_inputs(obj, w, batch)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ShapeMismatch(f"probe shape {v.shape} does not match parameters {w.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        raise ZeroProbe("Hessian-vector product needs a non-zero probe")

    if backend.kind is HvpKind.EXACT_SECOND_ORDER:
        wt = Tensor(w)
        out = obj.loss(wt, batch)
        _checked_loss(float(_val(out)), batch)
        (g,) = grad(out, [wt], create_graph=True)
        (hv,) = grad(dot(g, v), [wt])
        hv = np.asarray(hv, dtype=np.float64)
    else:
        h = backend.step_for(w)
        vhat = v / vnorm
        gp = value_and_grad(obj, w + h * vhat, batch).grad
        gm = value_and_grad(obj, w - h * vhat, batch).grad
        hv = (gp - gm) * (vnorm / (2.0 * h))
    if not np.all(np.isfinite(hv)):
        raise NonFiniteLoss("non-finite Hessian-vector product", _batch_index(batch))
    return hv


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate arrays in order, each row-major, into one flat vector."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel(order="C") for a in arrays])


def unflatten(w, shapes: Sequence[tuple[int, ...]]) -> list[Any]:
    """Inverse of :func:`flatten`. Works on ndarrays and on Tensors."""
    total = sum(math.prod(s) for s in shapes)
    n = _val(w).shape[0] if _val(w).ndim == 1 else -1
    if n != total:
        raise ShapeMismatch(f"vector of length {n} cannot fill shapes totalling {total}")
    out, start = [], 0
    for s in shapes:
        size = math.prod(s)
        piece = w[start : start + size]
        out.append(reshape(piece, s) if isinstance(piece, Tensor) else piece.reshape(s).copy())
        start += size
    return out


def finite_difference_grad(
    f: Callable[[np.ndarray], float], w, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function. Test oracle."""
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        out[i] = (f(w + e) - f(w - e)) / (2.0 * step)
    return out
