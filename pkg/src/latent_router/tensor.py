"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the router network and its
losses need. Everything is 64-bit, shapes are at most rank 2, and the only
broadcasts supported are scalar-with-anything, plus the dedicated
``add_rowvec`` op for bias rows. Forward results are deterministic: the
same inputs always produce bit-identical outputs.

Gradients are recorded on an explicit :class:`Tape`. Ops executed while a
tape is active append one node each; ``backward(tape, loss)`` replays the
node list in reverse and accumulates ``∂loss/∂x`` into each tensor's
``grad`` buffer. Accumulation is additive, so running several tapes before
an optimizer step sums their gradients (used for mini-batching).
"""

from __future__ import annotations

import threading

import numpy as np


class TensorError(Exception):
    """Base class for tensor-core failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible for the requested op."""


class EmptySupportError(TensorError):
    """A masked softmax was asked to normalize over an empty support."""


class ContractError(TensorError):
    """An op precondition was violated (e.g. non-scalar loss)."""


class NumericError(TensorError):
    """Non-finite values or an out-of-domain input were encountered."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray (row-major), so the
    flat view ``data.ravel()`` is the canonical serialization order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # True while .grad aliases a backward-rule output (possibly a view);
        # such buffers are never mutated in place
        self._grad_borrowed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_borrowed = False

    def detach(self) -> "Tensor":
        """A view of the same values that no gradient flows through."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _TapeNode:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of ops, replayed in reverse by :func:`backward`.

    Nodes are appended in execution order, which is a topological order by
    construction. A tape is single-threaded; independent tapes may run
    concurrently on different threads (the active tape is thread-local).
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("nested tapes are not supported")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.tape = None


def _record(out: Tensor, inputs: tuple, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        tape.nodes.append(_TapeNode(out, inputs, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the loss depends on.

    Gradients accumulate additively: a leaf used k times receives the sum
    of all k contributions, and repeated backward calls (across tapes)
    keep adding into existing ``grad`` buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward target must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
        loss._grad_borrowed = False
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
        loss._grad_borrowed = False
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gt
                t._grad_borrowed = True
            elif t._grad_borrowed:
                t.grad = t.grad + gt
                t._grad_borrowed = False
            else:
                t.grad += gt


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo a scalar broadcast: collapse the incoming gradient back to the
    # operand's (size-1) shape.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), with the stable branch x + log1p(exp(-x)) for x > 20."""
    a = _as_tensor(a)
    x = a.data
    y = np.where(x > 20.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 20.0))))
    out = Tensor(y)

    def bw(g):
        # d/dx softplus = sigmoid(x), stable on both tails
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * g * a.data,))


def concat(parts: list, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat: empty input list")
    try:
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _record(out, tuple(parts), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bw)


def add_rowvec(m, v) -> Tensor:
    """Add a length-n vector to every row of an (r, n) matrix."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: incompatible shapes {m.shape} and {v.shape}")
    out = Tensor(m.data + v.data[None, :])

    def bw(g):
        return g, g.sum(axis=0)

    return _record(out, (m, v), bw)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b with b added to every row; one tape node."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or b.data.ndim != 1
        or x.shape[1] != w.shape[0]
        or w.shape[1] != b.shape[0]
    ):
        raise DimensionError(f"affine: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = Tensor(x.data @ w.data + b.data[None, :])

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), bw)


def masked_softmax(logits, mask) -> Tensor:
    """Exp-normalize over unmasked positions; masked positions are exactly 0.

    ``logits`` may be 1-D (one distribution) or 2-D (one distribution per
    row over a shared column mask). Stability comes from subtracting the
    per-row max over the support before exponentiation.
    """
    t = _as_tensor(logits)
    m = np.asarray(mask, dtype=bool)
    if t.data.ndim not in (1, 2) or m.ndim != 1 or t.shape[-1] != m.shape[0]:
        raise DimensionError(f"masked_softmax: logits {t.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptySupportError("masked_softmax: mask has empty support")

    x = np.atleast_2d(t.data)
    if m.all():
        z = np.exp(x - x.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
    else:
        sup = x[:, m]
        z = np.exp(sup - sup.max(axis=1, keepdims=True))
        p = np.zeros_like(x)
        p[:, m] = z / z.sum(axis=1, keepdims=True)
    if t.data.ndim == 1:
        p = p[0]
    out = Tensor(p)

    def bw(g):
        g2 = np.atleast_2d(g)
        p2 = np.atleast_2d(p)
        inner = (g2 * p2).sum(axis=1, keepdims=True)
        dx = p2 * (g2 - inner)
        if t.data.ndim == 1:
            dx = dx[0]
        return (dx,)

    return _record(out, (t,), bw)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data).reshape(()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_rows(a) -> Tensor:
    """Column means of an (r, n) matrix: (r, n) -> (n,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows: expected rank-2, got {a.shape}")
    r = a.shape[0]
    out = Tensor(a.data.mean(axis=0))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / r, a.shape).copy(),))


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean, unit variance (no learned affine)."""
    a = _as_tensor(a)
    x = np.atleast_2d(a.data)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out_y = y[0] if a.data.ndim == 1 else y
    out = Tensor(out_y)
    n = x.shape[1]

    def bw(g):
        g2 = np.atleast_2d(g)
        gm = g2.mean(axis=1, keepdims=True)
        gy = (g2 * y).mean(axis=1, keepdims=True)
        dx = inv * (g2 - gm - y * gy)
        if a.data.ndim == 1:
            dx = dx[0]
        return (dx,)

    return _record(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected rank-2, got {a.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def gather(a, idx) -> Tensor:
    """Select rows (rank-2) or entries (rank-1) by a constant index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), bw)


def column(a, j: int) -> Tensor:
    """Extract column j of an (r, n) matrix as a length-r vector."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"column: expected rank-2, got {a.shape}")
    out = Tensor(a.data[:, j].copy())

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, j] = g
        return (ga,)

    return _record(out, (a,), bw)


def grad_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar Tensor, deterministically. Returns
    max over coordinates of |analytic - fd| / max(1, |fd|).
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
        backward(tape, loss)
    if x.grad is None:
        raise ContractError("grad_check: f does not depend on the point")
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        dn = f(x).item()
        flat[i] = orig
        fd[i] = (up - dn) / (2.0 * step)
    fd = fd.reshape(x.shape)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(fd))):
        raise NumericError("grad_check: non-finite gradient values")
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))
