"""Dense float64 tensors with a reverse-mode differentiation tape.

Forward operations always compute eagerly on numpy arrays. When a
:class:`Tape` is active on the current thread, each operation also records
itself (inputs, saved values, gradient rule) so a later backward pass can
accumulate gradients into every leaf it can reach. Without an active tape,
operations run untracked, which is what inference paths use.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation kind."""

    def __init__(self, kind: str, *shapes, detail: str = ""):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kind}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    """Tape misuse: double backward, foreign loss node, non-scalar loss."""


_thread = threading.local()


def _active() -> "Tape | None":
    return getattr(_thread, "tape", None)


class Tape:
    """Ordered record of forward operations, one backward pass per recording.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction. A tape is confined to the thread that opened it;
    independent tapes on other threads do not interact.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active() is not None:
            raise TapeError("a tape is already active on this thread")
        _thread.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _thread.tape = None
        return False

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse order.

        Gradients accumulate into ``.grad`` of every tensor reachable from
        ``loss``, including leaves created outside the tape (parameters).
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        if loss._tape is not self:
            raise TapeError("loss node was not recorded on this tape")
        if loss.data.shape != ():
            raise TapeError(f"loss must be a scalar, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(tape: Tape, loss: "Tensor") -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


class Tensor:
    """Dense row-major float64 array, optionally wired into the active tape.

    Leaves (constants and parameters) have no parents. Operation results
    carry a gradient rule and are appended to the active tape; with no tape
    active they behave like fresh leaves.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = ()
        self._backward = None
        self._tape = None

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple, backward_fn: Callable) -> "Tensor":
        """Operation result; skips leaf validation (ops preserve finiteness)."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out._tape = None
        tape = _active()
        if tape is not None:
            out._parents = parents
            out._backward = backward_fn
            out._tape = tape
            tape.nodes.append(out)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; scalars route through the constant-scale ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own the buffer; g may be a view
    else:
        t.grad += g


def constant(data) -> Tensor:
    """Leaf tensor that never receives a gradient rule."""
    return Tensor(data)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor._op(a.data @ b.data, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (d,) bias or () scalar as ``b``."""
    if b.data.shape == a.data.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    elif b.data.shape == ():
        def bw(g):
            _accum(a, g)
            _accum(b, np.asarray(g.sum()))
    else:
        raise ShapeError("add", a.data.shape, b.data.shape)
    return Tensor._op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("sub", a.data.shape, b.data.shape)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor._op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("mul_elementwise", a.data.shape, b.data.shape)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor._op(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return Tensor._op(a.data * c, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g)

    return Tensor._op(a.data + c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return Tensor._op(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return Tensor._op(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor._op(out, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows", a.data.shape, detail="expects a 2-d tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        # ds_i/dx_j = s_i (delta_ij - s_j), row-wise
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(a, out * (g - dot))

    return Tensor._op(out, (a,), bw)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_last_dim", (), detail="empty input list")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError("concat_last_dim", parts[0].data.shape, p.data.shape)
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return Tensor._op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows", (), detail="empty input list")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ShapeError("concat_rows", parts[0].data.shape, p.data.shape)
    counts = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi, :])

    return Tensor._op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError("slice", a.data.shape, detail=f"rows [{start}:{stop}]")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        _accum(a, full)

    return Tensor._op(a.data[start:stop, :].copy(), (a,), bw)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = list(indices)
    if a.data.ndim != 2 or any(i < 0 or i >= a.data.shape[0] for i in idx):
        raise ShapeError("take_rows", a.data.shape, detail=f"indices {idx}")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor._op(a.data[idx, :].copy(), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)

    def bw(g):
        _accum(a, g.T)

    return Tensor._op(a.data.T.copy(), (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return Tensor._op(np.asarray(a.data.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return Tensor._op(np.asarray(a.data.mean()), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * 2.0 * a.data)

    return Tensor._op(a.data * a.data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)

    def bw(g):
        _accum(a, g * s)

    return Tensor._op(np.abs(a.data), (a,), bw)


_OP_TABLE: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
    "concat_last_dim": concat_last_dim,
    "concat_rows": concat_rows,
    "slice": slice_rows,
    "take_rows": take_rows,
    "transpose": transpose,
    "sum": tensor_sum,
    "mean": mean,
    "square": square,
    "abs": absolute,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by kind name. See ``_OP_TABLE`` for kinds."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind '{kind}'") from None
    return fn(*inputs, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OP_TABLE)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative deviation between tape and central-difference gradients.

    ``f`` must map one tensor to a scalar tensor. Per coordinate the relative
    error is |analytic - central| / (|analytic| + |central| + 1e-12); the max
    over coordinates is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point, dtype=np.float64)
    x = Tensor(base.copy())
    with Tape() as tape:
        out = f(x)
    if out.data.shape != ():
        raise TapeError(f"grad_check: f must return a scalar, got shape {out.data.shape}")
    tape.backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        central = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        rel = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, rel)
    return worst


def uniform_init(rng: np.random.Generator, *shape: int, fan_in: int | None = None) -> Tensor:
    """Parameter leaf drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    if fan_in is None:
        fan_in = shape[0] if shape else 1
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape))


def leaves_of(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if isinstance(p, Tensor)]
