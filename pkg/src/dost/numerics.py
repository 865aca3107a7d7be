"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when at least one
input requires a gradient, so inference outside a tape costs nothing extra.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dost_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (non-scalar loss, double backward, ...)."""


class Tensor:
    """A dense real array. ``requires_grad`` marks it as a differentiation target."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar, all routed through the taped ops below
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable tensor with an accumulated gradient buffer."""

    __slots__ = ("grad", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Define-by-run record of differentiable operations.

    Use as a context manager; every op executed inside the ``with`` block whose
    inputs require gradients is appended in execution order.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.records = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("backward() called twice without a fresh forward pass")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward_fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad = inp.grad + gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        self._consumed = True


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every trainable Parameter on loss's tape."""
    if loss._tape is None:
        raise TapeError("loss was not produced by a taped forward pass")
    loss._tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._tape = None
    out.requires_grad = False
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to_leading(g: np.ndarray, ndim: int) -> np.ndarray:
    """Sum a broadcast gradient down to the trailing ``ndim`` axes."""
    extra = g.ndim - ndim
    return g.sum(axis=tuple(range(extra))) if extra > 0 else g


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` may carry leading batch axes."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    A2 = A.reshape(-1, A.shape[-1])
    out = (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ B.T).reshape(A.shape), A2.T @ g2

    return _emit(out, (a, b), bw)


def node_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-node weights: ``x[..., n, t, i] @ w[n, i, j]``."""
    if w.ndim != 3 or x.ndim < 3 or x.shape[-3] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"node_matmul: x {x.shape} incompatible with per-node weights {w.shape}")
    X, W = x.data, w.data
    lead = X.shape[:-3]
    n, t, i = X.shape[-3:]
    # node axis first -> one batched GEMM per node
    Xn = np.moveaxis(X.reshape(-1, n, t, i), 1, 0).reshape(n, -1, i)
    out = np.moveaxis((Xn @ W).reshape(n, -1, t, W.shape[2]), 0, 1).reshape(lead + (n, t, W.shape[2]))

    def bw(g):
        gn = np.moveaxis(g.reshape(-1, n, t, W.shape[2]), 1, 0).reshape(n, -1, W.shape[2])
        gx = np.moveaxis((gn @ W.transpose(0, 2, 1)).reshape(n, -1, t, i), 0, 1).reshape(X.shape)
        gw = Xn.transpose(0, 2, 1) @ gn
        return gx, gw

    return _emit(out, (x, w), bw)


def graph_mix(adj: np.ndarray, x: Tensor) -> Tensor:
    """Aggregate over the node axis: ``out[..., n, t, c] = sum_m adj[n, m] x[..., m, t, c]``.

    ``adj`` is a constant (no gradient).
    """
    adj = np.asarray(adj, dtype=np.float64)
    if x.ndim < 3 or adj.shape != (x.shape[-3], x.shape[-3]):
        raise ShapeError(f"graph_mix: adjacency {adj.shape} does not match node axis of {x.shape}")
    n = adj.shape[0]
    X = x.data.reshape((-1, n, x.shape[-2] * x.shape[-1]))
    out = (adj @ X).reshape(x.shape)
    adj_t = adj.T

    def bw(g):
        return ((adj_t @ g.reshape(X.shape)).reshape(g.shape),)

    return _emit(out, (x,), bw)


def causal_dilated_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid causal convolution along the second-to-last axis.

    x: ``[..., L, c_in]``; w: ``[k, c_in, c_out]``. Tap ``j`` reads
    ``x[t + j*dilation]`` so the last tap aligns with the newest input step.
    Output length is ``L - (k-1)*dilation``.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[0]
    L = x.shape[-2]
    span = (k - 1) * dilation
    if L < span + 1:
        raise ShapeError(f"conv1d: window length {L} shorter than receptive field {span + 1}")
    Lo = L - span
    X, W = x.data, w.data
    c_in, c_out = W.shape[1], W.shape[2]
    # stack the k shifted views along channels -> one GEMM
    cols = np.concatenate([X[..., j * dilation : j * dilation + Lo, :] for j in range(k)], axis=-1)
    cols2 = cols.reshape(-1, k * c_in)
    W2 = W.reshape(k * c_in, c_out)
    out = (cols2 @ W2).reshape(cols.shape[:-1] + (c_out,))

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gw = (cols2.T @ g2).reshape(W.shape)
        gcols = (g2 @ W2.T).reshape(cols.shape)
        gx = np.zeros_like(X)
        for j in range(k):
            gx[..., j * dilation : j * dilation + Lo, :] += gcols[..., j * c_in : (j + 1) * c_in]
        return gx, gw

    return _emit(out, (x, w), bw)


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector over the last axis, broadcasting across all leading axes."""
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, _sum_to_leading(g, 1)))


def relu(x: Tensor) -> Tensor:
    X = x.data
    mask = X > 0
    return _emit(np.where(mask, X, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form cannot overflow
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def absolute(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    X = x.data
    return _emit(np.abs(X), (x,), lambda g: (g * np.sign(X),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    if op in _UNARY:
        (x,) = inputs
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = inputs
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def time_slice(x: Tensor, start: int, stop: int | None = None) -> Tensor:
    """Slice the second-to-last (time) axis."""
    X = x.data
    out = X[..., start:stop, :]

    def bw(g):
        gx = np.zeros_like(X)
        gx[..., start:stop, :] = g
        return (gx,)

    return _emit(out, (x,), bw)


def reduce(x: Tensor, axis: int | None = None, mode: str = "sum") -> Tensor:
    if mode not in ("sum", "mean"):
        raise ValueError(f"reduce mode must be 'sum' or 'mean', got {mode!r}")
    X = x.data
    if axis is not None and not -X.ndim <= axis < X.ndim:
        raise ValueError(f"invalid axis {axis} for tensor of rank {X.ndim}")
    count = X.size if axis is None else X.shape[axis]
    out = X.sum(axis=axis)
    if mode == "mean":
        out = out / count
    factor = 1.0 / count if mode == "mean" else 1.0

    def bw(g):
        if axis is None:
            return (np.full(X.shape, g * factor),)
        return (np.broadcast_to(np.expand_dims(g, axis), X.shape) * factor,)

    return _emit(np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, axis, "mean")


def total(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, axis, "sum")


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    return mean(absolute(sub(pred, target)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


# ----------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, step: float = 1e-5
) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``f`` receives a float64 array shaped like ``x`` and must return a finite scalar.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(base))
        flat[i] = orig - step
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(base.shape)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|)``; entries where both sides are below ``floor`` count as agreeing."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    rel = np.where(denom < floor, 0.0, diff / np.where(denom < floor, 1.0, denom))
    return float(rel.max()) if rel.size else 0.0


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
