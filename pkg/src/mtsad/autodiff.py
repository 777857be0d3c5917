"""Dense float64 tensors with taped reverse-mode differentiation.

A deliberately small op set (matmul, add, mul, softmax, layernorm, relu,
log-cosh, slice/concat/transpose/reshape, row gather) is recorded into an
implicit graph; ``Tensor.backward()`` replays the recording in reverse
topological order. Everything is float64, row-major, and deterministic:
there is no global tape and RNGs are always passed in explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 ndarray plus an optional gradient recording.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` after ``backward()`` is called on a downstream scalar.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating into leaf ``.grad``s."""
        if self.data.shape != ():
            raise ContractError("backward() requires a scalar; call it on a loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias another node's buffer or be a broadcast view
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Stacked matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least rank-2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2, got shape {a.shape}")
    data = a.data.T.copy()

    def backward(g: Array) -> None:
        _accum(a, g.T)

    return _node(data, (a,), backward)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g: Array) -> None:
        _accum(a, np.transpose(g, inverse))

    return _node(data, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(tuple(shape))

    def backward(g: Array) -> None:
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def index_select(a, key) -> Tensor:
    """Basic or fancy indexing. Indices must not repeat (scatter uses +=)."""
    a = as_tensor(a)
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[key] += g
            _accum(a, ga)

    return _node(data, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """Row lookup with repeats allowed; backward scatter-adds into the table."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _node(data, (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> None:
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(data, tuple(tensors), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g: Array) -> None:
        _accum(a, g * mask)

    return _node(data, (a,), backward)


def log_cosh(a) -> Tensor:
    """Elementwise log(cosh(x)) via the overflow-safe |x| + log((1+e^{-2|x|})/2)."""
    a = as_tensor(a)
    ax = np.abs(a.data)
    data = ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)

    def backward(g: Array) -> None:
        _accum(a, g * np.tanh(a.data))

    return _node(data, (a,), backward)


def softmax_last(a) -> Tensor:
    """Softmax over the trailing axis, stabilized by max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - inner))

    return _node(y, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis row to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the trailing extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(data, (x, gain, bias), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g: Array) -> None:
        _accum(a, np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _node(data, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g: Array) -> None:
        _accum(a, np.broadcast_to(g / n, a.data.shape).astype(np.float64))

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# public composite operations
# ---------------------------------------------------------------------------


def softmax_rows(t) -> Tensor:
    """Row-wise softmax of a rank-2 tensor; rows sum to 1 within 1e-12."""
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows: expected rank-2, got shape {t.shape}")
    return softmax_last(t)


def scaled_dot_attention(q, k, v, d: int) -> Tensor:
    """softmax(Q Kᵀ / √d) · V for rank-2 Q (q×d), K (k×d), V (k×dv).

    Every output row is a convex combination of V's rows.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("scaled_dot_attention: Q, K, V must be rank-2")
    if q.shape[1] != d or k.shape[1] != d:
        raise ShapeError(f"scaled_dot_attention: Q/K width must equal d={d}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("scaled_dot_attention: K and V must have the same row count")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def log_cosh_loss(pred, target) -> Tensor:
    """Mean over elements of log(cosh(pred - target)); >= 0, zero iff equal."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"log_cosh_loss: shapes differ, {pred.shape} vs {target.shape}")
    return mean_all(log_cosh(sub(pred, target)))


def apply_dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from the supplied generator."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class DiffGraph:
    """A scalar loss over named trainable tensors, re-evaluable for checking.

    ``loss_fn`` must rebuild the recording from scratch on every call so that
    finite-difference probes see the perturbed parameter values.
    """

    params: dict[str, Tensor]
    loss_fn: Callable[[dict[str, Tensor]], Tensor]


def grad_check(
    graph: DiffGraph,
    epsilon: float = 1e-5,
    max_samples: int = 400,
    seed: int = 0,
) -> float:
    """Max relative error of reverse-mode gradients vs central differences.

    Checks every parameter element when the graph is small, otherwise a
    seeded random subset of at least 200 elements. Elements where both the
    analytic and numeric gradient are below 1e-6 in magnitude count as exact.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for p in graph.params.values():
        p.grad = None
    loss = graph.loss_fn(graph.params)
    if loss.data.shape != ():
        raise ContractError("grad_check: loss function must return a scalar")
    loss.backward()
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in graph.params.items()
    }

    coords: list[tuple[str, int]] = []
    for name, p in graph.params.items():
        coords.extend((name, i) for i in range(p.data.size))
    if len(coords) > max(max_samples, 200):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max(max_samples, 200), replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, flat in coords:
        p = graph.params[name]
        saved = p.data.flat[flat]
        p.data.flat[flat] = saved + epsilon
        f_plus = float(graph.loss_fn(graph.params).data)
        p.data.flat[flat] = saved - epsilon
        f_minus = float(graph.loss_fn(graph.params).data)
        p.data.flat[flat] = saved
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(grads[name].flat[flat])
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-6:
            continue
        worst = max(worst, abs(analytic - numeric) / max(scale, 1e-6))
    return worst
