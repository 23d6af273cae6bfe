"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

The graph is a dynamic tape: each op that sees a grad-requiring input
records its parents and a backward closure on the output tensor. With no
grad-requiring inputs nothing is recorded, so inference allocates no graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OpError(ValueError):
    """Base class for op-level failures."""


class ShapeMismatch(OpError):
    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))
        msg = f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteInput(OpError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: input contains non-finite values")


class GraphError(RuntimeError):
    pass


class MissingGradient(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient; run backward first")


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Data is immutable by convention once the tensor participates in a
    graph; only ``grad`` and in-place optimizer updates on leaves mutate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the named ops below do the work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *tensors: Tensor):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteInput(op)


def _make(op: str, data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, recording the tape only if a parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcastable(a, b) -> bool:
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("add", a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make("add", out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("sub", a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make("sub", out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("mul", a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make("mul", out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("div", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("div", a.shape, b.shape)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out_data, (a, b), backward)


def sqrt(a: Tensor) -> Tensor:
    _check_finite("sqrt", a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make("sqrt", out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make("relu", out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    _check_finite("tanh", a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make("tanh", out_data, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    _check_finite("gelu", a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a._accumulate(g * da)

    return _make("gelu", out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeMismatch("reshape", a.shape, shape, "element counts differ")
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make("reshape", out_data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch("transpose", a.shape, axes, "not a permutation")
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make("transpose", out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("sum", a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make("sum", out_data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("mean", a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape) / count)

    return _make("mean", out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics (leading dims broadcast)."""
    _check_finite("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul", a.shape, b.shape, "operands must be >= 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape, "inner dims differ")
    if not _broadcastable(a.shape[:-2], b.shape[:-2]):
        raise ShapeMismatch("matmul", a.shape, b.shape, "batch dims differ")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make("matmul", out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# neural-net ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make("softmax", out_data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; zero-variance inputs collapse to beta."""
    _check_finite("layer_norm", a, gamma, beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", a.shape, gamma.shape, "affine params must match last dim")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gy - m1 - xhat * m2))

    return _make("layer_norm", out_data, (a, gamma, beta), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; grad is scatter-added."""
    _check_finite("embedding", table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise OpError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise OpError(
            f"embedding: id out of range [0, {table.shape[0]}), got min={ids.min()} max={ids.max()}"
        )
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return _make("embedding", out_data, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean token-level cross-entropy over positions not equal to ignore_index.

    ``logits`` is [..., V]; ``targets`` holds class indices of the leading shape.
    """
    _check_finite("cross_entropy", logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape, "targets must match logits batch")
    v = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, v)
    flat_targets = targets.reshape(-1)
    if ignore_index is None:
        valid = np.ones(flat_targets.shape, dtype=bool)
    else:
        valid = flat_targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise OpError("cross_entropy: no supervised positions (all targets ignored)")
    checked = flat_targets[valid]
    if checked.min() < 0 or checked.max() >= v:
        raise OpError(f"cross_entropy: target index out of range [0, {v})")

    shifted = flat_logits - flat_logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(flat_targets.size), np.where(valid, flat_targets, 0)]
    loss = -(picked * valid).sum() / n_valid
    out_data = np.asarray(loss)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(flat_targets.size), np.where(valid, flat_targets, 0)] -= 1.0
            p *= valid[:, None] / n_valid
            logits._accumulate(float(g) * p.reshape(logits.shape))

    return _make("cross_entropy", out_data, (logits,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make("dropout", a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor):
    """Accumulate gradients of ``root`` into every reachable grad leaf."""
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward called on a tensor with no recorded graph")

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state; moment buffers are keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """One Adam update over named parameters; grads are left untouched."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradient(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / (1.0 - b1**t)
        vhat = state.v[name] / (1.0 - b2**t)
        p.data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
