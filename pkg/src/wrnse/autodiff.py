"""Minimal reverse-mode autodiff over float64 numpy arrays.

The op set is closed over what the wide residual network and its cost need:
1-D temporal convolution, batch normalization, (P)ReLU, residual addition,
channel concatenation, a floored logarithm and a handful of reductions.
Tensors are laid out ``(batch, time, channels)``; a ``(time, channels)`` input
is promoted to a batch of one by :func:`as_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "AdamW",
    "AdamWState",
    "adamw_step",
    "as_batch",
    "backward",
    "batch_norm",
    "concat",
    "conv1d",
    "log_floor",
    "prelu",
    "relu",
    "residual_add",
]


class Tensor:
    """Array value with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return arr


def _result(data, parents, op, backward_fn):
    _check_finite(data, op)
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def as_batch(x):
    """Promote ``(T, C)`` to ``(1, T, C)``; pass 3-D tensors through."""
    x = _lift(x)
    if x.ndim == 3:
        return x
    if x.ndim != 2:
        raise ValueError(f"expected (T, C) or (B, T, C), got shape {x.shape}")
    return reshape(x, (1,) + x.shape)


def reshape(x, shape):
    x = _lift(x)
    old = x.shape

    def _bw(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), "reshape", _bw)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")

    def _bw(g):
        ga = g if a.ndim else g.sum()
        gb = g if b.ndim else g.sum()
        return ga, gb

    return _result(a.data + b.data, (a, b), "add", _bw)


def residual_add(main, shortcut):
    """Sum of a block's main path and its shortcut.

    Shapes must agree exactly; a mismatch means the block is widening and
    lacks its kernel-1 channel-matching convolution.
    """
    main, shortcut = _lift(main), _lift(shortcut)
    if main.shape != shortcut.shape:
        raise ValueError(
            f"residual shapes differ ({main.shape} vs {shortcut.shape}); "
            "a widening block needs a kernel-1 shortcut convolution"
        )
    return add(main, shortcut)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
        raise ValueError(f"shape mismatch in sub: {a.shape} vs {b.shape}")

    def _bw(g):
        ga = g if a.ndim else g.sum()
        gb = -g if b.ndim else -g.sum()
        return ga, gb

    return _result(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")

    def _bw(g):
        ga = g * b.data
        gb = g * a.data
        return (ga if a.ndim else ga.sum()), (gb if b.ndim else gb.sum())

    return _result(a.data * b.data, (a, b), "mul", _bw)


def square(x):
    x = _lift(x)

    def _bw(g):
        return (2.0 * x.data * g,)

    return _result(x.data * x.data, (x,), "square", _bw)


def tensor_sum(x):
    x = _lift(x)

    def _bw(g):
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(x.data.sum()), (x,), "sum", _bw)


def tensor_mean(x):
    x = _lift(x)
    n = x.data.size

    def _bw(g):
        return (np.broadcast_to(g / n, x.shape),)

    return _result(np.asarray(x.data.mean()), (x,), "mean", _bw)


def relu(x):
    x = _lift(x)
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", _bw)


def prelu(x, slope):
    """Per-channel parametric ReLU; ``slope`` has one entry per last-axis channel."""
    x, slope = _lift(x), _lift(slope)
    if slope.shape != (x.shape[-1],):
        raise ValueError(f"prelu slope shape {slope.shape} does not match channels {x.shape[-1]}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope.data * x.data)

    def _bw(g):
        gx = np.where(pos, g, g * slope.data)
        gs = np.where(pos, 0.0, g * x.data).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gs

    return _result(out, (x, slope), "prelu", _bw)


def log_floor(x, floor):
    """``log(max(x, floor))``; the gradient is zero where the floor is active."""
    x = _lift(x)
    active = x.data >= floor
    clipped = np.maximum(x.data, floor)

    def _bw(g):
        return (np.where(active, g / clipped, 0.0),)

    return _result(np.log(clipped), (x,), "log_floor", _bw)


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", _bw)


# ---------------------------------------------------------------------------
# convolution and normalization


def _unfold(x, k):
    # (B, T, C) -> (B, T, k*C) with zero "same" padding; tap j reads x[t + j - k//2]
    if k == 1:
        return x
    half = k // 2
    B, T, C = x.shape
    padded = np.zeros((B, T + 2 * half, C))
    padded[:, half:half + T] = x
    return np.concatenate([padded[:, j:j + T] for j in range(k)], axis=2)


def _fold(cols, k, C):
    # adjoint of _unfold
    if k == 1:
        return cols
    half = k // 2
    B, T, _ = cols.shape
    padded = np.zeros((B, T + 2 * half, C))
    for j in range(k):
        padded[:, j:j + T] += cols[:, :, j * C:(j + 1) * C]
    return padded[:, half:half + T]


def conv1d(x, weight, bias):
    """Stride-1 temporal convolution with zero "same" padding.

    Parameters
    ----------
    x : Tensor, shape (B, T, C_in) or (T, C_in)
    weight : Tensor, shape (k, C_in, C_out), k odd
    bias : Tensor, shape (C_out,)

    ``out[b, t, o] = bias[o] + sum_j sum_c weight[j, c, o] * x[b, t + j - k//2, c]``
    """
    x = as_batch(x)
    weight, bias = _lift(weight), _lift(bias)
    k, c_in, c_out = weight.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[-1]}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    B, T, _ = x.shape
    cols = _unfold(x.data, k)
    w2 = weight.data.reshape(k * c_in, c_out)
    out = (cols.reshape(B * T, k * c_in) @ w2).reshape(B, T, c_out) + bias.data

    def _bw(g):
        g2 = g.reshape(B * T, c_out)
        gw = (cols.reshape(B * T, k * c_in).T @ g2).reshape(k, c_in, c_out)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = _fold((g2 @ w2.T).reshape(B, T, k * c_in), k, c_in)
        return gx, gw, gb

    return _result(out, (x, weight, bias), "conv1d", _bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over every (batch, time) position.

    In training mode the biased batch variance normalizes the input and the
    running statistics (plain arrays, updated in place) move toward the batch
    statistics with ``momentum``; the running variance tracks the unbiased
    estimate. In evaluation mode the running statistics are used.
    """
    x = as_batch(x)
    gamma, beta = _lift(gamma), _lift(beta)
    C = x.shape[-1]
    flat = x.data.reshape(-1, C)
    n = flat.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch norm in training mode needs at least 2 values per channel")
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / (n - 1)
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batch norm evaluation requires running statistics")
        mu = running_mean.copy()
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def _bw(g):
        g2 = g.reshape(-1, C)
        xh = xhat.reshape(-1, C)
        ggamma = (g2 * xh).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxh = g2 * gamma.data
            if training:
                gx = inv_std / n * (n * gxh - gxh.sum(axis=0) - xh * (gxh * xh).sum(axis=0))
            else:
                gx = gxh * inv_std
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), "batch_norm", _bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    on_path = set()
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_path.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            if id(node) in on_path:
                raise RuntimeError("cycle detected in autodiff graph")
            continue
        seen.add(id(node))
        on_path.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``.

    Gradients accumulate across calls until zeroed.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check_finite(g, "backward")
            node._accumulate(g)
            continue
        if not node._parents:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"parameter/gradient shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= state.lr * update
    return params, state


class AdamW:
    """Optimizer wrapper holding :class:`AdamWState` for a list of tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
