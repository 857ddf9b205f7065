"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the disaggregation model needs: valid
1-D cross-correlation, affine (linear) maps, ReLU/Sigmoid, elementwise
add/mul, sum/mean reductions, reshape and mean-squared-error. Gradients
accumulate across repeated ``backward`` calls until cleared.

Arrays are float64 by default; pass float32 data for the fast mode.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError

__all__ = [
    "Tensor",
    "conv1d",
    "linear",
    "relu",
    "sigmoid",
    "activation",
    "add",
    "mul",
    "sum_",
    "mean",
    "reshape",
    "mse_loss",
    "backward",
    "zero_grad",
    "SGD",
    "Adam",
    "make_optimizer",
]


class Tensor:
    """A numpy array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# layer operations
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x[(B,)C_in,L] with kernels w[C_out,C_in,K]."""
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    single = x.data.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be [C_in, L] or [B, C_in, L], got {x.data.shape}")
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d: kernels must be [C_out, C_in, K], got {w.data.shape}")
    c_out, c_in, k = w.data.shape
    if xd.shape[1] != c_in:
        raise ShapeError(
            f"conv1d: input channel axis is {xd.shape[1]} but kernels expect C_in={c_in}")
    if xd.shape[2] < k:
        raise ShapeError(
            f"conv1d: length axis {xd.shape[2]} shorter than kernel size K={k}")
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias axis is {b.data.shape} but kernels produce C_out={c_out}")

    xd = np.ascontiguousarray(xd)
    out = kernels.conv1d_forward(xd, w.data, b.data, stride)

    def back(g):
        g = np.ascontiguousarray(g[None] if single else g)
        gx, gw, gb = kernels.conv1d_backward(xd, w.data, g, stride)
        if x.requires_grad:
            x.accumulate(gx[0] if single else gx)
        if w.requires_grad:
            w.accumulate(gw)
        if b.requires_grad:
            b.accumulate(gb)

    return _result(out[0] if single else out, (x, w, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w @ x + b for x[(B,)F_in], w[F_out,F_in], b[F_out]."""
    single = x.data.ndim == 1
    xd = x.data[None] if single else x.data
    if xd.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: got input {x.data.shape}, weights {w.data.shape}")
    f_out, f_in = w.data.shape
    if xd.shape[1] != f_in:
        raise ShapeError(f"linear: input feature axis is {xd.shape[1]}, weights expect F_in={f_in}")
    if b.data.shape != (f_out,):
        raise ShapeError(f"linear: bias axis is {b.data.shape}, weights produce F_out={f_out}")
    out = xd @ w.data.T + b.data

    def back(g):
        g2 = g[None] if single else g
        if x.requires_grad:
            x.accumulate((g2 @ w.data)[0] if single else g2 @ w.data)
        if w.requires_grad:
            w.accumulate(g2.T @ xd)
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return _result(out[0] if single else out, (x, w, b), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return _result(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def back(g):
        if x.requires_grad:
            x.accumulate(g * out * (1.0 - out))

    return _result(out, (x,), back)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation dispatch; kind is 'relu' or 'sigmoid'."""
    try:
        return _ACTIVATIONS[kind.lower()](x)
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# elementwise / reduction operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(out, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a Tensor or a constant array/scalar."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = a.data * b.data

        def back(g):
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return _result(out, (a, b), back)

    c = np.asarray(b, dtype=a.data.dtype)
    out = a.data * c

    def back_const(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _result(out, (a,), back_const)


def sum_(x: Tensor) -> Tensor:
    out = x.data.sum()

    def back(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, g))

    return _result(out, (x,), back)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()

    def back(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, g / n))

    return _result(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def back(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    return _result(out, (x,), back)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences; target gradients are not tracked."""
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    out = np.mean(diff * diff)
    n = diff.size

    def back(g):
        if pred.requires_grad:
            pred.accumulate(g * 2.0 * diff / n)

    return _result(out, (pred,), back)


# ---------------------------------------------------------------------------
# reverse pass and optimizers
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grad on every requires_grad tensor reachable from loss.

    Gradients accumulate across calls until cleared with zero_grad.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    kind = "sgd"

    def __init__(self, params, lr=1e-3):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("optimizer step with missing gradient")
            p.data -= self.lr * p.grad


class Adam:
    """Bias-corrected adaptive moments (Kingma & Ba defaults)."""

    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ValueError("optimizer step with missing gradient")
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(kind: str, params, lr: float):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(params, lr=lr)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
