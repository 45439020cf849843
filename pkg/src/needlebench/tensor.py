"""Dense float64 tensors with reverse-mode gradients on a recorded tape.

Every op builds its output eagerly with numpy and, when gradients are
enabled, records an explicit backward closure plus parent links.  Calling
``backward()`` on a scalar walks the tape in reverse topological order.
There is no general broadcasting engine beyond what the ops below need,
and no dtype besides float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


_grad_enabled: bool = True

LAYER_NORM_EPS = 1e-5


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference hot path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Row-major float64 array plus optional grad and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        _check_finite(arr, "init")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse pass from this node.  Scalar outputs seed with 1.0."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
            # the closure captures the node itself; break the cycle so big
            # graphs free by refcount instead of waiting on the gc
            node._backward = None
            node._parents = ()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """Tensor registered with a module; ``trainable=False`` freezes it."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.trainable = bool(trainable)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_factory) -> Tensor:
    """Wrap an op result; record tape links when grads are on."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._backward = None
    out._parents = ()
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_factory(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    """a + b with numpy broadcasting; grads un-broadcast by summation."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    data = a.data + b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))
        return run

    return _make(data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    data = a.data - b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad, b.shape))
        return run

    return _make(data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    data = a.data * b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        return run

    return _make(data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    data = a.data / b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad * a.data / (b.data ** 2), b.shape))
        return run

    return _make(data, "div", (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    data = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))
        return run

    return _make(data, "minimum", (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))
        return run

    return _make(data, "maximum", (a, b), bw)


# -- shape ops ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.  2-D or stacked (leading batch dims follow numpy matmul)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def run():
            if a.requires_grad:
                ga = out.grad @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ out.grad
                b._accumulate(_unbroadcast(gb, b.shape))
        return run

    return _make(data, "matmul", (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default reverses them."""
    perm = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    data = np.transpose(a.data, perm)
    inv = np.argsort(perm)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(np.transpose(out.grad, inv))
        return run

    return _make(data, "transpose", (a,), bw)


def swap_last2(a: Tensor) -> Tensor:
    """Transpose the trailing two axes, keeping any batch dims."""
    perm = list(range(a.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(a, perm)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(a.shape))
        return run

    return _make(data, "reshape", (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(int(lo), int(hi))
                    p._accumulate(out.grad[tuple(idx)])
        return run

    return _make(data, "concat", parts, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[idx] = out.grad
                a._accumulate(g)
        return run

    return _make(data, "narrow", (a,), bw)


def sum_(a: Tensor, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy())
        return run

    return _make(data, "sum", (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape) / n)
        return run

    return _make(data, "mean", (a,), bw)


# -- nonlinearities --------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    data = a.data * cdf

    def bw(out):
        def run():
            if a.requires_grad:
                pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data ** 2)
                a._accumulate(out.grad * (cdf + a.data * pdf))
        return run

    return _make(data, "gelu", (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * mask)
        return run

    return _make(data, "relu", (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * (1.0 - data ** 2))
        return run

    return _make(data, "tanh", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = np.where(a.data >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * data * (1.0 - data))
        return run

    return _make(data, "sigmoid", (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * data)
        return run

    return _make(data, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad / a.data)
        return run

    return _make(data, "log", (a,), bw)


def abs_(a: Tensor) -> Tensor:
    """|a| with sign subgradient (0 at 0)."""
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * sign)
        return run

    return _make(data, "abs", (a,), bw)


# -- softmax / layer norm / linear ----------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows along ``axis`` sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad:
                gy = out.grad
                dot = (gy * data).sum(axis=axis, keepdims=True)
                a._accumulate(data * (gy - dot))
        return run

    return _make(data, "softmax", (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    gain and bias have the last-axis length.  Variance is biased (1/N).
    """
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} "
            f"do not match feature dim {a.shape[-1:]}")
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    data = xhat * gain.data + bias.data

    def bw(out):
        def run():
            gy = out.grad
            if gain.requires_grad:
                red = tuple(range(gy.ndim - 1))
                gain._accumulate((gy * xhat).sum(axis=red))
            if bias.requires_grad:
                red = tuple(range(gy.ndim - 1))
                bias._accumulate(gy.sum(axis=red))
            if a.requires_grad:
                dxhat = gy * gain.data
                term1 = dxhat
                term2 = dxhat.mean(axis=-1, keepdims=True)
                term3 = xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                a._accumulate(ivar * (term1 - term2 - term3))
        return run

    return _make(data, "layer_norm", (a, gain, bias), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b).  x (..., in), w (in, out), b (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape} vs w {w.shape}")
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron with GELU: gelu(x w1 + b1) w2 + b2."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- losses ----------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray,
                    weight: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable form.

    loss_i = max(x,0) - x t + log(1 + exp(-|x|)), optionally weighted.
    """
    if isinstance(target, Tensor):
        target = target.data
    if isinstance(weight, Tensor):
        weight = weight.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce target {t.shape} vs logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if weight is not None:
        per = per * weight
    data = np.asarray(per.mean())

    def bw(out):
        def run():
            if logits.requires_grad:
                sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                               np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                g = (sig - t)
                if weight is not None:
                    g = g * weight
                logits._accumulate(out.grad * g / x.size)
        return run

    return _make(data, "bce_with_logits", (logits,), bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    return mean(abs_(sub(pred, _as_tensor(target))))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error."""
    d = sub(pred, _as_tensor(target))
    return mean(mul(d, d))


def expand_leading(t: Tensor, n: int) -> Tensor:
    """Tile t along a new leading axis of size n; backward sums it away."""
    zeros = Tensor(np.zeros((n,) + t.shape))
    return add(zeros, t)


# -- gradient checking -----------------------------------------------------


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Compare tape gradients of scalar fn() against central differences.

    Returns the max over all coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar objective")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        # index element-wise so perturbations hit the live array even if a
        # caller assigned non-C-contiguous data
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            with no_grad():
                f_plus = float(fn().data)
            p.data[idx] = orig - eps
            with no_grad():
                f_minus = float(fn().data)
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(g[idx])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    for p in params:
        p.zero_grad()
    return worst
