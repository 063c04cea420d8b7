"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: each op wires a closure onto its output that
knows how to push the output gradient to the inputs. ``backward()`` walks
the closures in reverse topological order. A tensor used at several graph
sites accumulates the sum of the per-site gradients, which is exactly what
makes cross-layer weight tying work with no extra machinery.

All math is float64. A 32-bit mode is deliberately absent: the accuracy
headroom is what lets finite-difference checks run at tight tolerances.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ConfigurationError, DimensionError, InputError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return np.array(self.data, copy=True)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self):
        return Tensor(self.data.copy())

    # -- autodiff ------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not part of the op set")
        return mul(self, _wrap(1.0 / other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for child in it:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, inputs, backward):
    """Create an op output, recording the closure when grads are live."""
    tracked = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._prev = tuple(t for t in inputs if t.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and linear algebra -----------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(out_data, (a, b), _bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul expects stacked matrices, got ndim {a.ndim} and {b.ndim}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.data.shape[-1]} vs {b.data.shape[-2]}"
        )
    out_data = a.data @ b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    out = _make(out_data, (a, b), _bw)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def _bw():
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), _bw)
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def _bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    out = _make(out_data, (a,), _bw)
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), _wrap(1.0 / count))


# -- neural-net operators ----------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out_data = xd * cdf

    def _bw():
        if x.requires_grad:
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            _accum(x, out.grad * (cdf + xd * pdf))

    out = _make(out_data, (x,), _bw)
    return out


def _grouped_corr(xp, w, stride, groups):
    """Valid-mode strided cross-correlation of a padded batch with grouped
    weights. Pure numpy arrays in, array out; shared by the forward pass
    and by the input-gradient computation (which is itself a correlation
    with transposed, flipped weights)."""
    n, ci, hp, wp = xp.shape
    co, cg, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    if groups == 1:
        out = np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)
    elif cg == 1 and groups == ci == co:
        out = np.einsum("nchwuv,cuv->nchw", win, w[:, 0], optimize=True)
    else:
        wv = win.reshape(n, groups, cg, ho, wo, kh, kw)
        ww = w.reshape(groups, co // groups, cg, kh, kw)
        out = np.einsum("ngchwuv,gocuv->ngohw", wv, ww, optimize=True)
        out = out.reshape(n, co, ho, wo)
    return np.ascontiguousarray(out)


def _conv_weight_grad(xp, go, stride, groups, kh, kw):
    n, ci, hp, wp = xp.shape
    co = go.shape[1]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cg = ci // groups
    if groups == 1:
        dw = np.einsum("nchwuv,nohw->ocuv", win, go, optimize=True)
    elif cg == 1 and groups == ci == co:
        dw = np.einsum("nchwuv,nchw->cuv", win, go, optimize=True)[:, None]
    else:
        wv = win.reshape(n, groups, cg, ho, wo, kh, kw)
        gv = go.reshape(n, groups, co // groups, ho, wo)
        dw = np.einsum("ngchwuv,ngohw->gocuv", wv, gv, optimize=True)
        dw = dw.reshape(co, cg, kh, kw)
    return dw


def _conv_input_grad(go, w, x_shape, stride, padding, groups):
    n, ci, h, wide = x_shape
    co, cg, kh, kw = w.shape
    ho, wo = go.shape[2], go.shape[3]
    if stride > 1:
        gd = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gd[:, :, ::stride, ::stride] = go
    else:
        gd = go
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    og = co // groups
    wt = w.reshape(groups, og, cg, kh, kw).transpose(0, 2, 1, 3, 4)
    wt = np.ascontiguousarray(wt.reshape(ci, og, kh, kw)[:, :, ::-1, ::-1])
    dxp = _grouped_corr(gp, wt, 1, groups)
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + wide]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d cross-correlation, [N,Cin,H,W] -> [N,Cout,H',W']."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d [N,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {weight.shape}")
    n, cin, h, wd_ = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(
            f"channels must divide groups: Cin={cin}, Cout={cout}, groups={groups}"
        )
    if cg != cin // groups:
        raise DimensionError(
            f"weight input-channel axis is {cg}, expected Cin/groups = {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(
            f"bias axis must be ({cout},) to match Cout, got {bias.shape}"
        )
    if (h + 2 * padding - kh) % stride != 0 or (wd_ + 2 * padding - kw) % stride != 0:
        raise DimensionError(
            f"spatial axes do not tile: H={h}, W={wd_}, K=({kh},{kw}), "
            f"stride={stride}, padding={padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd_ + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"empty output grid {ho}x{wo}")

    xd, wdat = x.data, weight.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1
    if pointwise:
        out_data = np.tensordot(wdat.reshape(cout, cin), xd, axes=([1], [1]))
        out_data = np.ascontiguousarray(out_data.transpose(1, 0, 2, 3))
        xp = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else xd
        out_data = _grouped_corr(xp, wdat, stride, groups)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _bw():
        go = out.grad
        if weight.requires_grad:
            if pointwise:
                dw = np.tensordot(go, xd, axes=([0, 2, 3], [0, 2, 3]))
                dw = dw.reshape(weight.data.shape)
            else:
                dw = _conv_weight_grad(xp, go, stride, groups, kh, kw)
            _accum(weight, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, go.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if pointwise:
                dx = np.tensordot(wdat.reshape(cout, cin), go, axes=([0], [1]))
                dx = dx.transpose(1, 0, 2, 3)
            else:
                dx = _conv_input_grad(go, wdat, x.data.shape, stride, padding, groups)
            _accum(x, dx)

    out = _make(out_data, inputs, _bw)
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    if eps <= 0:
        raise ConfigurationError(f"batchnorm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batchnorm input must be 4-d, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"affine axes must be ({c},), got gamma {gamma.shape} beta {beta.shape}"
        )
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1.0)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        m = None
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def _bw():
        go = out.grad
        if gamma.requires_grad:
            _accum(gamma, (go * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, go.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gshape = gamma.data.reshape(1, c, 1, 1)
            dxhat = go * gshape
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(1, c, 1, 1)
            _accum(x, dx)

    out = _make(out_data, (x, gamma, beta), _bw)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"pool input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def _bw():
        if x.requires_grad:
            g = out.grad[:, :, None, None] / (h * w)
            _accum(x, np.broadcast_to(g, x.data.shape))

    out = _make(out_data, (x,), _bw)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"linear expects 2-d input/weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"feature axis mismatch: input has {x.shape[1]}, weight has {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"bias axis must be ({weight.shape[0]},), got {bias.shape}"
        )
    out_data = x.data @ weight.data.T + bias.data

    def _bw():
        go = out.grad
        if x.requires_grad:
            _accum(x, go @ weight.data)
        if weight.requires_grad:
            _accum(weight, go.T @ x.data)
        if bias.requires_grad:
            _accum(bias, go.sum(axis=0))

    out = _make(out_data, (x, weight, bias), _bw)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the integer labels, max-stabilized."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d [N,K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    out_data = -logp[np.arange(n), labels].mean()

    def _bw():
        if logits.requires_grad:
            g = sm.copy()
            g[np.arange(n), labels] -= 1.0
            _accum(logits, g * (out.grad / n))

    out = _make(out_data, (logits,), _bw)
    return out
