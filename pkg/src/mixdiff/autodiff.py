"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape-based engine: every operation returns a ``Tensor`` that
remembers its parents and a closure propagating the output gradient to
them.  ``Tensor.backward()`` runs the closures in reverse topological
order.  Only the operations needed by the diffusion denoiser and the
evaluation models are provided, including fused recurrent layers
(LSTM, GRU) whose backward passes are hand-written BPTT so that a
training step costs a handful of BLAS calls instead of thousands of
tape nodes.

Everything is double precision; inputs of other dtypes are coerced.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy import special

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (used for sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node of the autodiff tape wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # Make ndarray <op> Tensor defer to the reflected Tensor methods
    # instead of numpy broadcasting over a python object.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; defaults to d(self)/d(self)=1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(self, other, lambda a, b: b / a,
                       lambda g, a, b: -g * b / (a * a), lambda g, a, b: g / a)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, y: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        return _unary(self, lambda a: a ** e, lambda g, a, y: g * e * a ** (e - 1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        def bwd(g, a, y):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return out
        return _unary(self, lambda a: a[idx], bwd)

    # -- shape ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _unary(self, lambda a: a.reshape(shape),
                      lambda g, a, y: g.reshape(a.shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return _unary(self, lambda a: a.transpose(axes),
                      lambda g, a, y: g.transpose(inv))

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def bwd(g, a, y):
            if axis is None:
                return np.broadcast_to(g, a.shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape).copy()
        return _unary(self, lambda a: a.sum(axis=axis, keepdims=keepdims), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = float(np.prod(self.data.shape)) if self.data.shape else 1.0
        else:
            n = float(self.data.shape[axis])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def item(self) -> float:
        return float(self.data)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    ta, tb = _wrap(a), _wrap(b)
    out = Tensor(fwd(ta.data, tb.data))
    if _GRAD_ENABLED and (ta.requires_grad or tb.requires_grad):
        out.requires_grad = True
        out._parents = (ta, tb)
        da, db = ta.data, tb.data

        def backward(g: np.ndarray) -> None:
            if ta.requires_grad:
                ta._accumulate(_unbroadcast(bwd_a(g, da, db), da.shape))
            if tb.requires_grad:
                tb._accumulate(_unbroadcast(bwd_b(g, da, db), db.shape))

        out._backward = backward
    return out


def _unary(a, fwd, bwd) -> Tensor:
    ta = _wrap(a)
    y = fwd(ta.data)
    out = Tensor(y)
    if _GRAD_ENABLED and ta.requires_grad:
        out.requires_grad = True
        out._parents = (ta,)
        da = ta.data

        def backward(g: np.ndarray) -> None:
            ta._accumulate(bwd(g, da, y))

        out._backward = backward
    return out


# -- elementwise functions (Tensor or ndarray in, same kind out) -------

def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    return _unary(x, np.exp, lambda g, a, y: g * y)


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    return _unary(x, np.log, lambda g, a, y: g / a)


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    return _unary(x, np.sqrt, lambda g, a, y: g * 0.5 / y)


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    return _unary(x, np.tanh, lambda g, a, y: g * (1.0 - y * y))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return special.expit(x)
    return _unary(x, special.expit, lambda g, a, y: g * y * (1.0 - y))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact Gaussian error linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    def f(a):
        return 0.5 * a * (1.0 + special.erf(a * _INV_SQRT2))

    def df(g, a, y):
        cdf = 0.5 * (1.0 + special.erf(a * _INV_SQRT2))
        pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
        return g * (cdf + a * pdf)

    if not isinstance(x, Tensor):
        return f(x)
    return _unary(x, f, df)


def silu(x):
    """x * sigmoid(x)."""
    def f(a):
        return a * special.expit(a)

    def df(g, a, y):
        s = special.expit(a)
        return g * (s + a * s * (1.0 - s))

    if not isinstance(x, Tensor):
        return f(x)
    return _unary(x, f, df)


def absolute(x):
    """Elementwise |x| with sign subgradient (0 at the kink)."""
    if not isinstance(x, Tensor):
        return np.abs(x)
    return _unary(x, np.abs, lambda g, a, y: g * np.sign(a))


def softmax(x, axis: int = -1):
    def f(a):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    if not isinstance(x, Tensor):
        return f(x)

    def df(g, a, y):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _unary(x, f, df)


def matmul(a, b) -> Tensor:
    ta, tb = _wrap(a), _wrap(b)
    if ta.ndim != 2 or tb.ndim != 2:
        raise ValueError("matmul expects 2-D operands, reshape first")
    return _binary(ta, tb, lambda x, y: x @ y,
                   lambda g, x, y: g @ y.T,
                   lambda g, x, y: x.T @ g)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    tensors = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])

        out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; x may have any number of leading dims."""
    shape = x.shape
    flat = x.reshape(-1, shape[-1]) if x.ndim != 2 else x
    y = matmul(flat, w)
    if b is not None:
        y = y + b
    if len(shape) != 2:
        y = y.reshape(*shape[:-1], w.shape[-1])
    return y


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _GRAD_ENABLED and (x.requires_grad or gain.requires_grad or bias.requires_grad):
        out.requires_grad = True
        out._parents = (x, gain, bias)

        def backward(g: np.ndarray) -> None:
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))

        out._backward = backward
    return out


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    return special.expit(a)


def lstm_layer(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
               reverse: bool = False) -> Tensor:
    """One direction of an LSTM over x of shape [B, L, D] -> [B, L, H].

    Weights: wx [D, 4H], wh [H, 4H], b [4H]; gate order (i, f, g, o).
    Initial hidden and cell state are zero.  With reverse=True the
    sequence is processed from the last step to the first; the output
    row at position l is the hidden state produced when step l was
    consumed, which is the usual bidirectional-RNN convention.
    """
    B, L, D = x.shape
    H4 = wx.shape[1]
    H = H4 // 4
    xd, wxd, whd, bd = x.data, wx.data, wh.data, b.data
    # Input projections for every step in one gemm.
    Z = (xd.reshape(B * L, D) @ wxd + bd).reshape(B, L, H4)
    order = range(L - 1, -1, -1) if reverse else range(L)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    y = np.empty((B, L, H))
    tape_on = _GRAD_ENABLED and (x.requires_grad or wx.requires_grad
                                 or wh.requires_grad or b.requires_grad)
    saved: list[tuple] = []
    for l in order:
        a = Z[:, l] + h @ whd
        i = _sigmoid_np(a[:, :H])
        f = _sigmoid_np(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid_np(a[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        y[:, l] = h
        if tape_on:
            saved.append((l, i, f, g, o, c_prev, h_prev, tc))
    out = Tensor(y)
    if tape_on:
        out.requires_grad = True
        out._parents = (x, wx, wh, b)

        def backward(gy: np.ndarray) -> None:
            dZ = np.zeros((B, L, H4))
            dwh = np.zeros_like(whd)
            dh = np.zeros((B, H))
            dc = np.zeros((B, H))
            for l, i, f, g, o, c_prev, h_prev, tc in reversed(saved):
                dh = dh + gy[:, l]
                do = dh * tc
                dc = dc + dh * o * (1.0 - tc * tc)
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                dc = dc * f
                da = np.concatenate([di * i * (1.0 - i),
                                     df * f * (1.0 - f),
                                     dg * (1.0 - g * g),
                                     do * o * (1.0 - o)], axis=1)
                dZ[:, l] = da
                dwh += h_prev.T @ da
                dh = da @ whd.T
            flat = dZ.reshape(B * L, H4)
            if wh.requires_grad:
                wh._accumulate(dwh)
            if b.requires_grad:
                b._accumulate(flat.sum(axis=0))
            if wx.requires_grad:
                wx._accumulate(xd.reshape(B * L, D).T @ flat)
            if x.requires_grad:
                x._accumulate((flat @ wxd.T).reshape(B, L, D))

        out._backward = backward
    return out


def gru_layer(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Unidirectional GRU over x of shape [B, L, D] -> [B, L, H].

    Weights: wx [D, 3H], wh [H, 3H], b [3H]; gate order (z, r, n) with
    the reset gate applied to the hidden contribution of the candidate.
    """
    B, L, D = x.shape
    H3 = wx.shape[1]
    H = H3 // 3
    xd, wxd, whd, bd = x.data, wx.data, wh.data, b.data
    Gx = (xd.reshape(B * L, D) @ wxd + bd).reshape(B, L, H3)
    h = np.zeros((B, H))
    y = np.empty((B, L, H))
    tape_on = _GRAD_ENABLED and (x.requires_grad or wx.requires_grad
                                 or wh.requires_grad or b.requires_grad)
    saved: list[tuple] = []
    for l in range(L):
        gh = h @ whd
        z = _sigmoid_np(Gx[:, l, :H] + gh[:, :H])
        r = _sigmoid_np(Gx[:, l, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(Gx[:, l, 2 * H:] + r * gh[:, 2 * H:])
        h_prev = h
        h = (1.0 - z) * n + z * h_prev
        y[:, l] = h
        if tape_on:
            saved.append((z, r, n, h_prev, gh[:, 2 * H:]))
    out = Tensor(y)
    if tape_on:
        out.requires_grad = True
        out._parents = (x, wx, wh, b)

        def backward(gy: np.ndarray) -> None:
            dGx = np.zeros((B, L, H3))
            dwh = np.zeros_like(whd)
            dh = np.zeros((B, H))
            for l in range(L - 1, -1, -1):
                z, r, n, h_prev, ghn = saved[l]
                dh = dh + gy[:, l]
                dz = dh * (h_prev - n)
                dn = dh * (1.0 - z)
                dh_prev = dh * z
                da_n = dn * (1.0 - n * n)
                dr = da_n * ghn
                da_z = dz * z * (1.0 - z)
                da_r = dr * r * (1.0 - r)
                dGx[:, l, :H] = da_z
                dGx[:, l, H:2 * H] = da_r
                dGx[:, l, 2 * H:] = da_n
                dgh = np.concatenate([da_z, da_r, da_n * r], axis=1)
                dwh += h_prev.T @ dgh
                dh = dgh @ whd.T + dh_prev
            flat = dGx.reshape(B * L, H3)
            if wh.requires_grad:
                wh._accumulate(dwh)
            if b.requires_grad:
                b._accumulate(flat.sum(axis=0))
            if wx.requires_grad:
                wx._accumulate(xd.reshape(B * L, D).T @ flat)
            if x.requires_grad:
                x._accumulate((flat @ wxd.T).reshape(B, L, D))

        out._backward = backward
    return out
