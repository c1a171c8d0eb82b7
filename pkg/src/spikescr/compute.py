"""Minimal define-by-run tensor substrate with reverse-mode differentiation.

Every layer of the network is expressed with the handful of primitives in
this module.  Arrays are numpy ``float32`` by default; a tensor created from
``float64`` data stays ``float64``, which the finite-difference checks use.

Gradients accumulate additively into ``Tensor.grad``.  ``backward`` walks the
graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d array that records the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic attributes ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
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
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Attach ``backward`` (grad -> per-parent grads) if any parent needs it."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return make_node(ad / bd, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,))


def arctan(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.arctan(xd), (x,), lambda g: (g / (1.0 + xd * xd),))


# -- shape --------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_node(x.data[idx], (x,), backward)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def backward(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return make_node(np.pad(x.data, widths), (x,), backward)


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1 or bd.ndim == 1:
            a2 = ad[None, :] if ad.ndim == 1 else ad
            b2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g.reshape(g.shape + (1,)) if bd.ndim == 1 else g
            g2 = g2[..., None, :] if ad.ndim == 1 else g2
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            ga = ga.reshape(ad.shape) if ad.ndim == 1 else ga
            gb = gb.reshape(bd.shape) if bd.ndim == 1 else gb
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got input {x.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out.reshape(lead + (wd.shape[0],)), parents, backward)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-d cross-correlation.

    x: (B, C_in, L); w: (C_out, C_in // groups, k) -> (B, C_out, L_out).
    """
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and weight, got {x.shape} and {w.shape}")
    B, C_in, L = x.shape
    C_out, cg_in, k = w.shape
    if groups < 1 or C_in % groups or C_out % groups:
        raise DimensionError(f"channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if cg_in != C_in // groups:
        raise DimensionError(f"weight expects {cg_in * groups} input channels, input has {C_in}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    L_out = (L + 2 * padding - k) // stride + 1
    if L_out < 1:
        raise DimensionError(f"conv1d output length {L_out} < 1 for L={L}, k={k}, padding={padding}")

    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    # windows: (B, C_in, L_out, k)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cg_out = C_out // groups
    depthwise = groups == C_in and cg_in == 1 and cg_out == 1

    if depthwise:
        out = np.einsum("bclk,ck->bcl", win, wd[:, 0, :], optimize=True)
    elif groups == 1 and k == 1:
        out = np.matmul(wd[:, :, 0], xp[:, :, ::stride])
    elif groups == 1:
        cols = win.transpose(0, 2, 1, 3).reshape(B, L_out, C_in * k)
        out = (cols @ wd.reshape(C_out, -1).T).transpose(0, 2, 1)
    else:
        wg = win.reshape(B, groups, cg_in, L_out, k)
        wk = wd.reshape(groups, cg_out, cg_in, k)
        out = np.einsum("bgclk,gock->bgol", wg, wk, optimize=True).reshape(B, C_out, L_out)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if depthwise:
            gw = np.einsum("bcl,bclk->ck", g, win, optimize=True)[:, None, :]
            gwin = None
            if x.requires_grad and stride == 1:
                # full correlation of the upstream gradient with the flipped kernel
                gpp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
                gwv = np.lib.stride_tricks.sliding_window_view(gpp, k, axis=2)
                gxp = np.einsum("bclk,ck->bcl", gwv, wd[:, 0, ::-1], optimize=True)
                gx = gxp[:, :, padding:padding + L] if padding else gxp
                grads = (np.ascontiguousarray(gx), gw.astype(wd.dtype, copy=False))
                return grads + ((g.sum(axis=(0, 2)),) if bias is not None else ())
            if x.requires_grad:
                gwin = g[..., None] * wd[:, 0, None, :]
        elif groups == 1 and k == 1:
            xs = xp[:, :, ::stride]
            gw = np.einsum("bol,bil->oi", g, xs, optimize=True)[:, :, None]
            if x.requires_grad:
                gsub = np.matmul(wd[:, :, 0].T, g)
                gxp = np.zeros_like(xp)
                gxp[:, :, ::stride] = gsub
                gx = gxp[:, :, padding:padding + L] if padding else gxp
            else:
                gx = None
            grads = (gx, gw.astype(wd.dtype, copy=False))
            return grads + ((g.sum(axis=(0, 2)),) if bias is not None else ())
        elif groups == 1:
            gt = g.transpose(0, 2, 1).reshape(-1, C_out)
            cols2 = win.transpose(0, 2, 1, 3).reshape(-1, C_in * k)
            gw = (gt.T @ cols2).reshape(wd.shape)
            if x.requires_grad:
                gcols = (gt @ wd.reshape(C_out, -1)).reshape(B, L_out, C_in, k)
                gwin = gcols.transpose(0, 2, 1, 3)
            else:
                gwin = None
        else:
            gg = g.reshape(B, groups, cg_out, L_out)
            wg = win.reshape(B, groups, cg_in, L_out, k)
            wk = wd.reshape(groups, cg_out, cg_in, k)
            gw = np.einsum("bgol,bgclk->gock", gg, wg, optimize=True).reshape(wd.shape)
            gwin = (np.einsum("bgol,gock->bgclk", gg, wk, optimize=True).reshape(B, C_in, L_out, k)
                    if x.requires_grad else None)
        gx = None
        if gwin is not None:
            gxp = np.zeros_like(xp)
            span = stride * (L_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gwin[..., j]
            gx = gxp[:, :, padding:padding + L] if padding else gxp
        grads = (gx, gw.astype(wd.dtype, copy=False))
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    return make_node(out, parents, backward)


# -- normalization ------------------------------------------------------------

@dataclass
class BNState:
    """Affine parameters and running statistics of one batch-norm layer."""

    num_features: int
    eps: float = 1e-5
    momentum: float = 0.1
    weight: Tensor = field(default=None)
    bias: Tensor = field(default=None)
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_features
        if self.weight is None:
            self.weight = Tensor(np.ones(n, dtype=np.float32), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(n, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(n, dtype=np.float32)


def batchnorm(x: Tensor, state: BNState, training: bool, axis: int = -1) -> Tensor:
    """Per-channel batch normalization; ``axis`` names the channel dimension."""
    axis = axis % x.ndim
    C = x.shape[axis]
    if C != state.num_features:
        raise DimensionError(f"batchnorm expects {state.num_features} channels on axis {axis}, got {C}")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = C
    xd = x.data
    gamma = state.weight.data.reshape(bshape)
    beta = state.bias.data.reshape(bshape)

    if training:
        acc = xd.astype(np.float64)
        mu = acc.mean(axis=red)
        var = acc.var(axis=red)
        n = xd.size // C
        m = state.momentum
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
        mu = mu.astype(xd.dtype)
        var = var.astype(xd.dtype)
    else:
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
        n = None
    inv_std = (1.0 / np.sqrt(var + state.eps)).reshape(bshape).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std
    out = xhat * gamma + beta

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = g * gamma
        if training:
            gx = inv_std * (gxhat - gxhat.mean(axis=red, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=red, keepdims=True))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_node(out.astype(xd.dtype, copy=False), (x, state.weight, state.bias), backward)


def fold_bn(weight: np.ndarray, bias: np.ndarray | None, state: BNState,
            channel_axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fold an eval-mode BN that follows a linear/conv layer into that layer.

    ``channel_axis`` is the weight axis indexing output channels.
    """
    w64 = weight.astype(np.float64)
    scale = state.weight.data.astype(np.float64) / np.sqrt(state.running_var.astype(np.float64) + state.eps)
    shape = [1] * w64.ndim
    shape[channel_axis] = -1
    b = np.zeros(weight.shape[channel_axis]) if bias is None else bias.astype(np.float64)
    new_w = w64 * scale.reshape(shape)
    new_b = (b - state.running_mean.astype(np.float64)) * scale + state.bias.data.astype(np.float64)
    return new_w.astype(weight.dtype), new_b.astype(weight.dtype)


# -- softmax family -----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


# -- custom gradients ---------------------------------------------------------

def custom_grad(forward_fn: Callable[..., np.ndarray],
                backward_fn: Callable[..., Iterable[np.ndarray | None]]) -> Callable[..., Tensor]:
    """Register an operation whose backward rule is supplied by the caller.

    ``forward_fn(*arrays, **kw)`` returns the output array.
    ``backward_fn(grad, out, *arrays, **kw)`` returns one gradient per input
    (a lone array is accepted for unary ops).
    """

    def op(*inputs, **kwargs) -> Tensor:
        tensors = [_wrap(t) for t in inputs]
        arrays = [t.data for t in tensors]
        out = forward_fn(*arrays, **kwargs)

        def backward(g):
            res = backward_fn(g, out, *arrays, **kwargs)
            if isinstance(res, np.ndarray):
                res = (res,)
            return tuple(res)

        return make_node(np.asarray(out), tensors, backward)

    op.__name__ = getattr(forward_fn, "__name__", "custom_op")
    return op


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
