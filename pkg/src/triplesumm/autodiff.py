"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph once in reverse
topological order, accumulates into leaf ``.grad`` buffers, and then
releases the graph.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)
        return out

    # -- operators -----------------------------------------------------
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

    @property
    def T(self):
        return transpose(self, None)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        reverse_accumulate(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def parameter(data, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def reverse_accumulate(loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf reachable from ``loss`` with d(loss)/d(leaf).

    Leaf gradients accumulate additively, so calling this on several losses
    that share parameters sums their gradients. The graph is released
    afterwards; a second call on the same loss raises ``GraphError``.
    """
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b`` (cond is constant)."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb))

    return _make(np.where(cond, a.data, b.data).astype(a.dtype, copy=False), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat_rhs = bd.ndim == 2 and ad.ndim > 2

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ bd.T if bd.ndim == 2 else g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat_rhs:
                # one GEMM instead of a batched product followed by a reduction
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if flat_rhs:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd
    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is false get exactly 0."""
    xd = x.data
    if np.isnan(xd).any():
        raise ValueError("softmax input contains NaN")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        allowed = np.broadcast_to(mask, xd.shape)
        if not allowed.any(axis=axis).all():
            raise ValueError("attention mask leaves a query row with no allowed key")
        xd = np.where(allowed, xd, -np.inf)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ValueError(f"layer_norm width mismatch: input {d}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None,
            _unbroadcast(g, bd.shape) if bias.requires_grad else None,
        )

    return _make((xhat * gd + bd).astype(x.dtype, copy=False), (x, gain, bias), backward)


def _sigmoid(xd: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data).astype(x.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd).astype(xd.dtype, copy=False)
    return _make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd * _INV_SQRT2))).astype(xd.dtype, copy=False)
    pdf = (_INV_SQRT2PI * np.exp(-0.5 * xd * xd)).astype(xd.dtype, copy=False)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"gelu": gelu, "silu": silu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# composite layers


def scaled_masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                            dropout_rate: float = 0.0, rng: np.random.Generator | None = None):
    """softmax(q k^T / sqrt(dk)) v over the keys allowed by ``mask``.

    Leading axes broadcast. Returns ``(out, weights)``; weights are taken
    before dropout so they can be inspected.
    """
    dk = q.shape[-1]
    if k.shape[-1] != dk or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        nq, nk = q.shape[-2], k.shape[-2]
        if mask.shape[-2:] != (nq, nk) and mask.shape[-2:] != (1, nk):
            raise ValueError(f"mask shape {mask.shape} does not match {nq}x{nk}")
    logits = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(dk))
    weights = softmax(logits, axis=-1, mask=mask)
    out = matmul(dropout(weights, dropout_rate, rng), v)
    return out, weights


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor,
               dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """(silu(x W1) * (x W3)) W2."""
    if w1.shape[-2] != x.shape[-1] or w3.shape != w1.shape or w2.shape[-2] != w1.shape[-1]:
        raise ValueError(f"swiglu dims inconsistent: x {x.shape}, w1 {w1.shape}, w3 {w3.shape}, w2 {w2.shape}")
    hidden = mul(silu(matmul(x, w1)), matmul(x, w3))
    return dropout(matmul(hidden, w2), dropout_rate, rng)


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                            floor: float = 1e-8, analytic: Sequence[np.ndarray] | None = None,
                            indices: Sequence[np.ndarray] | None = None) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar tensor. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``analytic`` overrides the gradients computed from ``f`` (used to audit a
    32-bit graph against 64-bit differences); ``indices`` restricts which
    flat entries of each parameter are probed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        loss = f()
        if not np.isfinite(loss.data).all():
            raise ValueError("objective is not finite")
        loss.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        a_in = analytic[pi]
        agrad = (np.zeros(flat.size) if a_in is None else np.asarray(a_in, dtype=np.float64)).reshape(-1)
        probe = range(flat.size) if indices is None else indices[pi]
        for j in probe:
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[j] = orig - h
            with no_grad():
                fm = float(f().data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("objective is not finite")
            num = (fp - fm) / (2.0 * h)
            a = agrad[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
