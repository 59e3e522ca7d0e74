"""Minimal dense-tensor library with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 for training, float64 for gradient
checking) and records the op that produced it. backward() on a scalar loss
walks the graph in reverse topological order and accumulates gradients into
every requires_grad leaf.

The op set is static: exactly what the denoiser needs (matmul, conv2d,
group_norm, layer_norm, softmax, SiLU, elementwise add/mul, reshape,
transpose, concat, nearest upsampling, embedding gather, sum/mean).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- backward ------------------------------------------------------------
    def backward(self):
        """Populate .grad of every requires_grad node reachable from self.

        self must be scalar (size 1)."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate grads are not part of the contract; free them
        for node in reversed(topo):
            if node._backward is not None and node is not self:
                node.grad = None


def _needs_graph(parents: Iterable[Tensor]) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _needs_graph(parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # store by reference; the second accumulation is out-of-place so
        # aliased buffers are never mutated
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * s

    def backward(g):
        _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return _node(out_data, (x,), backward)


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _node(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(out_data, tuple(tensors), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,2H,2W) by pixel repetition."""
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        _accum(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), backward)


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(out_data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of weight[V, D] by an integer id array (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        from .errors import VocabError

        raise VocabError(
            f"id out of range [0, {weight.data.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    out_data = weight.data[ids]

    def backward(g):
        if not weight.requires_grad:
            return
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))
        _accum(weight, gw)

    return _node(out_data, (weight,), backward)


# -- softmax --------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _node(y, (x,), backward)


# -- convolution ------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """View padded input (N,C,Hp,Wp) as columns (N, C*kh*kw, ho*wo)."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation: x (N,C,H,W), w (O,C,kh,kw), optional bias (O,)."""
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigError(
            f"non-integer output extent: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # reshape in _im2col copies
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if b is not None:
        out_data += b.data.reshape(1, o, 1, 1)

    def backward(g):
        gmat = g.reshape(n, o, ho * wo)
        if w.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)  # (n, c*kh*kw, ho*wo)
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


# -- normalization ------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-group zero mean / unit variance over (C/groups, H, W), then affine."""
    n, c, h, w = x.data.shape
    if c % groups:
        raise ConfigError(f"group_norm: channels {c} not divisible by groups {groups}")
    xg = x.data.reshape(n, groups, -1)
    m = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - m) * inv).reshape(n, c, h, w)
    out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = inv * (dxhat - mean_d - xh * mean_dx)
            _accum(x, gx.reshape(n, c, h, w))

    return _node(out_data, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, then affine."""
    m = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - m) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gamma.data
            mean_d = dxhat.mean(axis=-1, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - mean_d - xhat * mean_dx))

    return _node(out_data, (x, gamma, beta), backward)


# -- gradient checking ----------------------------------------------------------------

class GradCheckReport:
    """Outcome of comparing autodiff gradients against central differences."""

    def __init__(self):
        self.max_rel_err = 0.0
        self.worst: tuple | None = None  # (tensor index, flat entry index)
        self.failures: list[str] = []
        self.checked = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
                f"checked={self.checked})")


def grad_check(f: Callable[[list[Tensor]], Tensor], xs: list[Tensor],
               h: float = 1e-5, tol: float = 1e-4,
               max_entries_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    Inputs must be float64 for the comparison to be trustworthy. When
    max_entries_per_tensor is set, a random subset of entries of each input
    is probed (needed for model-sized checks).
    """
    report = GradCheckReport()
    for i, x in enumerate(xs):
        if x.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 inputs; tensor {i} is {x.data.dtype}")
        x.requires_grad = True
        x.zero_grad()
    loss = f(xs)
    if loss.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    loss.backward()
    grads = []
    for i, x in enumerate(xs):
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
        if np.isnan(g).any():
            report.failures.append(f"NaN in autodiff gradient of tensor {i}")
        grads.append(g.copy())
    if rng is None:
        rng = np.random.default_rng(0)
    for i, x in enumerate(xs):
        flat = x.data.reshape(-1)
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            idxs = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            idxs = np.arange(n)
        gflat = grads[i].reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(xs).data)
            flat[j] = orig - h
            fm = float(f(xs).data)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            if np.isnan(num):
                report.failures.append(f"NaN in numeric gradient of tensor {i} entry {j}")
                continue
            a = gflat[j]
            denom = max(abs(a), abs(num))
            err = abs(a - num) if denom < 1e-7 else abs(a - num) / denom
            report.checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (i, int(j))
            if err > tol:
                report.failures.append(
                    f"tensor {i} entry {j}: autodiff {a:.6e} vs numeric {num:.6e} (rel err {err:.3e})"
                )
    return report
