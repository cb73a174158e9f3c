"""Minimal numpy tensor library with reverse-mode gradients.

Only the layers needed by the perception and weighting models are provided:
convolution, batch normalization, rectifier, dense, softmax, KL divergence,
smooth-L1 and focal losses, plus an Adam optimizer over a named parameter
store and a small binary checkpoint format.

All arrays are float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import contextlib
import hashlib
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
KL_FLOOR = 1e-12
FOCAL_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array plus the bookkeeping needed for reverse-mode differentiation.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad``;
    intermediate nodes keep a backward closure returning one gradient per
    parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this node to every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise and structural ops
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    return _node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return _node(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def stop_gradient_add(a: Tensor, offset: np.ndarray) -> Tensor:
    """``a + offset`` where the offset is a constant perturbation (e.g. channel noise)."""
    return _node(a.data + offset, (a,), lambda g: (g,))


# ----------------------------------------------------------------------
# probability ops and losses
# ----------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    a = _as_tensor(a)
    s = _softmax_np(a.data, axis)
    return _node(
        s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def kl_divergence(p, q, axis=None) -> Tensor:
    """KL(p || q) = sum p log(p/q), with 0 log 0 = 0 and q floored at 1e-12.

    With ``axis=None`` the sum runs over every element; otherwise one value
    per slice along the remaining axes is returned.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    qc = np.maximum(q.data, KL_FLOOR)
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1.0))
    terms = np.where(pos, p.data * (logp - np.log(qc)), 0.0)
    out = terms.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        gp = g * np.where(pos, logp - np.log(qc) + 1.0, 0.0)
        gq = g * np.where(q.data >= KL_FLOOR, -p.data / qc, 0.0)
        return gp, gq

    return _node(out, (p, q), backward)


def smooth_l1(x) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = _as_tensor(x)
    ax = np.abs(x.data)
    small = ax < 1.0
    out = np.where(small, 0.5 * x.data**2, ax - 0.5)
    return _node(out, (x,), lambda g: (g * np.where(small, x.data, np.sign(x.data)),))


def focal_loss(q, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise -alpha (1 - q)^gamma log q, q clamped below at 1e-12.

    ``alpha`` may be an array broadcastable to ``q`` (per-anchor balance).
    """
    q = _as_tensor(q)
    qc = np.clip(q.data, FOCAL_FLOOR, 1.0)
    one_m = 1.0 - qc
    logq = np.log(qc)
    out = -alpha * one_m**gamma * logq

    def backward(g):
        if gamma == 0:
            dmod = np.zeros_like(qc)
        else:
            dmod = -gamma * np.where(one_m > 0, one_m ** (gamma - 1), 0.0)
        d = -alpha * (dmod * logq + one_m**gamma / qc)
        d = np.where(q.data >= FOCAL_FLOOR, d, 0.0)
        return (_unbroadcast(g * d, q.shape),)

    return _node(out, (q,), backward)


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input and OIHW weights.

    A 3D input (C, H, W) is treated as a batch of one and the output keeps
    the 3D shape.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with weight shape {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    # im2col: rows are output positions (n, ho, wo), columns are (c, kh, kw)
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ w2.T
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out += b.data
        parents.append(b)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        dcols = (g2 @ w2).reshape(n, ho, wo, kh, kw, c)
        gxt = np.zeros((n, xp.shape[2], xp.shape[3], c))
        for i in range(kh):
            for j in range(kw):
                gxt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
        gxp = gxt.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    res = _node(np.ascontiguousarray(out), parents, backward)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis except channels (axis 1).

    In training mode the running statistics are updated in place.
    """
    if x.shape[1] != gamma.shape[0] or running_mean.shape[0] != x.shape[1]:
        raise ValueError(f"batch_norm: {x.shape[1]} channels but stats for {gamma.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = -1
    m = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


# ----------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ----------------------------------------------------------------------

class ParamStore:
    """Named parameters, non-trainable buffers and Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.zero_grad()
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of parameters and buffers."""
        out = {name: t.data for name, t in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name.startswith("buffer:"):
                key = name[len("buffer:"):]
                if key not in self.buffers:
                    raise KeyError(f"unknown buffer {key!r}")
                self.buffers[key][...] = arr
            else:
                if name not in self.params:
                    raise KeyError(f"unknown parameter {name!r}")
                if self.params[name].shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {name!r}: {self.params[name].shape} vs {arr.shape}"
                    )
                self.params[name].data[...] = arr
        missing = set(self.state()) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks entries: {sorted(missing)}")


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction and L2 weight decay; clears gradients."""
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    for name, t in store.params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if weight_decay:
            g = g + weight_decay * t.data
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.grad = np.zeros_like(t.data)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 stride: int = 1, padding: int = 0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (c_in * k * k))
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (c_out, c_in, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.mean, self.var, training)


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.w = store.add(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out)))
        self.b = store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w, self.b)


class ConvBlock:
    """conv -> batchnorm -> relu"""

    def __init__(self, store, name, c_in, c_out, stride, rng):
        self.conv = Conv2d(store, f"{name}.conv", c_in, c_out, 3, stride, 1, rng)
        self.bn = BatchNorm(store, f"{name}.bn", c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))


# Checkpoint layout (all integers little-endian):
#   magic b"CWCK", u32 version, u32 entry count, then per entry:
#   u16 name length, utf-8 name, u8 ndim, ndim x u32 extents,
#   prod(extents) x float32 values in row-major order.
CKPT_MAGIC = b"CWCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name])
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out


def round_to_float32(store: ParamStore) -> None:
    """Snap parameters and buffers to float32 precision (what a checkpoint keeps)."""
    for arr in store.state().values():
        arr[...] = arr.astype(np.float32)

