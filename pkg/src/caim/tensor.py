"""Reverse-mode differentiable arrays and the named-parameter store.

A ``Tensor`` wraps one numpy array plus an optional gradient. Operations
build a graph of closures; ``Tensor.backward()`` walks the graph in reverse
topological order and accumulates gradients into every reachable leaf with
``requires_grad`` set. Training runs in float32; gradient verification runs
the same code on float64 arrays.

Gradient accumulation is out-of-place (``t.grad = t.grad + g``) so a closure
may hand the same array to several children without aliasing bugs.

Evaluation of one graph is single-threaded from the caller's view;
independent graphs over distinct parameter stores may run concurrently.
Identical inputs and parameters always reproduce bit-identical outputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import FormatError, ShapeError

DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / metrics)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    # make numpy defer to Tensor.__r*__ instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph -----------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every requires-grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        topo = []
        seen = set()
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
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._backward is not None:
                # interior node: free its gradient as soon as it was consumed
                node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- operators (thin wrappers over the module functions) --------------

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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wire up an output tensor; skips bookkeeping when grads are off."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, _unbroadcast(g * bd, a.data.shape))
        _accum(b, _unbroadcast(g * ad, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, _unbroadcast(g / bd, a.data.shape))
        _accum(b, _unbroadcast(-g * ad / (bd * bd), b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a, p):
    """Elementwise ``a ** p`` for a python-scalar exponent."""
    a = as_tensor(a)
    if not np.isscalar(p):
        raise ShapeError("power() supports scalar exponents only")
    out_data = a.data ** p
    ad = a.data

    def backward(g):
        _accum(a, g * (p * ad ** (p - 1)))

    return _make(out_data, (a,), backward)


def matmul(a, b):
    """Batched matrix product with standard numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            if a.requires_grad:
                _accum(a, np.outer(g, bd) if ad.ndim > 1 else g * bd)
            if b.requires_grad:
                _accum(b, ad.T @ g if ad.ndim > 1 else g * ad)
            return
        if ad.ndim == 1:
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
            if b.requires_grad:
                _accum(b, np.outer(ad, g))
            return
        if ad.ndim > 2 and bd.ndim == 2:
            # stack-times-weight case: collapse the stack into one GEMM
            # instead of looping thousands of tiny batched products
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ bd.T).reshape(ad.shape))
            if b.requires_grad:
                _accum(b, ad.reshape(-1, ad.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(out_data, (a, b), backward)


def texp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def tlog(a):
    a = as_tensor(a)
    out_data = np.log(a.data)
    ad = a.data

    def backward(g):
        _accum(a, g / ad)

    return _make(out_data, (a,), backward)


def tabs(a):
    a = as_tensor(a)
    out_data = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def relu(a):
    """max(0, x), the package-wide nonlinearity."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, np.where(out_data > 0, g, 0.0))

    return _make(out_data, (a,), backward)


def softmax(a, axis):
    """Numerically stable softmax; slices along ``axis`` sum to one."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        _accum(a, (g - dot) * out_data)

    return _make(out_data, (a,), backward)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else int(np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]))
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, shape).astype(a.data.dtype, copy=True))

    return _make(out_data, (a,), backward)


def tmin(a, axis):
    """Minimum along one axis; gradient flows to the earliest minimiser."""
    a = as_tensor(a)
    idx = np.argmin(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, gx)

    return _make(out_data, (a,), backward)


def tmax(a, axis, keepdims=False):
    """Maximum along one axis; gradient flows to the earliest maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out_data = picked if keepdims else picked.squeeze(axis)
    shape = a.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gexp = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gexp, axis=axis)
        _accum(a, gx)

    return _make(out_data, (a,), backward)


# -- structure -------------------------------------------------------------


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(out_data, (a,), backward)


def transpose(a, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def getitem(a, key):
    a = as_tensor(a)
    out_data = a.data[key]
    shape = a.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        _accum(a, gx)

    return _make(out_data, (a,), backward)


def concatenate(parts, axis):
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(out_data, tuple(parts), backward)


def gather_class(probs, labels):
    """Pick ``probs[n, labels[n], ...]`` along axis 1 of an [N,K,...] array."""
    probs = as_tensor(probs)
    lab = np.asarray(labels)
    idx = np.expand_dims(lab, 1)
    out_data = np.take_along_axis(probs.data, idx, axis=1).squeeze(1)
    shape = probs.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, 1), axis=1)
        _accum(probs, gx)

    return _make(out_data, (probs,), backward)


# -- parameter store -------------------------------------------------------

CHECKPOINT_MAGIC = b"CAIMP"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named trainable tensors with deterministic seeded initialization.

    Parameters are created on first request (in model-build order, which is
    deterministic) and reused afterwards, so a fixed seed always yields the
    same initial values.
    """

    def __init__(self, seed=0, dtype=DTYPE):
        self.seed = seed
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.params = {}

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params.keys())

    def n_scalars(self):
        return int(sum(p.data.size for p in self.params.values()))

    def _register(self, name, data):
        if name in self.params:
            raise ShapeError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def param(self, name, shape, init="fan_in", fan_in=None):
        """Fetch or create a parameter.

        ``init``: 'fan_in' draws U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        'zeros' and 'ones' are literal. ``fan_in`` defaults to the product
        of all but the first dimension.
        """
        if name in self.params:
            p = self.params[name]
            if p.data.shape != tuple(shape):
                raise ShapeError(
                    f"parameter {name!r} exists with shape {p.data.shape}, requested {tuple(shape)}")
            return p
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "fan_in":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ShapeError(f"unknown init {init!r}")
        return self._register(name, data)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays):
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=self.dtype)
            if name in self.params:
                if self.params[name].data.shape != arr.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {name!r}")
                self.params[name].data = arr
            else:
                self._register(name, arr)

    # -- checkpoint container (little-endian) -----------------------------

    def save(self, path):
        """Write all parameters: magic, version, count, then per entry
        name (u16 length + utf-8), rank u8, dims u32 each, float32 payload."""
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(self.params)))
            for name, p in self.params.items():
                enc = name.encode("utf-8")
                f.write(struct.pack("<H", len(enc)))
                f.write(enc)
                arr = np.ascontiguousarray(p.data, dtype=np.float32)
                f.write(struct.pack("<B", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                f.write(arr.astype("<f4", copy=False).tobytes())

    @classmethod
    def load(cls, path, seed=0, dtype=DTYPE):
        store = cls(seed=seed, dtype=dtype)
        with open(path, "rb") as f:
            blob = f.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise FormatError("checkpoint truncated")
            piece = blob[off:off + n]
            off += n
            return piece

        if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, count = struct.unpack("<II", take(8))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
            store._register(name, data.astype(dtype))
        if off != len(blob):
            raise FormatError("trailing bytes after checkpoint payload")
        return store
