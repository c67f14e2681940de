"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies the buffers and kernels; this module supplies the tape.
Every op records its parents and an adjoint closure on the output tensor;
``backward()`` on a scalar loss replays the records in reverse topological
order (the tape) and accumulates gradients into every tensor that requires
them. Scalars are float32 by default; build graphs in float64 for
finite-difference checking.

``exact_mode()`` switches matrix products to fixed-loop-order einsum
kernels. BLAS GEMM rounds each output row differently depending on how many
rows sit in the same call, so bitwise claims about decoding query subsets
only hold in exact mode (at roughly 10x the matmul cost).
"""

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_POOL = ThreadPoolExecutor(max_workers=2)


def _elementwise_threads():
    return 1 if os.environ.get("OMP_NUM_THREADS") == "1" else 2


def _erf(x):
    """erf with the work split across two threads for large buffers; the
    split is elementwise so results are bit-identical to a single call."""
    flat = x.reshape(-1)
    if _elementwise_threads() == 1 or flat.size < 200_000:
        return erf(x)
    out = np.empty_like(flat)
    mid = flat.size // 2
    jobs = [
        _POOL.submit(erf, flat[:mid], out[:mid]),
        _POOL.submit(erf, flat[mid:], out[mid:]),
    ]
    for j in jobs:
        j.result()
    return out.reshape(x.shape)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_grad_enabled = True
_exact_matmul = False


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def exact_mode():
    """Bitwise row-stable matrix kernels: each output row is independent of
    which other rows share the call. Slower; use for subset-equality checks."""
    global _exact_matmul
    prev, _exact_matmul = _exact_matmul, True
    try:
        yield
    finally:
        _exact_matmul = prev


class Tensor:
    """n-d array plus optional gradient buffer and tape linkage.

    Data is immutable by convention once created (optimizers mutate
    parameters between graphs, never inside one). ``grad`` accumulates
    across backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=()):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)  # keep reduction-scalar dtype
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else ())
    if req:
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def back(g, out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def back(g, out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def back(g, out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def scale(a, s):
    s = float(s)

    def back(g, out):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), back)


def gelu(a):
    """Exact-erf GELU: x * Phi(x). The derivative Phi(x) + x * pdf(x) is
    assembled in the forward pass so backward is multiply-add only."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    y = x * phi
    deriv = None
    if _grad_enabled and a.requires_grad:
        pdf = np.exp(x * x * -0.5)
        pdf *= _INV_SQRT_2PI
        pdf *= x
        deriv = phi + pdf

    def back(g, out):
        a._accumulate(g * deriv)

    return _make(y.astype(x.dtype, copy=False), (a,), back)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape):
    old = a.data.shape

    def back(g, out):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g, out):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def swap_last2(a):
    perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, perm)


def broadcast_to(a, shape):
    def back(g, out):
        a._accumulate(_unbroadcast(g, a.data.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), back)


def concat(tensors, axis):
    tensors = [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack_last(tensors):
    """Stack equal-shaped tensors along a new trailing axis."""
    shaped = [reshape(t, t.shape + (1,)) for t in tensors]
    return concat(shaped, axis=-1)


# -- gather / scatter ------------------------------------------------------


def take(a, index, axis=0):
    """Select rows by a 1-d index along ``axis`` (embedding lookup, map
    selection). Adjoint is scatter-add (plain assignment when the index has
    no repeats)."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis if axis >= 0 else a.data.ndim + axis
    unique = len(np.unique(index)) == len(index)

    def back(g, out):
        acc = np.zeros_like(a.data)
        where = (slice(None),) * ax + (index,)
        if unique:
            acc[where] = g
        else:
            np.add.at(acc, where, g)
        a._accumulate(acc)

    return _make(np.take(a.data, index, axis=ax), (a,), back)


def gather_tokens(a, index):
    """Per-batch row selection along the token axis: a is (B, T, C), index is
    (B, K) -> (B, K, C). Adjoint is scatter-add."""
    index = np.asarray(index, dtype=np.intp)
    idx3 = np.broadcast_to(index[:, :, None], index.shape + (a.data.shape[2],))
    bsz = a.data.shape[0]

    def back(g, out):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (np.arange(bsz)[:, None], index), g)
        a._accumulate(acc)

    return _make(np.take_along_axis(a.data, idx3, axis=1), (a,), back)


# -- contractions ----------------------------------------------------------


def _einsum_subscripts(na, nb):
    if nb == 2:
        batch = "abcde"[: na - 2]
        return f"{batch}ik,kj->{batch}ij"
    if na == nb:
        batch = "abcde"[: na - 2]
        return f"{batch}ik,{batch}kj->{batch}ij"
    raise ValueError(f"unsupported matmul ranks ({na}, {nb}) in exact mode")


def _mm(x, y):
    if _exact_matmul:
        return np.einsum(_einsum_subscripts(x.ndim, y.ndim), x, y)
    return np.matmul(x, y)


def matmul(a, b):
    """Batched matrix product; batch axes broadcast, inner extents must
    match."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out_data = _mm(a.data, b.data)

    def back(g, out):
        if a.requires_grad:
            ga = _mm(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = _mm(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), back)


# -- reductions ------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    def back(g, out):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype), (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.data.shape[axis]

    def back(g, out):
        if axis is None:
            a._accumulate((np.broadcast_to(g, a.data.shape) / count).astype(a.data.dtype, copy=False))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate((np.broadcast_to(gg, a.data.shape) / count).astype(a.data.dtype, copy=False))

    return _make(a.data.mean(axis=axis, keepdims=keepdims, dtype=a.data.dtype), (a,), back)


def variance(a, axis=-1, keepdims=False):
    """Population variance along one axis, composed from primitives."""
    m = reduce_mean(a, axis, keepdims=True)
    d = sub(a, m)
    return reduce_mean(mul(d, d), axis, keepdims)


# -- normalization / attention primitives ----------------------------------


def softmax_lastdim(a):
    """Row-normalized exponentials with max-subtraction; rows sum to 1."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g, out):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), back)


def layer_norm(a, gain, bias, eps=1e-6):
    """Standardize the last axis, then affine. ``gain``/``bias`` span the
    last extent."""
    x = a.data
    if gain.data.shape != x.shape[-1:] or bias.data.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm gain/bias {gain.data.shape}/{bias.data.shape} do not match last extent of {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.einsum("...i,...i->...", xc, xc)[..., None]
    var /= x.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    y = xhat * gain.data + bias.data

    def back(g, out):
        if gain.requires_grad:
            c = x.shape[-1]
            gain._accumulate(np.einsum("ri,ri->i", g.reshape(-1, c), xhat.reshape(-1, c)))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", gx, xhat)[..., None]
            m2 /= x.shape[-1]
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _make(y.astype(x.dtype, copy=False), (a, gain, bias), back)


# -- backward pass ---------------------------------------------------------


def _build_tape(root):
    """Ordered records of every op reachable from ``root``, consistent with
    forward execution order; each record is replayed exactly once."""
    tape = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return tape


def backward(loss):
    """Accumulate adjoints of a scalar loss into every requires_grad
    ancestor. Repeated calls without zero_grad accumulate."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (built under no_grad or from constants)")
    tape = _build_tape(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)


# -- parameter checkpoint format --------------------------------------------

CHECKPOINT_MAGIC = b"CMAEckpt"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, path):
    """Write named tensors: magic, version u32, then per tensor (name length
    u32, name bytes, rank u32, extents u32 x rank, raw little-endian float32).
    Bit-exact round trip for float32 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint: bad magic at byte 0 ({blob[:8]!r})")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = arr.astype(np.float32)
    return out
