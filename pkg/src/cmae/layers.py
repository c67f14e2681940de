"""Transformer building blocks on the autodiff tensors.

Layers hold named parameter tensors; models collect them into flat
name -> Tensor dicts for the optimizer and the checkpoint writer.
Initialization is truncated normal (std 0.02, clipped at 2 std) for
weights, zeros for biases, ones for norm gains.
"""

import numpy as np

from . import tensor as T


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until within 2 std (timm-style init)."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x.astype(dtype)


def param(rng, shape, std=0.02, dtype=np.float32):
    return T.Tensor(trunc_normal(rng, shape, std, dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, dtype=np.float32, std=0.02):
        self.w = param(rng, (d_in, d_out), std, dtype)
        self.b = zeros_param((d_out,), dtype)

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, eps=1e-6):
        self.gain = ones_param((dim,), dtype)
        self.bias = zeros_param((dim,), dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class Mlp:
    def __init__(self, rng, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))

    def named(self, prefix):
        return {**self.fc1.named(f"{prefix}.fc1"), **self.fc2.named(f"{prefix}.fc2")}


def _split_heads(x, heads):
    # (B, L, d) -> (B, heads, L, d/heads)
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _attend(q, k, v, scale, record=None):
    scores = T.matmul(q, T.swap_last2(k)) * scale
    attn = T.softmax_lastdim(scores)
    if record is not None:
        record.append(attn.data)
    return T.matmul(attn, v)


class SelfAttention:
    def __init__(self, rng, dim, heads, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim, dtype)
        self.out = Linear(rng, dim, dim, dtype)

    def __call__(self, x, record=None):
        b, l, d = x.shape
        qkv = T.reshape(self.qkv(x), (b, l, 3, d))
        q = _split_heads(T.reshape(T.take(qkv, [0], axis=2), (b, l, d)), self.heads)
        k = _split_heads(T.reshape(T.take(qkv, [1], axis=2), (b, l, d)), self.heads)
        v = _split_heads(T.reshape(T.take(qkv, [2], axis=2), (b, l, d)), self.heads)
        return self.out(_merge_heads(_attend(q, k, v, self.scale, record)))

    def named(self, prefix):
        return {**self.qkv.named(f"{prefix}.qkv"), **self.out.named(f"{prefix}.out")}


class CrossAttention:
    """Multi-head attention whose queries live in the decoder width and
    whose key/value projections map encoder width to decoder width."""

    def __init__(self, rng, q_dim, kv_dim, heads, dtype=np.float32):
        if q_dim % heads:
            raise ValueError(f"q_dim {q_dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (q_dim // heads) ** -0.5
        self.wq = Linear(rng, q_dim, q_dim, dtype)
        self.wk = Linear(rng, kv_dim, q_dim, dtype)
        self.wv = Linear(rng, kv_dim, q_dim, dtype)
        self.out = Linear(rng, q_dim, q_dim, dtype)

    def __call__(self, q, kv, record=None):
        qh = _split_heads(self.wq(q), self.heads)
        kh = _split_heads(self.wk(kv), self.heads)
        vh = _split_heads(self.wv(kv), self.heads)
        return self.out(_merge_heads(_attend(qh, kh, vh, self.scale, record)))

    def named(self, prefix):
        return {
            **self.wq.named(f"{prefix}.wq"),
            **self.wk.named(f"{prefix}.wk"),
            **self.wv.named(f"{prefix}.wv"),
            **self.out.named(f"{prefix}.out"),
        }


class EncoderBlock:
    """Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, rng, dim, heads, mlp_ratio, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(rng, dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dtype)

    def __call__(self, x, record=None):
        x = x + self.attn(self.ln1(x), record)
        return x + self.mlp(self.ln2(x))

    def named(self, prefix):
        return {
            **self.ln1.named(f"{prefix}.ln1"),
            **self.attn.named(f"{prefix}.attn"),
            **self.ln2.named(f"{prefix}.ln2"),
            **self.mlp.named(f"{prefix}.mlp"),
        }


class CrossBlock:
    """Pre-norm cross-attention block; queries never attend to each other,
    so rows stay independent."""

    def __init__(self, rng, q_dim, kv_dim, heads, mlp_ratio, dtype=np.float32):
        self.ln_q = LayerNorm(q_dim, dtype)
        self.attn = CrossAttention(rng, q_dim, kv_dim, heads, dtype)
        self.ln2 = LayerNorm(q_dim, dtype)
        self.mlp = Mlp(rng, q_dim, int(q_dim * mlp_ratio), dtype)

    def __call__(self, q, kv, record=None):
        q = q + self.attn(self.ln_q(q), kv, record)
        return q + self.mlp(self.ln2(q))

    def named(self, prefix):
        return {
            **self.ln_q.named(f"{prefix}.ln_q"),
            **self.attn.named(f"{prefix}.attn"),
            **self.ln2.named(f"{prefix}.ln2"),
            **self.mlp.named(f"{prefix}.mlp"),
        }


class CrossSelfBlock:
    """Ablation block: full (non-causal) self-attention among the queries
    with a residual, then the regular cross-attention block."""

    def __init__(self, rng, q_dim, kv_dim, heads, mlp_ratio, dtype=np.float32):
        self.ln_sa = LayerNorm(q_dim, dtype)
        self.self_attn = SelfAttention(rng, q_dim, heads, dtype)
        self.cross = CrossBlock(rng, q_dim, kv_dim, heads, mlp_ratio, dtype)

    def __call__(self, q, kv, record=None):
        q = q + self.self_attn(self.ln_sa(q))
        return self.cross(q, kv, record)

    def named(self, prefix):
        return {
            **self.ln_sa.named(f"{prefix}.ln_sa"),
            **self.self_attn.named(f"{prefix}.self_attn"),
            **self.cross.named(f"{prefix}.cross"),
        }
