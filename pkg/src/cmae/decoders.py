"""Decoder variants: self-attention baseline, cross-attention with partial
reconstruction, and the cross+self ablation, plus inter-block fusion and
the reconstruction head.

The cross decoder queries are mask token + positions of the predicted
patches only. Keys/values are fused encoder maps: one bias-free (depth x
maps) weight matrix applied across the stacked maps, layer norm after the
fusion only. Nothing on the query path mixes rows, so each predicted
token's output is independent of which other tokens are being decoded.
"""

from dataclasses import dataclass, field

import numpy as np

from . import layers, seeding
from . import tensor as T
from .encoder import pos_embed_2d

VARIANTS = ("self_attn", "cross_attn", "cross_plus_self")


@dataclass
class DecoderConfig:
    variant: str = "cross_attn"
    dec_dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    fused_maps: int | None = None  # None: all encoder maps incl. patch-embed input

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown decoder variant {self.variant!r}, expected one of {VARIANTS}")
        if self.dec_dim % self.heads:
            raise ValueError(f"dec_dim {self.dec_dim} not divisible by heads {self.heads}")


def select_fused_maps(encoder_depth, k):
    """Indices into the depth+1 encoder maps: k=1 takes the last map only;
    otherwise the patch-embed input (0) and the last map (depth) are always
    included with the rest uniformly spaced by block index."""
    n_maps = encoder_depth + 1
    if not 1 <= k <= n_maps:
        raise ValueError(f"fused_maps must lie in [1, {n_maps}], got {k}")
    if k == 1:
        return [encoder_depth]
    return [int(np.floor(encoder_depth * i / (k - 1) + 0.5)) for i in range(k)]


def init_interblock_weights(rng, depth, k, dtype=np.float32):
    """(depth, k) fusion weights, i.i.d. normal with std 1/sqrt(k), no bias."""
    w = rng.normal(0.0, 1.0 / np.sqrt(k), size=(depth, k))
    return T.Tensor(w.astype(dtype), requires_grad=True)


def interblock_fuse(features, weights, selection, norm, depth=None):
    """Per decoder block d: LN(sum_j W[d, j] * maps[selection[j]]). With a
    single selected map the weights are bypassed and every block reads
    LN(last map). Returns one key/value map per decoder block."""
    if len(selection) == 1:
        if depth is None:
            depth = 1 if weights is None else weights.shape[0]
        return [norm(features.maps[selection[0]])] * depth
    if weights is None or weights.shape[1] != len(selection):
        have = None if weights is None else weights.shape
        raise ValueError(f"fusion weights {have} do not match selection of {len(selection)} maps")
    stacked = T.stack_last([features.maps[j] for j in selection])  # (B, L, C, k)
    mixed = T.matmul(stacked, T.swap_last2(weights))  # (B, L, C, D)
    out = []
    for d in range(weights.shape[0]):
        m = T.reshape(T.take(mixed, [d], axis=-1), mixed.shape[:-1])
        out.append(norm(m))
    return out


class ReconstructionHead:
    """Layer norm followed by a linear map to patch pixels."""

    def __init__(self, rng, dec_dim, patch_dim, dtype=np.float32):
        self.norm = layers.LayerNorm(dec_dim, dtype)
        self.proj = layers.Linear(rng, dec_dim, patch_dim, dtype)

    def __call__(self, x):
        return self.proj(self.norm(x))

    def named(self, prefix):
        return {**self.norm.named(f"{prefix}.norm"), **self.proj.named(f"{prefix}.proj")}


class _DecoderBase:
    def __init__(self, enc_cfg, cfg: DecoderConfig, seed, dtype):
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.dtype = dtype
        self.rng = seeding.generator(seed, seeding.INIT, 1)
        self.mask_token = layers.param(self.rng, (1, 1, cfg.dec_dim), dtype=dtype)
        self.pos_table = pos_embed_2d(enc_cfg.grid, enc_cfg.grid, cfg.dec_dim).astype(dtype)
        self.head = ReconstructionHead(self.rng, cfg.dec_dim, enc_cfg.patch_dim, dtype)

    def _queries(self, plans, index_field="predicted_idx"):
        idx = np.stack([getattr(p, index_field) for p in plans], axis=0)
        if idx.shape[1] == 0:
            raise ValueError("empty predicted set: nothing to decode")
        pos = self.pos_table[idx].astype(self.dtype)  # (B, P, dec)
        tok = T.broadcast_to(self.mask_token, (idx.shape[0], idx.shape[1], self.cfg.dec_dim))
        return tok + T.Tensor(pos)


class CrossDecoder(_DecoderBase):
    """Queries attend to fused encoder maps only; no query-query attention
    anywhere, so decoding a subset of tokens equals decoding them all."""

    def __init__(self, enc_cfg, cfg, seed=0, dtype=np.float32):
        super().__init__(enc_cfg, cfg, seed, dtype)
        k = cfg.fused_maps if cfg.fused_maps is not None else enc_cfg.depth + 1
        self.selection = select_fused_maps(enc_cfg.depth, k)
        self.fuse_norm = layers.LayerNorm(enc_cfg.enc_dim, dtype)
        self.fuse_weights = init_interblock_weights(self.rng, cfg.depth, k, dtype) if k > 1 else None
        block = layers.CrossSelfBlock if cfg.variant == "cross_plus_self" else layers.CrossBlock
        self.blocks = [
            block(self.rng, cfg.dec_dim, enc_cfg.enc_dim, cfg.heads, cfg.mlp_ratio, dtype) for _ in range(cfg.depth)
        ]

    def named(self, prefix="decoder"):
        out = {f"{prefix}.mask_token": self.mask_token}
        if self.fuse_weights is not None:
            out[f"{prefix}.fuse_weights"] = self.fuse_weights
        out.update(self.fuse_norm.named(f"{prefix}.fuse_norm"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blocks.{i}"))
        out.update(self.head.named(f"{prefix}.head"))
        return out

    def decode(self, features, plans, trace=None, record=None):
        """Reconstruct the predicted patches: (B, |predicted|, patch_dim),
        rows aligned with predicted_idx order."""
        kv = interblock_fuse(features, self.fuse_weights, self.selection, self.fuse_norm, depth=self.cfg.depth)
        q = self._queries(plans)
        if trace is not None:
            trace["f0"] = q.data
            trace["blocks"] = []
        for d, blk in enumerate(self.blocks):
            q_out = blk(q, kv[d], record)
            if trace is not None:
                trace["blocks"].append((q.data, q_out.data))
            q = q_out
        if trace is not None:
            trace["final"] = q.data
        return self.head(q)


class SelfDecoder(_DecoderBase):
    """MAE-style baseline: the full token sequence (class + visible features
    + mask tokens, all with positions) through self-attention blocks."""

    def __init__(self, enc_cfg, cfg, seed=0, dtype=np.float32):
        super().__init__(enc_cfg, cfg, seed, dtype)
        self.embed = layers.Linear(self.rng, enc_cfg.enc_dim, cfg.dec_dim, dtype)
        self.blocks = [
            layers.EncoderBlock(self.rng, cfg.dec_dim, cfg.heads, cfg.mlp_ratio, dtype) for _ in range(cfg.depth)
        ]

    def named(self, prefix="decoder"):
        out = {f"{prefix}.mask_token": self.mask_token}
        out.update(self.embed.named(f"{prefix}.embed"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blocks.{i}"))
        out.update(self.head.named(f"{prefix}.head"))
        return out

    def decode(self, features, plans, trace=None, record=None):
        """Reconstruct every patch position: (B, N, patch_dim). The loss
        selects masked rows downstream."""
        x = self.embed(features.last)  # (B, 1+V, dec)
        bsz = x.shape[0]
        n = self.enc_cfg.num_patches
        n_masked = plans[0].num_masked
        cls = T.take(x, [0], axis=1)
        vis_feat = T.take(x, list(range(1, x.shape[1])), axis=1)
        mask_tok = T.broadcast_to(self.mask_token, (bsz, n_masked, self.cfg.dec_dim))
        shuffled = T.concat([vis_feat, mask_tok], axis=1)  # visible order then masked order
        order = np.stack([np.concatenate([p.visible_idx, p.masked_idx]) for p in plans], axis=0)
        inverse = np.argsort(order, axis=1)
        tokens = T.gather_tokens(shuffled, inverse)  # original patch order
        tokens = tokens + T.Tensor(np.broadcast_to(self.pos_table[None], (bsz, n, self.cfg.dec_dim)).astype(self.dtype))
        seq = T.concat([cls, tokens], axis=1)
        if trace is not None:
            trace["f0"] = seq.data
            trace["blocks"] = []
        for blk in self.blocks:
            out = blk(seq, record)
            if trace is not None:
                trace["blocks"].append((seq.data, out.data))
            seq = out
        if trace is not None:
            trace["final"] = seq.data
        pred = self.head(seq)
        return T.take(pred, list(range(1, n + 1)), axis=1)


def build_decoder(enc_cfg, cfg, seed=0, dtype=np.float32):
    if cfg.variant == "self_attn":
        return SelfDecoder(enc_cfg, cfg, seed, dtype)
    return CrossDecoder(enc_cfg, cfg, seed, dtype)
