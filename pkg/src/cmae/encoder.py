"""Patch extraction, 2-d sin/cos position tables, and the visible-token ViT
encoder.

Only visible patches enter the encoder; compute scales with the visible
count, not the grid size. Every intermediate feature map (the patch-embed
output feeding block 1, then each block output) is retained so the decoder
can fuse across depths.
"""

from dataclasses import dataclass, field

import numpy as np

from . import layers, seeding
from . import tensor as T


def patchify(images, patch_size):
    """(..., H, W, C) -> (..., H*W/ps^2, ps*ps*C), row-major patch order.
    Exact inverse is unpatchify."""
    images = np.asarray(images)
    *lead, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, c)
    x = np.moveaxis(x, -3, -4)  # (..., gh, gw, ps, ps, c)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def unpatchify(patches, patch_size, height, width, channels=3):
    """Inverse of patchify; bit-exact."""
    patches = np.asarray(patches)
    *lead, n, pd = patches.shape
    gh, gw = height // patch_size, width // patch_size
    if n != gh * gw or pd != patch_size * patch_size * channels:
        raise ValueError(f"patch array {patches.shape} does not match {height}x{width}/{patch_size}")
    x = patches.reshape(*lead, gh, gw, patch_size, patch_size, channels)
    x = np.moveaxis(x, -4, -3)  # (..., gh, ps, gw, ps, c)
    return x.reshape(*lead, height, width, channels)


def _sincos_1d(positions, dim):
    # half the channels sin, half cos, geometric frequency ladder
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    args = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def pos_embed_2d(grid_h, grid_w, dim):
    """Fixed (non-learned) table, one row per grid cell in row-major order.
    The first dim/2 channels encode the row index, the last dim/2 the
    column index, so bands translate independently per axis."""
    if dim % 4:
        raise ValueError(f"pos_embed_2d dim must be divisible by 4, got {dim}")
    ii, jj = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    emb_h = _sincos_1d(ii.reshape(-1), dim // 2)
    emb_w = _sincos_1d(jj.reshape(-1), dim // 2)
    return np.concatenate([emb_h, emb_w], axis=1)


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    enc_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3
    # MAE keeps a final LN before its decoder; the cross path norms after
    # fusion instead. None resolves by decoder variant at model build time.
    post_norm: bool | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_dim % self.heads:
            raise ValueError(f"enc_dim {self.enc_dim} not divisible by heads {self.heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_chans


@dataclass
class EncoderFeatures:
    """maps[0] is the input to block 1 (patch embed + positions + cls row);
    maps[j] is block j's output. All maps are (B, 1 + visible, enc_dim)."""

    maps: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.maps) - 1

    @property
    def last(self):
        return self.maps[-1]


class ViTEncoder:
    def __init__(self, cfg: EncoderConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = seeding.generator(seed, seeding.INIT, 0)
        self.patch_embed = layers.Linear(rng, cfg.patch_dim, cfg.enc_dim, dtype)
        self.cls_token = layers.param(rng, (1, 1, cfg.enc_dim), dtype=dtype)
        # class token carries a zero positional embedding by convention
        self.pos_table = pos_embed_2d(cfg.grid, cfg.grid, cfg.enc_dim).astype(dtype)
        self.blocks = [layers.EncoderBlock(rng, cfg.enc_dim, cfg.heads, cfg.mlp_ratio, dtype) for _ in range(cfg.depth)]
        self.ln_final = layers.LayerNorm(cfg.enc_dim, dtype) if cfg.post_norm else None  # None counts as False here

    def named(self, prefix="encoder"):
        out = {}
        out.update(self.patch_embed.named(f"{prefix}.patch_embed"))
        out[f"{prefix}.cls_token"] = self.cls_token
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blocks.{i}"))
        if self.ln_final is not None:
            out.update(self.ln_final.named(f"{prefix}.ln_final"))
        return out

    def encode(self, images, plans=None):
        """Embed only the visible patches (all patches when plans is None),
        prepend the class token, run every block, and keep all depth+1 maps."""
        cfg = self.cfg
        patches = patchify(np.asarray(images, dtype=self.dtype), cfg.patch_size)
        if patches.shape[-2] != cfg.num_patches:
            raise ValueError(f"images yield {patches.shape[-2]} patches, config expects {cfg.num_patches}")
        bsz = patches.shape[0]
        if plans is not None:
            if len(plans) != bsz:
                raise ValueError(f"{len(plans)} plans for batch of {bsz}")
            if plans[0].num_tokens != cfg.num_patches:
                raise ValueError(f"plan has {plans[0].num_tokens} tokens, config expects {cfg.num_patches}")
            vis = np.stack([p.visible_idx for p in plans], axis=0)  # (B, V)
            patches = np.take_along_axis(patches, vis[:, :, None], axis=1)
            pos = self.pos_table[vis]  # (B, V, enc)
        else:
            pos = np.broadcast_to(self.pos_table[None], (bsz,) + self.pos_table.shape)
        x = self.patch_embed(T.Tensor(patches)) + T.Tensor(pos.astype(self.dtype))
        cls = T.broadcast_to(self.cls_token, (bsz, 1, cfg.enc_dim))
        x = T.concat([cls, x], axis=1)
        maps = [x]
        for blk in self.blocks:
            x = blk(x)
            maps.append(x)
        if self.ln_final is not None:
            maps[-1] = self.ln_final(maps[-1])
        return EncoderFeatures(maps)
