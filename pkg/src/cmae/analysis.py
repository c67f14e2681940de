"""Measurement instruments: attention-group statistics, per-block
reconstruction decomposition, fusion-weight maps, and the analytical
FLOP model.

FLOP convention, echoed in every report: one multiply-add counts as 2
FLOPs; attention projections and attention matrices are counted, softmax
and layer norms are not (dominant-term accounting). For an attention block
with Lq query rows, Lkv key rows, width d and MLP ratio r:

    projections   2 * (Lq + 2*Lkv + Lq) * d^2
    attn matrices 2 * 2 * Lq * Lkv * d
    mlp           2 * 2 * Lq * d * (r * d)

The self baseline runs Lq = Lkv = 1 + N; the cross decoder runs
Lq = floor(gamma * N), Lkv = 1 + visible. Inter-block fusion adds
2 * k * depth * Lkv * d. Projections are charged at the block width
(kv adapters that cross widths are charged the same way, plus the
baseline's explicit encoder-to-decoder embed).
"""

from dataclasses import dataclass, field

import numpy as np

from . import masking, objective
from . import tensor as T
from .decoders import CrossDecoder, SelfDecoder, select_fused_maps
from .encoder import unpatchify

# -- attention-group statistics ---------------------------------------------


@dataclass
class AttentionStats:
    mean_mask_to_mask: float
    mean_mask_to_visible: float
    normalization: str  # per_pair | per_pair_times_seqlen
    images_seen: int


def attention_group_means(attn_map, mask_vec):
    """Per-pair group means of one (L, L) attention map. mask_vec has length
    L with 1 on masked rows/columns; the class token and visible patches
    form the visible group."""
    m = np.asarray(mask_vec, dtype=bool)
    n_mask = int(m.sum())
    n_vis = int((~m).sum())
    rows = attn_map[m]
    to_mask = rows[:, m].sum() / (n_mask * n_mask)
    to_visible = rows[:, ~m].sum() / (n_mask * n_vis)
    return to_mask, to_visible


def attention_stats(model, images, p, seed, batch_size=32):
    """Group attention mass in the self-attention decoder: one random mask
    per image, every decoder layer and head recorded, per-pair means
    averaged over maps and heads, then over images. Returns both
    normalizations (the second multiplies by sequence length so uniform
    attention reads as 1)."""
    if not isinstance(model.decoder, SelfDecoder):
        raise ValueError("attention statistics require the self-attention decoder variant (cross decoders have no mask-to-mask attention)")
    n = model.enc_cfg.num_patches
    per_image_mask, per_image_vis = [], []
    images = np.asarray(images)
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        plans = [
            masking.make_mask_plan(n, p, p, seed=int(1 + start + j + seed * 1_000_003))
            for j in range(len(batch))
        ]
        record = []
        with T.no_grad():
            feats = model.encoder.encode(batch, plans)
            model.decoder.decode(feats, plans, record=record)
        # record: depth maps of (B, heads, L, L)
        for j, plan in enumerate(plans):
            mask_vec = np.concatenate([[0], plan.mask_vector()])  # class token is visible
            vals = [
                attention_group_means(layer[j, h], mask_vec)
                for layer in record
                for h in range(layer.shape[1])
            ]
            per_image_mask.append(np.mean([v[0] for v in vals]))
            per_image_vis.append(np.mean([v[1] for v in vals]))
    mm = float(np.mean(per_image_mask))
    mv = float(np.mean(per_image_vis))
    seqlen = 1 + n
    return {
        "per_pair": AttentionStats(mm, mv, "per_pair", len(images)),
        "per_pair_times_seqlen": AttentionStats(mm * seqlen, mv * seqlen, "per_pair_times_seqlen", len(images)),
    }


# -- per-block reconstruction decomposition ---------------------------------


@dataclass
class ReconstructionStack:
    """Additive image decomposition: base + sum(contributions) == total to
    float precision. The head's layer-norm statistics are frozen at the
    final decoder features, which makes it affine and the split exact; the
    affine constant (positions + mask token + biases) lives in base."""

    base: np.ndarray  # (H, W, C)
    contributions: list  # depth arrays, (H, W, C) each
    total: np.ndarray  # (H, W, C)
    predicted_idx: np.ndarray
    identity_error: float  # max |base + sum - total|
    surrogate_gap: float  # max |head(f0) - frozen-stats head(f0)|, LN nonlinearity scale

    def levels(self):
        yield "base", self.base
        for i, c in enumerate(self.contributions):
            yield f"block{i + 1}", c


def _frozen_head_terms(model, trace):
    """Split the reconstruction head into a linear map plus constant using
    LN statistics frozen at the final features. Returns (linear_fn, const)
    operating on float64 copies."""
    head = model.decoder.head
    gain = head.norm.gain.data.astype(np.float64)
    bias = head.norm.bias.data.astype(np.float64)
    w = head.proj.w.data.astype(np.float64)
    b = head.proj.b.data.astype(np.float64)
    final = trace["final"][0].astype(np.float64)
    mu = final.mean(axis=-1, keepdims=True)
    var = ((final - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + head.norm.eps)

    def linear(x):
        return ((x * inv) * gain) @ w

    const = ((bias - gain * mu * inv) @ w) + b
    return linear, const


def per_block_decomposition(model, image, plan):
    """Decompose one reconstruction into the head applied to the query
    input (base: positions + mask token) plus the head applied to each
    block's residual contribution, denormalized to pixel space."""
    image = np.asarray(image)
    trace = {}
    with T.no_grad():
        recon_rows, row_stats = model.reconstruct(image[None], [plan], trace=trace)
    linear, const = _frozen_head_terms(model, trace)
    sd = row_stats.std[0].astype(np.float64)
    mean = row_stats.mean[0].astype(np.float64)

    def to_image(rows, add_mean):
        full = np.zeros((model.enc_cfg.num_patches, model.enc_cfg.patch_dim))
        full[plan.predicted_idx] = rows * sd + (mean if add_mean else 0.0)
        return unpatchify(full, model.enc_cfg.patch_size, model.enc_cfg.image_size, model.enc_cfg.image_size, model.enc_cfg.in_chans)

    f0 = trace["f0"][0].astype(np.float64)
    base_rows = linear(f0) + const
    contrib_rows = [
        linear(blk_out[0].astype(np.float64) - blk_in[0].astype(np.float64))
        for blk_in, blk_out in trace["blocks"]
    ]
    if isinstance(model.decoder, SelfDecoder):
        pick = 1 + plan.predicted_idx  # head rows cover class + all patches
        base_rows = base_rows[pick]
        contrib_rows = [c[pick] for c in contrib_rows]
    base = to_image(base_rows, add_mean=True)
    contributions = [to_image(c, add_mean=False) for c in contrib_rows]
    total_img = np.zeros((model.enc_cfg.num_patches, model.enc_cfg.patch_dim))
    total_img[plan.predicted_idx] = recon_rows[0].astype(np.float64)
    total_img = unpatchify(total_img, model.enc_cfg.patch_size, model.enc_cfg.image_size, model.enc_cfg.image_size, model.enc_cfg.in_chans)
    stack_sum = base + sum(contributions) if contributions else base
    identity_error = float(np.abs(stack_sum - total_img).max())
    with T.no_grad():
        live_head = model.decoder.head(T.Tensor(trace["f0"])).data[0].astype(np.float64)
    if isinstance(model.decoder, SelfDecoder):
        live_head = live_head[pick]
    surrogate_gap = float(np.abs(live_head - base_rows).max())
    return ReconstructionStack(
        base=base,
        contributions=contributions,
        total=total_img,
        predicted_idx=plan.predicted_idx.copy(),
        identity_error=identity_error,
        surrogate_gap=surrogate_gap,
    )


def highpass_energy_profile(stack):
    """Share of each level's energy above the patch-scale mean (a 3x3
    Laplacian response); rising shares over blocks indicate detail arriving
    late in the decoder."""
    shares = []
    for _, img in stack.levels():
        g = img.mean(axis=2)
        lap = (
            -4 * g[1:-1, 1:-1]
            + g[:-2, 1:-1]
            + g[2:, 1:-1]
            + g[1:-1, :-2]
            + g[1:-1, 2:]
        )
        total = float((g**2).sum())
        shares.append(float((lap**2).sum()) / total if total > 0 else 0.0)
    return np.array(shares)


def overlay_reconstruction(image, recon_rows, plan, patch_size):
    """Fig-2 style composition: visible patches from the input, predicted
    patches from the model, remaining masked patches mid-gray."""
    from .encoder import patchify

    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    patches = patchify(image, patch_size)
    out = np.full_like(patches, 0.5)
    out[plan.visible_idx] = patches[plan.visible_idx]
    out[plan.predicted_idx] = np.clip(recon_rows, 0.0, 1.0)
    return unpatchify(out, patch_size, h, w, c)


def masked_view(image, plan, patch_size):
    """Input with masked patches grayed out."""
    from .encoder import patchify

    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    patches = patchify(image, patch_size)
    patches = patches.copy()
    patches[plan.masked_idx] = 0.5
    return unpatchify(patches, patch_size, h, w, c)


# -- inter-block weight maps -------------------------------------------------


def interblock_weight_map(weights, row_normalized=False):
    """(depth, k) magnitude matrix of the fusion weights; rejects the
    single-map configuration (nothing to visualize)."""
    w = weights.data if isinstance(weights, T.Tensor) else np.asarray(weights)
    if w.ndim != 2 or w.shape[1] <= 1:
        raise ValueError("weight map needs k > 1 fused maps")
    mag = np.abs(w).astype(np.float64)
    if row_normalized:
        mag = mag / mag.sum(axis=1, keepdims=True)
    return mag


def fusion_mass_centers(weights):
    """Per decoder block, the |weight|-mass center over encoder map index;
    decreasing centers mean later decoder blocks lean on earlier encoder
    features."""
    mag = interblock_weight_map(weights, row_normalized=True)
    positions = np.arange(mag.shape[1], dtype=np.float64)
    return mag @ positions


def fusion_trend_sign(weights):
    """Sign of the rank correlation between decoder block index and fusion
    mass center (negative reproduces the trained-model trend)."""
    centers = fusion_mass_centers(weights)
    d = np.arange(len(centers), dtype=np.float64)
    cd = d - d.mean()
    cc = centers - centers.mean()
    denom = np.sqrt((cd**2).sum() * (cc**2).sum())
    return float((cd * cc).sum() / denom) if denom > 0 else 0.0


# -- analytical FLOP model ---------------------------------------------------


@dataclass
class FlopsReport:
    encoder: int
    decoder_attention: int
    decoder_mlp: int
    head: int
    interblock_fusion: int
    config: dict = field(default_factory=dict)
    convention: str = "2 FLOPs per multiply-add; projections + attention matrices + MLP; softmax/LN ignored"

    @property
    def decoder_total(self):
        return self.decoder_attention + self.decoder_mlp + self.head + self.interblock_fusion

    @property
    def total(self):
        return self.encoder + self.decoder_total

    def rows(self):
        return [
            ("encoder", self.encoder),
            ("decoder_attention", self.decoder_attention),
            ("decoder_mlp", self.decoder_mlp),
            ("head", self.head),
            ("interblock_fusion", self.interblock_fusion),
            ("decoder_total", self.decoder_total),
            ("total", self.total),
        ]


def attention_block_flops(lq, lkv, d, mlp_ratio):
    proj = 2 * (lq + 2 * lkv + lq) * d * d
    attn = 2 * 2 * lq * lkv * d
    mlp = 2 * 2 * lq * d * int(mlp_ratio * d)
    return proj + attn, mlp


def count_flops(enc_cfg, dec_cfg, p, gamma):
    """Analytical multiply-add accounting for one image forward pass."""
    n = enc_cfg.num_patches
    n_visible = n - int(np.floor(p * n))
    n_pred = int(np.floor(gamma * n))
    if not (0.0 < gamma <= p):
        raise ValueError(f"need 0 < gamma <= p, got gamma={gamma}, p={p}")

    l_enc = 1 + n_visible
    enc_attn, enc_mlp = attention_block_flops(l_enc, l_enc, enc_cfg.enc_dim, enc_cfg.mlp_ratio)
    encoder = enc_cfg.depth * (enc_attn + enc_mlp)
    encoder += 2 * n_visible * enc_cfg.patch_dim * enc_cfg.enc_dim  # patch embed

    d = dec_cfg.dec_dim
    if dec_cfg.variant == "self_attn":
        lq = lkv = 1 + n
        attn, mlp = attention_block_flops(lq, lkv, d, dec_cfg.mlp_ratio)
        dec_attn = dec_cfg.depth * attn
        dec_attn += 2 * (1 + n_visible) * enc_cfg.enc_dim * d  # encoder-to-decoder embed
        dec_mlp = dec_cfg.depth * mlp
        fusion = 0
        head_rows = 1 + n
    else:
        lq, lkv = n_pred, 1 + n_visible
        attn, mlp = attention_block_flops(lq, lkv, d, dec_cfg.mlp_ratio)
        dec_attn = dec_cfg.depth * attn
        dec_mlp = dec_cfg.depth * mlp
        if dec_cfg.variant == "cross_plus_self":
            self_proj = 2 * 4 * lq * d * d + 2 * 2 * lq * lq * d
            dec_attn += dec_cfg.depth * self_proj
        k = dec_cfg.fused_maps if dec_cfg.fused_maps is not None else enc_cfg.depth + 1
        fusion = 2 * k * dec_cfg.depth * lkv * d if k > 1 else 0
        head_rows = lq
    head = 2 * head_rows * d * enc_cfg.patch_dim
    return FlopsReport(
        encoder=encoder,
        decoder_attention=dec_attn,
        decoder_mlp=dec_mlp,
        head=head,
        interblock_fusion=fusion,
        config={
            "variant": dec_cfg.variant,
            "N": n,
            "visible": n_visible,
            "predicted": n_pred,
            "enc_dim": enc_cfg.enc_dim,
            "enc_depth": enc_cfg.depth,
            "dec_dim": d,
            "dec_depth": dec_cfg.depth,
            "p": p,
            "gamma": gamma,
        },
    )


# -- partial-loss statistics --------------------------------------------------


def partial_loss_stats(error_field, n, p, gammas, draws, seed, sampling="iid"):
    """Mean/variance of the partial loss over random predicted subsets of a
    frozen per-token error field.

    sampling='plan' draws real mask plans (subsets without replacement,
    so variances carry a finite-population correction); sampling='iid'
    draws token errors with replacement, the regime in which the loss
    variance scales exactly as 1/|predicted|."""
    error_field = np.asarray(error_field, dtype=np.float64)
    full_plan = masking.make_mask_plan(n, p, p, seed)
    full_loss = float(error_field[full_plan.masked_idx].mean())
    rng = np.random.default_rng(np.random.Philox(key=seed))
    out = {}
    masked_errors = error_field[full_plan.masked_idx]
    for gamma in gammas:
        k = int(np.floor(gamma * n))
        if sampling == "iid":
            picks = rng.integers(0, len(masked_errors), size=(draws, k))
            means = masked_errors[picks].mean(axis=1)
        else:
            means = np.empty(draws)
            for i in range(draws):
                sub = rng.permutation(len(masked_errors))[:k]
                means[i] = masked_errors[sub].mean()
        out[gamma] = {"mean": float(means.mean()), "var": float(means.var()), "k": k}
    return {"full_loss": full_loss, "per_gamma": out, "sampling": sampling}
