"""End-to-end models: masked-autoencoder pretrainer and the probe/finetune
classifier."""

import numpy as np

from . import layers, masking, objective, seeding
from . import tensor as T
from .decoders import DecoderConfig, build_decoder
from .encoder import EncoderConfig, ViTEncoder, patchify


class MaskedAutoencoder:
    """Encoder plus one decoder variant plus the reconstruction loss."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed=0, dtype=np.float32, norm_pix=True):
        if enc_cfg.post_norm is None:
            enc_cfg = EncoderConfig(**{**enc_cfg.__dict__, "post_norm": dec_cfg.variant == "self_attn"})
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.norm_pix = norm_pix
        self.encoder = ViTEncoder(enc_cfg, seed, dtype)
        self.decoder = build_decoder(enc_cfg, dec_cfg, seed, dtype)

    def params(self):
        return {**self.encoder.named("encoder"), **self.decoder.named("decoder")}

    def targets(self, images):
        patches = patchify(np.asarray(images), self.enc_cfg.patch_size)
        if self.norm_pix:
            return objective.patch_normalize(patches)
        stats = objective.PatchStats(mean=np.zeros_like(patches[..., :1]), std=np.ones_like(patches[..., :1]))
        return patches, stats

    def forward_loss(self, images, plans):
        features = self.encoder.encode(images, plans)
        pred = self.decoder.decode(features, plans)
        if self.dec_cfg.variant == "self_attn":
            pred = T.gather_tokens(pred, masking.stack_index(plans, "predicted_idx"))
        targets, _ = self.targets(images)
        return objective.masked_mse_loss(pred, targets, plans)

    def reconstruct(self, images, plans, trace=None):
        """Predicted-patch pixels (denormalized when norm_pix): a
        (B, |predicted|, patch_dim) array plus the plans' stats."""
        features = self.encoder.encode(images, plans)
        pred = self.decoder.decode(features, plans, trace=trace)
        if self.dec_cfg.variant == "self_attn":
            pred = T.gather_tokens(pred, masking.stack_index(plans, "predicted_idx"))
        targets, stats = self.targets(images)
        idx = masking.stack_index(plans, "predicted_idx")
        row_stats = objective.PatchStats(
            mean=np.take_along_axis(stats.mean, idx[:, :, None], axis=1),
            std=np.take_along_axis(stats.std, idx[:, :, None], axis=1),
        )
        return objective.patch_denormalize(pred.data, row_stats), row_stats

    def load_state(self, arrays):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
        for name, p in params.items():
            arr = arrays[name].astype(p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr


class Classifier:
    """Linear head over global-average-pooled patch tokens (class token
    excluded from the pool)."""

    def __init__(self, encoder: ViTEncoder, num_classes=4, seed=0, dtype=np.float32):
        self.encoder = encoder
        rng = seeding.generator(seed, seeding.INIT, 2)
        self.head = layers.Linear(rng, encoder.cfg.enc_dim, num_classes, dtype)

    def head_params(self):
        return self.head.named("classifier.head")

    def params(self):
        return {**self.encoder.named("encoder"), **self.head_params()}

    def pooled(self, images):
        features = self.encoder.encode(images, plans=None)
        last = features.last
        patch_rows = T.take(last, list(range(1, last.shape[1])), axis=1)
        return T.reduce_mean(patch_rows, axis=1)

    def logits_from_pooled(self, pooled):
        return self.head(pooled)

    def logits(self, images):
        return self.head(self.pooled(images))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, computed stably with max subtraction;
    adjoint is (softmax - onehot) / batch."""
    labels = np.asarray(labels, dtype=int)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (x - m) - np.log(z)
    rows = np.arange(x.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g, out):
        soft = e / z
        soft[rows, labels] -= 1.0
        logits._accumulate((float(g) / x.shape[0]) * soft.astype(x.dtype, copy=False))

    return T._make(np.asarray(loss, dtype=x.dtype), (logits,), back)
