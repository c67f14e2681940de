"""Pretraining and finetuning loops, run manifests, and metrics output.

Every run directory gets a manifest.json holding the fully resolved
configuration (model, optimizer, masking, seeds, dataset hash); re-running
from the manifest reproduces mask plans bit-exactly and losses to float
reduction tolerance. Metrics stream to an append-only CSV with the header
``epoch,step,lr,loss,variant,p,gamma,seed``.
"""

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, masking, objective, seeding
from . import tensor as T
from .decoders import DecoderConfig
from .encoder import EncoderConfig
from .model import Classifier, MaskedAutoencoder, cross_entropy

METRICS_HEADER = ["epoch", "step", "lr", "loss", "variant", "p", "gamma", "seed"]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class TrainConfig:
    variant: str = "cross_attn"
    mask_ratio: float = 0.75
    pred_ratio: float = 0.75
    image_size: int = 32
    patch_size: int = 4
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 12
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    fused_maps: int | None = None
    base_lr: float = 1.5e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    epochs: int = 30
    batch_size: int = 256
    accum_steps: int = 1
    seed: int = 0
    norm_pix: bool = True
    augment: bool = True

    def encoder_config(self):
        return EncoderConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            enc_dim=self.enc_dim,
            depth=self.enc_depth,
            heads=self.enc_heads,
            mlp_ratio=self.mlp_ratio,
        )

    def decoder_config(self):
        return DecoderConfig(
            variant=self.variant,
            dec_dim=self.dec_dim,
            depth=self.dec_depth,
            heads=self.dec_heads,
            mlp_ratio=self.mlp_ratio,
            fused_maps=self.fused_maps,
        )

    def optim_config(self):
        return objective.OptimConfig(
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            betas=tuple(self.betas),
            weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.epochs,
        )


def write_manifest(out_dir, cfg: TrainConfig, dataset_path, extra=None):
    manifest = {
        "config": {**cfg.__dict__, "betas": list(cfg.betas)},
        "dataset": {"path": str(dataset_path), "sha256": file_sha256(dataset_path)},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path):
    return json.loads(Path(path).read_text())


def build_model(cfg: TrainConfig, dtype=np.float32):
    return MaskedAutoencoder(cfg.encoder_config(), cfg.decoder_config(), seed=cfg.seed, dtype=dtype, norm_pix=cfg.norm_pix)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.fh = open(self.path, "a", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(METRICS_HEADER)

    def row(self, epoch, step, lr, loss, variant, p, gamma, seed):
        self.writer.writerow([epoch, step, f"{lr:.8e}", f"{loss:.8e}", variant, p, gamma, seed])
        self.fh.flush()

    def close(self):
        self.fh.close()


def pretrain(cfg: TrainConfig, dataset_path, out_dir, log=print, digest_steps=10):
    """Train one masked autoencoder; returns a summary dict with per-epoch
    mean losses and output paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.load_dataset(dataset_path)
    write_manifest(out_dir, cfg, dataset_path)
    model = build_model(cfg)
    params = model.params()
    optim = objective.AdamW(params, cfg.optim_config())
    peak_lr = objective.scaled_lr(cfg.optim_config(), cfg.mask_ratio, cfg.pred_ratio)
    n_tokens = model.enc_cfg.num_patches
    micro = cfg.batch_size // cfg.accum_steps
    if micro * cfg.accum_steps != cfg.batch_size:
        raise ValueError(f"batch_size {cfg.batch_size} not divisible by accum_steps {cfg.accum_steps}")
    steps_per_epoch = ds.count // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"dataset of {ds.count} images is smaller than one batch of {cfg.batch_size}")
    metrics = MetricsWriter(out_dir / "metrics.csv")
    digest = hashlib.sha256()
    epoch_losses = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = ds.epoch_order(epoch, cfg.seed)
            losses = []
            for b in range(steps_per_epoch):
                lr = objective.cosine_warmup_lr(step, cfg.optim_config(), steps_per_epoch, peak_lr)
                optim.zero_grad()
                loss_val = 0.0
                for a in range(cfg.accum_steps):
                    idx = order[b * cfg.batch_size + a * micro : b * cfg.batch_size + (a + 1) * micro]
                    batch = ds.float_images(idx)
                    if cfg.augment:
                        batch = ds.augment(batch, idx, epoch, cfg.seed)
                    plans = masking.batch_plans(
                        len(idx), n_tokens, cfg.mask_ratio, cfg.pred_ratio, cfg.seed, epoch, image_ids=idx
                    )
                    if step < digest_steps:
                        for p in plans:
                            digest.update(p.visible_idx.astype("<i8").tobytes())
                            digest.update(p.predicted_idx.astype("<i8").tobytes())
                    loss = model.forward_loss(batch, plans)
                    if cfg.accum_steps > 1:
                        loss = T.scale(loss, 1.0 / cfg.accum_steps)
                    loss.backward()
                    loss_val += loss.item()
                if not np.isfinite(loss_val):
                    raise objective.NumericError(f"non-finite loss at epoch {epoch} step {step}")
                optim.step(lr)
                metrics.row(epoch, step, lr, loss_val, cfg.variant, cfg.mask_ratio, cfg.pred_ratio, cfg.seed)
                losses.append(loss_val)
                step += 1
            epoch_losses.append(float(np.mean(losses)))
            log(f"[{cfg.variant}] epoch {epoch + 1}/{cfg.epochs}: loss {epoch_losses[-1]:.4f} (lr {lr:.2e})")
    finally:
        metrics.close()
    ckpt_path = out_dir / "checkpoint.ckpt"
    T.save_checkpoint(params, ckpt_path)
    (out_dir / "mask_digest.txt").write_text(digest.hexdigest() + "\n")
    return {
        "epoch_losses": epoch_losses,
        "checkpoint": str(ckpt_path),
        "metrics": str(out_dir / "metrics.csv"),
        "manifest": str(out_dir / "manifest.json"),
    }


# -- finetuning / linear probe ------------------------------------------------


def split_train_eval(count, eval_frac, seed):
    order = seeding.generator(seed, seeding.SHUFFLE, 999).permutation(count)
    n_eval = max(1, int(round(eval_frac * count)))
    return order[n_eval:], order[:n_eval]


def _accuracy(logits, labels):
    return float((np.argmax(logits, axis=1) == labels).mean())


def finetune(cfg: TrainConfig, dataset_path, out_dir, mode="linear_probe", checkpoint=None,
             epochs=20, batch_size=128, base_lr=1e-3, eval_frac=0.1, num_classes=data.NUM_CLASSES, log=print):
    """Classification over global-average-pooled patch tokens. linear_probe
    freezes the encoder (features are precomputed once); full finetunes
    everything. Emits accuracy.csv and returns the final accuracies."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.load_dataset(dataset_path)
    if ds.labels is None:
        raise data.DataError(f"dataset {dataset_path} has no labels; finetuning needs the labeled format")
    model = build_model(cfg)
    if checkpoint is not None:
        arrays = T.load_checkpoint(checkpoint)
        enc_arrays = {k: v for k, v in arrays.items() if k.startswith("encoder.")}
        enc_params = model.encoder.named("encoder")
        for name, p in enc_params.items():
            p.data = enc_arrays[name].astype(p.data.dtype)
    clf = Classifier(model.encoder, num_classes=num_classes, seed=cfg.seed)
    write_manifest(out_dir, cfg, dataset_path, extra={"finetune": {"mode": mode, "epochs": epochs, "base_lr": base_lr, "checkpoint": str(checkpoint) if checkpoint else None}})
    train_idx, eval_idx = split_train_eval(ds.count, eval_frac, cfg.seed)
    opt_cfg = objective.OptimConfig(
        base_lr=base_lr, batch_size=batch_size, betas=(0.9, 0.999),
        weight_decay=0.0 if mode == "linear_probe" else 0.05,
        warmup_epochs=min(1, max(0, epochs - 1)), total_epochs=epochs,
    )
    params = clf.head_params() if mode == "linear_probe" else clf.params()
    optim = objective.AdamW(params, opt_cfg)
    steps_per_epoch = max(1, len(train_idx) // batch_size)

    cached = {}
    if mode == "linear_probe":
        with T.no_grad():
            for name, idx_set in (("train", train_idx), ("eval", eval_idx)):
                feats = []
                for s in range(0, len(idx_set), 512):
                    feats.append(clf.pooled(ds.float_images(idx_set[s : s + 512])).data)
                cached[name] = np.concatenate(feats, axis=0)

    def eval_accuracy():
        with T.no_grad():
            if mode == "linear_probe":
                logits = clf.logits_from_pooled(T.Tensor(cached["eval"])).data
            else:
                chunks = [clf.logits(ds.float_images(eval_idx[s : s + 512])).data for s in range(0, len(eval_idx), 512)]
                logits = np.concatenate(chunks, axis=0)
        return _accuracy(logits, ds.labels[eval_idx])

    acc_path = out_dir / "accuracy.csv"
    with open(acc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mode", "train_loss", "eval_acc"])
        step = 0
        for epoch in range(epochs):
            order = seeding.generator(cfg.seed, seeding.SHUFFLE, 1000 + epoch).permutation(len(train_idx))
            losses = []
            for b in range(steps_per_epoch):
                sel = train_idx[order[b * batch_size : (b + 1) * batch_size]]
                if len(sel) == 0:
                    continue
                labels = ds.labels[sel]
                lr = objective.cosine_warmup_lr(step, opt_cfg, steps_per_epoch, base_lr)
                optim.zero_grad()
                if mode == "linear_probe":
                    feats = cached["train"][order[b * batch_size : (b + 1) * batch_size]]
                    logits = clf.logits_from_pooled(T.Tensor(feats))
                else:
                    batch = ds.float_images(sel)
                    batch = ds.augment(batch, sel, epoch, cfg.seed)
                    logits = clf.logits(batch)
                loss = cross_entropy(logits, labels)
                loss.backward()
                optim.step(lr)
                losses.append(loss.item())
                step += 1
            acc = eval_accuracy()
            writer.writerow([epoch, mode, f"{np.mean(losses):.6f}", f"{acc:.4f}"])
            log(f"[{mode}] epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}, eval acc {acc:.3f}")
    final = eval_accuracy()
    return {"eval_accuracy": final, "accuracy_csv": str(acc_path)}
