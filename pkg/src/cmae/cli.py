"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, reconstruct, analyze-attn,
decompose, flops. Flag defaults echo the reference recipe (mask ratio
0.75, prediction ratio 0.75, decoder depth 12, cross variant, base lr
1.5e-4, betas 0.9,0.95, weight decay 0.05). Config precedence:
explicit flags > --manifest file > defaults. CMAE_SEED supplies the
default seed. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.

--threads N pins the BLAS/OpenMP pools; it must take effect before numpy
loads, so heavy imports happen inside the command handlers.
"""

import argparse
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DEFAULTS = {
    "mask_ratio": 0.75,
    "pred_ratio": 0.75,
    "decoder_variant": "cross_attn",
    "dec_depth": 12,
    "base_lr": 1.5e-4,
    "betas": (0.9, 0.95),
    "weight_decay": 0.05,
    "warmup_epochs": 2,
    "epochs": 30,
    "batch_size": 256,
    "accum_steps": 1,
    "image_size": 32,
    "patch_size": 4,
    "enc_dim": 64,
    "enc_depth": 4,
    "enc_heads": 4,
    "dec_dim": 32,
    "dec_heads": 4,
    "mlp_ratio": 4.0,
    "fused_maps": None,
    "norm_pix": True,
    "augment": True,
    "seed": None,  # resolved from CMAE_SEED, else 0
}

_VARIANT_ALIASES = {"cross": "cross_attn", "self": "self_attn", "cross+self": "cross_plus_self"}


def _variant(value):
    value = _VARIANT_ALIASES.get(value, value)
    if value not in ("cross_attn", "self_attn", "cross_plus_self"):
        raise argparse.ArgumentTypeError(f"unknown variant {value!r} (choose cross, self, or cross+self)")
    return value


def _betas(value):
    parts = value.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("betas must be two comma-separated floats, e.g. 0.9,0.95")
    return (float(parts[0]), float(parts[1]))


def _bool(value):
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _add_model_flags(p):
    p.add_argument("--decoder-variant", "--variant", dest="decoder_variant", type=_variant, default=None,
                   help="decoder type: cross (default), self, or cross+self")
    p.add_argument("--mask-ratio", type=float, default=None, help="fraction of patches hidden from the encoder (default 0.75)")
    p.add_argument("--pred-ratio", type=float, default=None, help="fraction of all patches decoded and supervised (default 0.75)")
    p.add_argument("--image-size", type=int, default=None, help="square image size (default 32)")
    p.add_argument("--patch-size", type=int, default=None, help="patch size (default 4)")
    p.add_argument("--enc-dim", type=int, default=None, help="encoder width (default 64)")
    p.add_argument("--enc-depth", type=int, default=None, help="encoder blocks (default 4)")
    p.add_argument("--enc-heads", type=int, default=None, help="encoder heads (default 4)")
    p.add_argument("--dec-dim", type=int, default=None, help="decoder width (default 32)")
    p.add_argument("--decoder-depth", dest="dec_depth", type=int, default=None, help="decoder blocks (default 12)")
    p.add_argument("--dec-heads", type=int, default=None, help="decoder heads (default 4)")
    p.add_argument("--mlp-ratio", type=float, default=None, help="MLP expansion ratio (default 4)")
    p.add_argument("--fused-maps", type=int, default=None, help="encoder maps fused per decoder block (default: all, incl. patch embed)")
    p.add_argument("--norm-pix", type=_bool, default=None, help="per-patch normalized targets (default true)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: CMAE_SEED env, else 0)")


def _add_optim_flags(p):
    p.add_argument("--base-lr", type=float, default=None, help="base learning rate before scaling (default 1.5e-4)")
    p.add_argument("--betas", type=_betas, default=None, help="AdamW betas (default 0.9,0.95)")
    p.add_argument("--weight-decay", type=float, default=None, help="decoupled weight decay (default 0.05)")
    p.add_argument("--warmup-epochs", type=int, default=None, help="linear warmup epochs (default 2)")
    p.add_argument("--epochs", type=int, default=None, help="total epochs (default 30)")
    p.add_argument("--batch-size", type=int, default=None, help="images per optimizer step (default 256)")
    p.add_argument("--accum-steps", type=int, default=None, help="gradient accumulation micro-steps (default 1)")
    p.add_argument("--augment", type=_bool, default=None, help="flip + fixed-scale crop augmentation (default true)")


def build_parser():
    parser = _Parser(prog="cmae", description="Masked-image-modeling lab: cross-attention decoding, partial reconstruction, compute accounting.")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count; 1 guarantees bit-exact determinism")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    g.add_argument("--out", required=True, help="output dataset path")
    g.add_argument("--count", type=int, default=20000, help="number of images (default 20000)")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--labeled", action="store_true", help="attach 4-class shape labels")
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    t.add_argument("--data", default=None, help="dataset path (required unless in the manifest)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--manifest", default=None, help="start from a saved manifest.json; flags still win")
    _add_model_flags(t)
    _add_optim_flags(t)

    f = sub.add_parser("finetune", help="classification head on an encoder (linear probe or full finetune)")
    f.add_argument("--data", required=True, help="labeled dataset path")
    f.add_argument("--out", required=True)
    f.add_argument("--checkpoint", default=None, help="pretrained checkpoint (omit for a random encoder)")
    f.add_argument("--manifest", default=None, help="manifest of the pretrained run (model geometry)")
    f.add_argument("--mode", choices=("linear_probe", "full"), default="linear_probe")
    f.add_argument("--epochs", type=int, default=20)
    f.add_argument("--batch-size", type=int, default=128)
    f.add_argument("--base-lr", type=float, default=1e-3)
    f.add_argument("--eval-frac", type=float, default=0.1)
    _add_model_flags(f)

    r = sub.add_parser("reconstruct", help="export reconstruction panels from a checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", default=None, help="manifest of the pretrained run (defaults to next to the checkpoint)")
    r.add_argument("--indices", default="0,1,2,3", help="comma-separated image indices")
    r.add_argument("--decode-all", type=_bool, default=True, help="decode every masked token regardless of training prediction ratio")
    _add_model_flags(r)

    a = sub.add_parser("analyze-attn", help="mask-token attention-group statistics (self-attention decoder)")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint", default=None, help="trained self-variant checkpoint (omit for random init)")
    a.add_argument("--manifest", default=None)
    a.add_argument("--images", type=int, default=64, help="images to average over (default 64)")
    _add_model_flags(a)

    d = sub.add_parser("decompose", help="per-block reconstruction decomposition and fusion-weight maps")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--checkpoint", default=None, help="checkpoint (omit for random init)")
    d.add_argument("--manifest", default=None)
    d.add_argument("--index", type=int, default=0, help="image index to decompose")
    _add_model_flags(d)

    fl = sub.add_parser("flops", help="analytical FLOP report; cross reports include the self-baseline ratio")
    fl.add_argument("--out", default=None, help="output directory for CSV + figure (default: print only)")
    fl.add_argument("--baseline-depth", type=int, default=8, help="self-attention baseline decoder depth (default 8)")
    fl.add_argument("--sweep", action="store_true", help="also sweep pred ratio {0.15, 0.25} x depth {8, 12}")
    _add_model_flags(fl)

    return parser


def _resolve(args, manifest, key):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if manifest and key in manifest.get("config", {}):
        mval = manifest["config"][key]
        return tuple(mval) if key == "betas" and mval is not None else mval
    if key == "seed":
        return int(os.environ.get("CMAE_SEED", "0"))
    return DEFAULTS.get(key)


def _train_config(args, manifest=None):
    from .train import TrainConfig

    keys = [
        "mask_ratio", "pred_ratio", "image_size", "patch_size", "enc_dim", "enc_depth",
        "enc_heads", "dec_dim", "dec_depth", "dec_heads", "mlp_ratio", "fused_maps",
        "base_lr", "betas", "weight_decay", "warmup_epochs", "epochs", "batch_size",
        "accum_steps", "seed", "norm_pix", "augment",
    ]
    resolved = {k: _resolve(args, manifest, k) for k in keys}
    resolved["variant"] = _resolve(args, manifest, "decoder_variant") or _resolve(args, manifest, "variant")
    if resolved["variant"] is None:
        resolved["variant"] = DEFAULTS["decoder_variant"]
    explicit_warmup = getattr(args, "warmup_epochs", None) is not None or (
        manifest and "warmup_epochs" in manifest.get("config", {})
    )
    if not explicit_warmup:
        resolved["warmup_epochs"] = min(resolved["warmup_epochs"], resolved["epochs"])
    if not (0.0 < resolved["pred_ratio"] <= resolved["mask_ratio"] < 1.0):
        raise UsageError(
            f"need 0 < pred-ratio <= mask-ratio < 1, got pred-ratio={resolved['pred_ratio']}, mask-ratio={resolved['mask_ratio']}"
        )
    # TrainConfig uses per-field names
    rename = {"decoder_variant": "variant"}
    kwargs = {rename.get(k, k): v for k, v in resolved.items()}
    return TrainConfig(**kwargs)


def _load_manifest_arg(args):
    if getattr(args, "manifest", None):
        from .train import load_manifest

        return load_manifest(args.manifest)
    return None


def _manifest_next_to_checkpoint(args):
    if getattr(args, "manifest", None):
        return args.manifest
    if getattr(args, "checkpoint", None):
        from pathlib import Path

        cand = Path(args.checkpoint).parent / "manifest.json"
        if cand.exists():
            return str(cand)
    return None


# -- command handlers --------------------------------------------------------


def _cmd_gen_data(args):
    from . import data

    seed = args.seed if args.seed is not None else int(os.environ.get("CMAE_SEED", "0"))
    path = data.gen_synthetic(args.out, args.count, args.height, args.width, seed, labeled=args.labeled)
    print(f"wrote {args.count} images ({args.height}x{args.width}, labeled={args.labeled}) to {path}")
    return 0


def _cmd_pretrain(args):
    from . import figures, train

    manifest = _load_manifest_arg(args)
    cfg = _train_config(args, manifest)
    data_path = args.data or (manifest or {}).get("dataset", {}).get("path")
    if not data_path:
        raise UsageError("pretrain needs --data or a manifest with a dataset entry")
    summary = train.pretrain(cfg, data_path, args.out)
    figures.save_loss_curve(summary["metrics"], str(args.out) + "/loss_curve.png")
    print(f"final epoch loss {summary['epoch_losses'][-1]:.4f}; checkpoint at {summary['checkpoint']}")
    return 0


def _cmd_finetune(args):
    from . import train

    mpath = _manifest_next_to_checkpoint(args)
    manifest = train.load_manifest(mpath) if mpath else None
    cfg = _train_config(args, manifest)
    result = train.finetune(
        cfg,
        args.data,
        args.out,
        mode=args.mode,
        checkpoint=args.checkpoint,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.base_lr,
        eval_frac=args.eval_frac,
    )
    print(f"{args.mode} eval accuracy: {result['eval_accuracy']:.4f} ({result['accuracy_csv']})")
    return 0


def _setup_model_from_checkpoint(args):
    import numpy as np

    from . import train
    from . import tensor as T

    mpath = _manifest_next_to_checkpoint(args)
    manifest = train.load_manifest(mpath) if mpath else None
    cfg = _train_config(args, manifest)
    model = train.build_model(cfg)
    if getattr(args, "checkpoint", None):
        model.load_state(T.load_checkpoint(args.checkpoint))
    return cfg, model


def _cmd_reconstruct(args):
    from pathlib import Path

    import numpy as np

    from . import analysis, data, figures, masking

    cfg, model = _setup_model_from_checkpoint(args)
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [int(s) for s in args.indices.split(",") if s != ""]
    panel_rows = []
    for i in indices:
        if not 0 <= i < ds.count:
            raise data.DataError(f"image index {i} outside dataset of {ds.count}")
        img = ds.float_images([i])[0]
        plan = masking.make_mask_plan(
            model.enc_cfg.num_patches, cfg.mask_ratio,
            cfg.mask_ratio if args.decode_all else cfg.pred_ratio,
            seed=cfg.seed + i,
        )
        recon_rows, _ = model.reconstruct(img[None], [plan])
        overlay = analysis.overlay_reconstruction(img, recon_rows[0], plan, cfg.patch_size)
        masked = analysis.masked_view(img, plan, cfg.patch_size)
        data.write_ppm(img, out / f"{i:04d}_original.ppm")
        data.write_ppm(masked, out / f"{i:04d}_masked.ppm")
        data.write_ppm(overlay, out / f"{i:04d}_recon.ppm")
        panel_rows.append((img, masked, overlay))
    figures.save_reconstruction_panel(panel_rows, out / "reconstruction_panel.png")
    print(f"wrote {3 * len(indices)} PPM panels and reconstruction_panel.png to {out}")
    return 0


def _cmd_analyze_attn(args):
    import csv as _csv
    from pathlib import Path

    from . import data, figures
    from .analysis import attention_stats

    if args.decoder_variant is not None and args.decoder_variant != "self_attn":
        raise UsageError("attention statistics require the self decoder (cross decoders have no mask-to-mask attention)")
    if args.decoder_variant is None and _manifest_next_to_checkpoint(args) is None:
        args.decoder_variant = "self_attn"
    cfg, model = _setup_model_from_checkpoint(args)
    if cfg.variant != "self_attn":
        raise UsageError(f"attention statistics require the self decoder, resolved variant is {cfg.variant!r}")
    ds = data.load_dataset(args.data)
    images = ds.float_images(list(range(min(args.images, ds.count))))
    stats = attention_stats(model, images, cfg.mask_ratio, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "attn_stats.csv"
    with open(csv_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["normalization", "mean_mask_to_mask", "mean_mask_to_visible", "images", "mask_ratio", "seed"])
        for norm, s in stats.items():
            w.writerow([norm, f"{s.mean_mask_to_mask:.8e}", f"{s.mean_mask_to_visible:.8e}", s.images_seen, cfg.mask_ratio, cfg.seed])
    figures.save_attention_bars(stats, out / "attn_stats.png")
    s = stats["per_pair_times_seqlen"]
    print(f"mask->visible {s.mean_mask_to_visible:.3f} vs mask->mask {s.mean_mask_to_mask:.3f} (x seqlen normalization, {s.images_seen} images)")
    print(f"wrote {csv_path} and attn_stats.png")
    return 0


def _cmd_decompose(args):
    import csv as _csv
    from pathlib import Path

    import numpy as np

    from . import analysis, data, figures, masking

    cfg, model = _setup_model_from_checkpoint(args)
    ds = data.load_dataset(args.data)
    if not 0 <= args.index < ds.count:
        raise data.DataError(f"image index {args.index} outside dataset of {ds.count}")
    img = ds.float_images([args.index])[0]
    plan = masking.make_mask_plan(model.enc_cfg.num_patches, cfg.mask_ratio, cfg.mask_ratio, seed=cfg.seed + args.index)
    stack = analysis.per_block_decomposition(model, img, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shares = analysis.highpass_energy_profile(stack)
    with open(out / "decomposition.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["level", "energy", "highpass_share"])
        for (name, img_lvl), share in zip(stack.levels(), shares):
            w.writerow([name, f"{float((img_lvl ** 2).sum()):.8e}", f"{share:.8e}"])
    for li, (name, img_lvl) in enumerate(stack.levels()):
        data.write_ppm(np.clip(img_lvl, 0, 1), out / f"decomp_{li:02d}_{name}.ppm")
    data.write_ppm(np.clip(stack.total, 0, 1), out / f"decomp_{len(stack.contributions) + 1:02d}_total.ppm")
    figures.save_decomposition_montage(stack, out / "decomposition.png")
    lines = [f"identity error {stack.identity_error:.2e}; surrogate gap {stack.surrogate_gap:.2e}"]
    if getattr(model.decoder, "fuse_weights", None) is not None:
        mag = analysis.interblock_weight_map(model.decoder.fuse_weights)
        with open(out / "fusion_weights.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["decoder_block"] + [f"map_{j}" for j in model.decoder.selection])
            for d in range(mag.shape[0]):
                w.writerow([d] + [f"{v:.8e}" for v in mag[d]])
        data.write_ppm_gray(mag, out / "fusion_weights.ppm")
        figures.save_weight_heatmap(mag, out / "fusion_weights.png")
        lines.append(f"fusion trend correlation {analysis.fusion_trend_sign(model.decoder.fuse_weights):+.3f}")
    print("; ".join(lines))
    print(f"wrote decomposition outputs to {out}")
    return 0


def _cmd_flops(args):
    import csv as _csv
    from pathlib import Path

    from . import figures
    from .analysis import count_flops
    from .decoders import DecoderConfig

    cfg = _train_config(args)
    enc_cfg = cfg.encoder_config()
    dec_cfg = cfg.decoder_config()
    report = count_flops(enc_cfg, dec_cfg, cfg.mask_ratio, cfg.pred_ratio)
    reports = {cfg.variant: report}
    print(f"convention: {report.convention}")
    for name, val in report.rows():
        print(f"  {name:22s} {val:>16,d}")
    if cfg.variant != "self_attn":
        base_dec = DecoderConfig(variant="self_attn", dec_dim=cfg.dec_dim, depth=args.baseline_depth,
                                 heads=cfg.dec_heads, mlp_ratio=cfg.mlp_ratio)
        baseline = count_flops(enc_cfg, base_dec, cfg.mask_ratio, cfg.mask_ratio)
        reports[f"self_attn_D{args.baseline_depth}"] = baseline
        ratio = baseline.decoder_total / report.decoder_total
        print(f"decoder FLOPs ratio vs self-attention baseline (D={args.baseline_depth}): {ratio:.2f}x")
    if args.sweep:
        print("sweep (ratio of self baseline to cross decoder):")
        base_dec = DecoderConfig(variant="self_attn", dec_dim=cfg.dec_dim, depth=args.baseline_depth,
                                 heads=cfg.dec_heads, mlp_ratio=cfg.mlp_ratio)
        baseline = count_flops(enc_cfg, base_dec, cfg.mask_ratio, cfg.mask_ratio)
        for gamma in (0.15, 0.25):
            for depth in (8, 12):
                sweep_dec = DecoderConfig(variant="cross_attn", dec_dim=cfg.dec_dim, depth=depth,
                                          heads=cfg.dec_heads, mlp_ratio=cfg.mlp_ratio, fused_maps=cfg.fused_maps)
                r = count_flops(enc_cfg, sweep_dec, cfg.mask_ratio, gamma)
                print(f"  gamma={gamma} D={depth}: {baseline.decoder_total / r.decoder_total:.2f}x")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "flops_report.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["label", "component", "flops", "convention"])
            for label, rep in reports.items():
                for name, val in rep.rows():
                    w.writerow([label, name, val, rep.convention])
        figures.save_flops_bars(reports, out / "flops.png")
        print(f"wrote flops_report.csv and flops.png to {out}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "reconstruct": _cmd_reconstruct,
    "analyze-attn": _cmd_analyze_attn,
    "decompose": _cmd_decompose,
    "flops": _cmd_flops,
}


def _dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        # must land in the environment before the handlers import numpy
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    return _HANDLERS[args.command](args)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _dispatch(argv)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'cmae --help' or 'cmae <command> --help' for usage", file=sys.stderr)
        return 1
    except Exception as exc:
        # data/numeric exceptions classify by type; their modules are only
        # importable after the handler has already loaded numpy
        mods = sys.modules
        data_mod = mods.get("cmae.data")
        obj_mod = mods.get("cmae.objective")
        if data_mod is not None and isinstance(exc, data_mod.DataError):
            print(f"data error: {exc}", file=sys.stderr)
            return 2
        if obj_mod is not None and isinstance(exc, obj_mod.NumericError):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return 3
        raise
