"""Batch command-line interface.

One executable with verb subcommands; every subcommand shares the
reproducibility flags (--config, --seed, --deterministic, --jobs, --out).
Configs are files and flags are overrides; the merged effective config is
persisted with every training run. Exit codes: 0 success, 2 configuration
error or bad usage, 3 data error, 4 numeric abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import data, imaging, masks, metrics, train
from .config import RunConfig, load_run_config
from .errors import ConfigError, DataError, MixexpoError, NumericError
from .model import ModelConfig, init_model, load_checkpoint

CACHE_ENV = "UEG_CACHE_DIR"


def _err(exc: object) -> None:
    print(f"error: {exc}", file=sys.stderr)


def _load_rc(args: argparse.Namespace) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig()
    return rc.with_overrides(seed=args.seed, deterministic=args.deterministic)


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise ConfigError("--out DIR is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI got {text!r}")
    return float(parts[0]), float(parts[1])


def _sizes(text: str) -> tuple[tuple[int, int], ...]:
    sizes = []
    for token in text.split(","):
        h, _, w = token.partition("x")
        try:
            sizes.append((int(h), int(w)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected HxW[,HxW...] got {text!r}") from None
    return tuple(sizes)


def _maybe_determinism(args: argparse.Namespace) -> None:
    if args.deterministic:
        cfg = train.TrainConfig(seed=args.seed if args.seed is not None else 0, deterministic=True)
        train.apply_determinism(cfg)


# ------------------------------------------------------------------ commands


def cmd_masks(args: argparse.Namespace) -> int:
    rc = _load_rc(args)
    low = args.low or rc.data.low_dir
    high = args.high or rc.data.high_dir
    if low is None or high is None:
        raise ConfigError('need --low and --high (or config "data.low_dir"/"data.high_dir")')
    for d in (low, high):
        if not os.path.isdir(d):
            _err(f"not a directory: {d}")
            return 1
    mask_cfg = rc.masks
    if args.labeling:
        mask_cfg = replace(mask_cfg, labeling=args.labeling)
    if args.downsample is not None:
        mask_cfg = replace(mask_cfg, downsample_factor=args.downsample)
    if args.blur_sigma is not None:
        mask_cfg = replace(mask_cfg, blur_sigma=args.blur_sigma)
    try:
        mask_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    manifest = data.scan_paired_dir(low, high, seed=args.seed if args.seed is not None else 0)
    if manifest.skipped:
        print(f"warning: skipped {len(manifest.skipped)} unpaired files: {manifest.skipped}", file=sys.stderr)
    cache = os.environ.get(CACHE_ENV)
    manifest = data.precompute_masks(manifest, mask_cfg, out_root=cache)
    manifest = data.precompute_illum(manifest, out_root=cache)
    out_dir = Path(args.out) if args.out else Path(manifest.root)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    data.save_manifest(manifest, manifest_path)
    print(f"mean threshold: {manifest.mean_threshold:.6f}")
    print(f"manifest: {manifest_path} ({len(manifest.entries)} pairs)")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    rc = _load_rc(args)
    synth = rc.data.synth
    if args.mode:
        synth = replace(synth, mode=args.mode)
    if args.gain_range:
        synth = replace(synth, gain_range=args.gain_range)
    if args.gamma_range:
        synth = replace(synth, gamma_range=args.gamma_range)
    if args.grad_axis:
        synth = replace(synth, grad_axis=args.grad_axis)
    if args.tiles is not None:
        synth = replace(synth, tiles=args.tiles)
    synth.validate()
    base_seed = args.seed if args.seed is not None else synth.seed

    if not os.path.isdir(args.input):
        _err(f"not a directory: {args.input}")
        return 1
    cleans = sorted(Path(args.input).glob("*.png"))
    if not cleans:
        raise DataError(f"no PNGs found in {args.input}")
    out = _require_out(args)
    (out / "low").mkdir(exist_ok=True)
    (out / "high").mkdir(exist_ok=True)
    for path in cleans:
        clean = imaging.load_image(path)
        per_file = replace(synth, seed=data.derived_seed(base_seed, "synth", path.name))
        degraded = data.synth_degrade(clean, per_file)
        imaging.save_image(clean, out / "high" / path.name)
        imaging.save_image(degraded, out / "low" / path.name)
    manifest = data.scan_paired_dir(out / "low", out / "high", seed=base_seed)
    data.save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(manifest.entries)} pairs under {out} (mode={synth.mode})")
    return 0


def _cmd_train_impl(args: argparse.Namespace, finetune_only: bool) -> int:
    if not args.config:
        raise ConfigError("--config FILE is required for training")
    rc = _load_rc(args)
    if rc.data.manifest is None:
        raise ConfigError('config "data.manifest" must point at a dataset manifest')
    run_dir = _require_out(args)
    try:
        result = train.run(
            run_dir,
            rc.data.manifest,
            rc.model,
            rc.train,
            rc.loss,
            mask_cfg=rc.masks,
            config_echo=args.config,
            finetune_only=finetune_only,
            init_from=args.init_from,
            dry_run=args.dry_run,
            progress=print if not args.quiet else None,
        )
    except DataError as exc:
        message = str(exc)
        if "mask" in message or "illum" in message:
            message += " (hint: run 'mixexpo masks' first)"
        _err(message)
        return 3
    if args.dry_run:
        print(f"dry run ok: {result['entries']} entries")
        return 0
    agg = result["aggregate"]
    print(f"final checkpoint: {result['checkpoint']}")
    print(f"eval: mean psnr {agg['psnr_db']:.2f} dB, mean ssim {agg['ssim']:.4f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    return _cmd_train_impl(args, finetune_only=False)


def cmd_finetune(args: argparse.Namespace) -> int:
    return _cmd_train_impl(args, finetune_only=True)


def _save_intermediates(out_dir: Path, stem: str, outputs) -> None:
    attn = outputs.attn[0].numpy()
    imaging.save_grayscale(attn[0], out_dir / f"{stem}_attn_under.png")
    imaging.save_grayscale(attn[1], out_dir / f"{stem}_attn_over.png")
    for name, tensor in (("local", outputs.local_image), ("global", outputs.global_image)):
        img = tensor[0].permute(1, 2, 0).numpy()
        imaging.save_image(img, out_dir / f"{stem}_{name}.png")


def cmd_enhance(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    _maybe_determinism(args)
    out_dir = _require_out(args)

    def process(path_str: str) -> tuple[str, str | None]:
        try:
            path = Path(path_str)
            img = imaging.load_image(path)
            outputs = metrics.enhance_outputs(model, img)
            enhanced = outputs.image[0].permute(1, 2, 0).numpy()
            imaging.save_image(enhanced, out_dir / f"{path.stem}_out.png")
            if args.dump_intermediates:
                _save_intermediates(out_dir, path.stem, outputs)
            return path_str, None
        except (MixexpoError, OSError, ValueError) as exc:
            return path_str, str(exc)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(process, args.inputs))
    else:
        results = [process(p) for p in args.inputs]
    failed = [(p, e) for p, e in results if e is not None]
    for path, error in failed:
        _err(f"{path}: {error}")
    print(f"enhanced {len(results) - len(failed)}/{len(results)} images into {out_dir}")
    return 1 if failed else 0


def cmd_eval(args: argparse.Namespace) -> int:
    rc = _load_rc(args)
    manifest_path = args.manifest or rc.data.manifest
    if manifest_path is None:
        raise ConfigError('need --manifest (or config "data.manifest")')
    model = load_checkpoint(args.checkpoint)
    _maybe_determinism(args)
    manifest = data.load_manifest(manifest_path)
    out = _require_out(args)
    images_dir = out / "images" if (args.ssim_maps or args.save_outputs) else None
    report = metrics.eval_dataset(
        model,
        manifest,
        out_dir=images_dir,
        ssim_maps=args.ssim_maps,
        timing=args.timing,
        checkpoint_name=Path(args.checkpoint).name,
    )
    metrics.save_report(report, out / "eval.json")
    print(metrics.render_table(report))
    agg = report["aggregate"]
    print(f"mean psnr {agg['psnr_db']:.2f} dB, mean ssim {agg['ssim']:.4f} over {len(report['per_image'])} images")
    if not report["per_image"]:
        _err("no image evaluated successfully")
        return 1
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = ModelConfig(seed=args.seed if args.seed is not None else 0)
        model = init_model(cfg)
    _maybe_determinism(args)
    result = metrics.bench_inference(model, sizes=args.sizes, repeats=args.repeats)
    out = _require_out(args)
    with open(out / "bench.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in result["rows"]:
        print(
            f"{row['height']}x{row['width']}: median {row['median_ms']:.1f} ms, "
            f"p95 {row['p95_ms']:.1f} ms over {row['repeats']} repeats"
        )
    print(f"peak memory: {result['peak_mem_mb']:.0f} MB (process RSS, best effort)")
    print("reference figures, non-binding (different hardware): 95 ms at 400x600, ~1134 MB peak")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run-config JSON file")
    common.add_argument("--seed", type=int, metavar="INT", help="override every config seed")
    common.add_argument(
        "--deterministic",
        action="store_const",
        const=True,
        help="pin all nondeterminism (threads, torch algorithms)",
    )
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="per-image parallelism cap")
    common.add_argument("--out", metavar="DIR", help="output directory")

    parser = argparse.ArgumentParser(
        prog="mixexpo",
        description="Mixed-exposure image enhancement: masks, synthesis, training, inference.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    p = sub.add_parser("masks", parents=[common], help="precompute exposure masks and illum maps")
    p.add_argument("--low", metavar="DIR", help="degraded-input image directory")
    p.add_argument("--high", metavar="DIR", help="reference image directory")
    p.add_argument("--labeling", choices=("trilevel", "binary"), help="label-map flavor")
    p.add_argument("--downsample", type=int, metavar="N", help="denoise-chain downsample factor")
    p.add_argument("--blur-sigma", type=float, metavar="S", help="denoise-chain blur sigma")
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("synth", parents=[common], help="synthesize a degraded paired dataset")
    p.add_argument("--input", required=True, metavar="DIR", help="clean source images")
    p.add_argument("--mode", choices=data.SYNTH_MODES, help="degradation mode")
    p.add_argument("--gain-range", type=_pair, metavar="LO,HI", help="exposure gain range")
    p.add_argument("--gamma-range", type=_pair, metavar="LO,HI", help="gamma range")
    p.add_argument("--grad-axis", choices=data.GRAD_AXES, help="gradient direction for grad mode")
    p.add_argument("--tiles", type=int, metavar="N", help="rectangles for mix mode")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} pipeline")
        p.add_argument("--init-from", metavar="CKPT", required=(name == "finetune"),
                       help="checkpoint to start from")
        p.add_argument("--dry-run", action="store_true", help="validate configs and stop")
        p.add_argument("--quiet", action="store_true", help="suppress per-step progress lines")
        p.set_defaults(func=func)

    p = sub.add_parser("enhance", parents=[common], help="enhance images with a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    p.add_argument("inputs", nargs="+", metavar="IMAGE", help="input PNG paths")
    p.add_argument(
        "--dump-intermediates",
        action="store_true",
        help="also write attention maps and local/global branch images",
    )
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    p.add_argument("--manifest", metavar="PATH", help="dataset manifest JSON")
    p.add_argument("--ssim-maps", action="store_true", help="export per-image SSIM maps")
    p.add_argument("--save-outputs", action="store_true", help="export enhanced images")
    p.add_argument("--timing", action="store_true", help="include timing and memory fields")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="measure inference wall-clock")
    p.add_argument("--checkpoint", metavar="CKPT", help="model checkpoint (default: fresh init)")
    p.add_argument("--sizes", type=_sizes, default=((256, 256), (400, 600)), metavar="HxW,HxW",
                   help="input sizes to time")
    p.add_argument("--repeats", type=int, default=3, metavar="N", help="timed repeats per size")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(exc)
        return 2
    except DataError as exc:
        _err(exc)
        return 3
    except NumericError as exc:
        _err(exc)
        return 4
    except (MixexpoError, OSError, ValueError) as exc:
        _err(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
