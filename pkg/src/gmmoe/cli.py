"""Command-line interface.

Subcommands: train, eval, enhance, ablate. Exit codes are a stable
contract: 0 success, 2 configuration error, 3 data error, 4 runtime or
numeric error. --data-root falls back to the GMMOE_DATA_ROOT environment
variable. All outputs land under --out with fixed names: ckpt_<iter>.bin,
log.jsonl, report.json, report.csv.
"""

import argparse
import json
import os
import sys

import torch

from .checkpoint import load_checkpoint, restore_model
from .config import load_run_config
from .data import decode_image, encode_image, load_manifest, IMAGE_EXTENSIONS
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    GMMoEError,
)
from .network import build_model, count_parameters
from .training import (
    ablation_config,
    ablation_preset,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gmmoe",
        description="Low-light image enhancement: train, evaluate, ablate, enhance.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="TOML or JSON run config")
    t.add_argument("--data-root", default=None,
                   help="dataset root (default: $GMMOE_DATA_ROOT)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--seed", type=int, default=None,
                   help="override the master seed from the config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data-root", default=None)
    e.add_argument("--layout", default="generic_paired")
    e.add_argument("--report", required=True, help="report JSON path")

    n = sub.add_parser("enhance", help="enhance a single image or a directory")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--in", dest="input", required=True, help="image or directory")
    n.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("ablate", help="train+eval one ablation preset")
    a.add_argument("--preset", type=int, required=True, help="preset id 1..8")
    a.add_argument("--config", required=True)
    a.add_argument("--data-root", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    return p


def _resolve_data_root(arg_value):
    root = arg_value or os.environ.get("GMMOE_DATA_ROOT")
    if not root:
        raise DataError("no dataset root: pass --data-root or set GMMOE_DATA_ROOT")
    if not os.path.isdir(root):
        raise DataError(f"dataset root is not a directory: {root}")
    return root


def _write_reports(report, json_path, csv_path):
    report.write_json(json_path)
    report.write_csv(csv_path)
    agg = report.aggregate
    print(
        f"evaluated {agg['count']} pairs: "
        f"mean PSNR {agg['mean_psnr_db']:.2f} dB, mean SSIM {agg['mean_ssim']:.4f}"
    )


def _train_and_report(cfg, data_root, out_dir, seed, resume, preset=None):
    """Shared train+eval driver for cmd_train and cmd_ablate."""
    if seed is not None:
        cfg.train.master_seed = seed
    model_cfg = cfg.model if preset is None else ablation_config(preset, cfg.model)
    train_manifest = load_manifest(data_root, cfg.layout, "train")
    test_manifest = load_manifest(data_root, cfg.layout, "test")

    model = build_model(model_cfg, cfg.train.master_seed)
    print(
        f"model: {count_parameters(model)} parameters, "
        f"training {cfg.train.total_iters} iterations on "
        f"{len(train_manifest.pairs)} pairs"
    )
    meta = {"config_digest": cfg.digest()}
    if preset is not None:
        meta["ablation_preset"] = preset.id
    result = train(
        model, train_manifest, cfg.train,
        out_dir=out_dir, resume=resume, extra_meta=meta,
    )
    report = evaluate(model, test_manifest, config_digest=cfg.digest())
    _write_reports(
        report,
        os.path.join(out_dir, "report.json"),
        os.path.join(out_dir, "report.csv"),
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    return result, report


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data_root = _resolve_data_root(args.data_root)
    _train_and_report(cfg, data_root, args.out, args.seed, args.resume)
    return EXIT_OK


def cmd_eval(args) -> int:
    data_root = _resolve_data_root(args.data_root)
    manifest = load_manifest(data_root, args.layout, "test")
    bundle = load_checkpoint(args.ckpt)
    model = restore_model(bundle)
    digest = bundle.extra.get("config_digest", "")
    report = evaluate(model, manifest, config_digest=digest)
    json_path = args.report
    root, ext = os.path.splitext(json_path)
    csv_path = (root if ext == ".json" else json_path) + ".csv"
    d = os.path.dirname(os.path.abspath(json_path))
    os.makedirs(d, exist_ok=True)
    _write_reports(report, json_path, csv_path)
    return EXIT_OK


def cmd_enhance(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = restore_model(bundle)
    model.eval()

    if os.path.isdir(args.input):
        names = sorted(
            n for n in os.listdir(args.input)
            if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
        )
        inputs = [os.path.join(args.input, n) for n in names]
        if not inputs:
            raise DataError(f"no images found in {args.input}")
    elif os.path.isfile(args.input):
        inputs = [args.input]
    else:
        raise DataError(f"no such image or directory: {args.input}")

    os.makedirs(args.out, exist_ok=True)
    failures = 0
    with torch.no_grad():
        for path in inputs:
            try:
                low = decode_image(path)
                enhanced = model(low)
                stem = os.path.splitext(os.path.basename(path))[0]
                encode_image(enhanced, os.path.join(args.out, stem + ".png"))
            except GMMoEError as e:
                failures += 1
                print(f"failed on {path}: {e}", file=sys.stderr)
    print(f"enhanced {len(inputs) - failures}/{len(inputs)} images to {args.out}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_ablate(args) -> int:
    preset = ablation_preset(args.preset)
    cfg = load_run_config(args.config)
    data_root = _resolve_data_root(args.data_root)
    result, report = _train_and_report(
        cfg, data_root, args.out, args.seed, None, preset=preset
    )

    agg = report.aggregate
    comps = "+".join(sorted(preset.components())) or "baseline only"
    print(f"preset {preset.id}: {comps}")
    print(
        f"  measured at this scale: PSNR {agg['mean_psnr_db']:.2f} dB, "
        f"SSIM {agg['mean_ssim']:.4f}"
    )
    for ds, ref in preset.reference.items():
        print(
            f"  published full-scale reference ({ds}): "
            f"PSNR {ref['psnr_db']:.2f} dB, SSIM {ref['ssim']:.4f}"
        )

    row = {
        "preset": preset.id,
        "components": sorted(preset.components()),
        "measured": {
            "mean_psnr_db": agg["mean_psnr_db"],
            "mean_ssim": agg["mean_ssim"],
            "count": agg["count"],
        },
        "reference": preset.reference,
        "config_digest": report.config_digest,
    }
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(row, f, indent=2)
        f.write("\n")
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "enhance": cmd_enhance,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except GMMoEError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
