"""Command-line entry point: ``synth``, ``train``, ``eval``, ``deblur`` and ``ablate``.

One JSON config file holds optional ``model``, ``train`` and ``synth`` sections.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import ConfigError, ContractError, DataError, DomainError, NumericError
from .evaluation import ablate, check_variant, evaluate_checkpoint, run_model
from .fileio import load_split, read_image, write_pfm, write_png_gray, write_png_rgb
from .network import VARIANTS, DAVANet, ModelConfig, load_checkpoint
from .synth import SynthConfig, generate_dataset
from .training import STAGE_ALIASES, TrainConfig, train_stage

log = logging.getLogger("stereodeblur")

SECTIONS = {"model", "train", "synth"}
PREVIOUS = {"disp_pretrain": "deblur_pretrain", "joint": "disp_pretrain"}


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict) or set(cfg) - SECTIONS:
        raise ConfigError(f"config must be an object with sections {sorted(SECTIONS)}")
    return cfg


def cmd_synth(args):
    section = dict(read_config(args.config).get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    if args.count is not None:
        section["count"] = args.count
    config = SynthConfig.from_dict(section)
    manifest = generate_dataset(config, args.out)
    print(f"wrote {config.count} samples to {args.out} "
          f"({len(manifest['splits']['train'])} train, {len(manifest['splits']['test'])} test)")


def starting_model(stage, args, model_config):
    if args.resume:
        model, _ = load_checkpoint(args.resume)
        return model
    previous = PREVIOUS.get(stage)
    if previous:
        path = Path(args.out) / f"{previous}_final.npz"
        if path.exists():
            log.info("continuing from %s", path)
            model, _ = load_checkpoint(path, model_config)
            return model
    return DAVANet(model_config)


def cmd_train(args):
    cfg = read_config(args.config)
    model_config = ModelConfig.from_dict(cfg.get("model", {}))
    train_config = TrainConfig.from_dict(cfg.get("train", {}))
    stage = STAGE_ALIASES[args.stage]
    model = starting_model(stage, args, model_config)
    samples = load_split(args.data, "train")
    curve = train_stage(stage, model, samples, train_config, out_dir=args.out)
    last = curve[-1]["loss_total"] if curve else float("nan")
    print(f"{stage}: {len(curve)} iterations, final loss {last:.6g}; checkpoint {Path(args.out) / (stage + '_final.npz')}")


def cmd_eval(args):
    report = evaluate_checkpoint(args.ckpt, args.data, args.split, args.variant)
    report.save(args.report)
    print(f"{args.variant}: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f} "
          f"over {len(report.samples)} samples")


def cmd_deblur(args):
    model, _ = load_checkpoint(args.ckpt)
    check_variant(model, args.variant)
    left, right = read_image(args.left), read_image(args.right)
    if left.shape != right.shape:
        raise DataError(f"views differ in size: {left.shape[1:]} vs {right.shape[1:]}")
    out = run_model(model, left, right, args.variant)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for view in ("left", "right"):
        restored = getattr(out, f"restored_{view}")[0].numpy()
        if not torch.isfinite(torch.from_numpy(restored)).all():
            raise NumericError("restored image contains non-finite values")
        write_png_rgb(d / f"restored_{view}.png", restored)
        disp = getattr(out, f"disp_{view}")
        if disp:
            write_pfm(d / f"disp_{view}.pfm", disp[0][0, 0].numpy())
        gate = getattr(out, f"gate_{view}")
        if gate is not None:
            write_png_gray(d / f"gate_{view}.png", gate[0, 0].numpy())
    print(f"wrote results to {d}")


def cmd_ablate(args):
    result = ablate(args.ckpt_dir, args.data, args.split)
    payload = {
        "reports": {k: json.loads(r.to_json()) for k, r in result["reports"].items()},
        "skipped": result["skipped"],
        "table": result["table"],
    }
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(result["table"])


def build_parser():
    parser = argparse.ArgumentParser(prog="stereodeblur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic stereo blur dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=sorted(STAGE_ALIASES))
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("deblur", help="restore one stereo pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("ablate", help="evaluate all ablation variants")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DataError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ContractError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
