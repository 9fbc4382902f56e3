"""Dataset-level PSNR/SSIM evaluation and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .fileio import load_split
from .metrics import psnr, ssim
from .network import VARIANTS, DAVANet, count_params, load_checkpoint

log = logging.getLogger(__name__)

PSNR_MODE = "per_view_mean"
SINGLE_RATE = "single-rate context"


@dataclass
class EvalReport:
    variant: str
    split: str
    samples: list = field(default_factory=list)
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    infinite_psnr: list = field(default_factory=list)
    seconds_per_pair: float = 0.0
    param_count: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    psnr_mode: str = PSNR_MODE

    @classmethod
    def from_samples(cls, variant, split, rows, seconds, **extra):
        rows = sorted(rows, key=lambda r: r["sample_id"])
        finite = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
        infinite = [r["sample_id"] for r in rows if not math.isfinite(r["psnr"])]
        if infinite:
            log.warning("excluding %d samples with infinite PSNR from the mean: %s", len(infinite), infinite)
        return cls(
            variant=variant,
            split=split,
            samples=rows,
            mean_psnr=float(np.mean(finite)) if finite else float("inf"),
            mean_ssim=float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
            infinite_psnr=infinite,
            seconds_per_pair=seconds / max(len(rows), 1),
            **extra,
        )

    def comparable(self) -> dict:
        """Everything except wall-clock timing."""
        d = asdict(self)
        d.pop("seconds_per_pair")
        for row in d["samples"]:
            row.pop("seconds", None)
        return d

    def to_json(self) -> str:
        # json writes inf as Infinity, which json.loads reads back
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())


def score_pair(restored, sample) -> dict:
    """Per-view PSNR/SSIM of a restored ``(left, right)`` pair, plus their averages."""
    row = {"sample_id": sample.sample_id}
    for view, img in zip(("left", "right"), restored):
        ref = getattr(sample, f"sharp_{view}")
        img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        row[f"psnr_{view}"] = psnr(img, ref)
        row[f"ssim_{view}"] = ssim(img, ref)
    row["psnr"] = (row["psnr_left"] + row["psnr_right"]) / 2
    row["ssim"] = (row["ssim_left"] + row["ssim_right"]) / 2
    return row


def evaluate(predict: Callable, samples, variant: str = "custom", split: str = "", **extra) -> EvalReport:
    """Score ``predict(blurry_left, blurry_right) -> (restored_left, restored_right)`` on samples."""
    rows, total = [], 0.0
    for sample in sorted(samples, key=lambda s: s.sample_id):
        t0 = time.perf_counter()
        restored = predict(sample.blurry_left, sample.blurry_right)
        elapsed = time.perf_counter() - t0
        total += elapsed
        row = score_pair(restored, sample)
        row["seconds"] = elapsed
        rows.append(row)
    return EvalReport.from_samples(variant, split, rows, total, **extra)


def _pad_to(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


@torch.no_grad()
def run_model(model: DAVANet, left, right, variant: str = "full"):
    """Run ``model`` on one ``3xHxW`` pair of any size; returns the :class:`NetOutput` cropped back."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    dtype = next(model.parameters()).dtype
    h, w = np.shape(left)[-2:]
    lt = _pad_to(torch.as_tensor(np.asarray(left), dtype=dtype)[None], 8)
    rt = _pad_to(torch.as_tensor(np.asarray(right), dtype=dtype)[None], 8)
    model.eval()
    out = model(lt, rt, variant=variant)
    crop = lambda t: None if t is None else t[..., :h, :w]
    out.restored_left, out.restored_right = crop(out.restored_left), crop(out.restored_right)
    out.disp_left = [crop(out.disp_left[0])] + out.disp_left[1:] if out.disp_left else []
    out.disp_right = [crop(out.disp_right[0])] + out.disp_right[1:] if out.disp_right else []
    return out


def model_predictor(model: DAVANet, variant: str = "full"):
    def predict(left, right):
        out = run_model(model, left, right, variant)
        return out.restored_left[0].numpy(), out.restored_right[0].numpy()

    return predict


def is_single_rate(model: DAVANet) -> bool:
    return all(r == 1 for r in model.config.context_rates)


def check_variant(model: DAVANet, variant: str):
    """Refuse variant/checkpoint combinations that would silently evaluate something else."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "no_context" and not is_single_rate(model):
        raise ConfigError("the no_context variant needs a checkpoint trained with a single-rate context "
                          "block (context_rates all 1)")
    if variant == "single" and "deblur_pretrain" not in model.completed_stages:
        log.warning("evaluating DeblurNet from a checkpoint that never ran deblur pretraining")


def evaluate_model(model: DAVANet, samples, variant: str = "full", split: str = "") -> EvalReport:
    check_variant(model, variant)
    counts = count_params(model)
    if variant == "single":
        counts = {"deblurnet": counts["deblurnet"], "total": counts["deblurnet"]}
    return evaluate(model_predictor(model, variant), samples, variant, split,
                    param_count=counts, config_fingerprint=model.config.fingerprint())


def evaluate_checkpoint(checkpoint, data_dir, split: str = "test", variant: str = "full") -> EvalReport:
    model, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, load_split(data_dir, split), variant, split)


def ablate(ckpt_dir, data_dir, split: str = "test", name: str = "joint_final.npz") -> dict:
    """Evaluate every variant; ``no_context`` comes from ``<ckpt_dir>/no_context/`` when present."""
    ckpt_dir = Path(ckpt_dir)
    samples = load_split(data_dir, split)
    model, _ = load_checkpoint(ckpt_dir / name)
    reports, skipped = {}, {}
    for variant in VARIANTS:
        if variant == "no_context":
            path = ckpt_dir / "no_context" / name
            if not path.exists():
                skipped[variant] = f"no checkpoint at {path}"
                continue
            other, _ = load_checkpoint(path)
            reports[variant] = evaluate_model(other, samples, variant, split)
        else:
            reports[variant] = evaluate_model(model, samples, variant, split)
    return {"reports": reports, "skipped": skipped, "table": ablation_table(reports, skipped)}


def ablation_table(reports: dict, skipped: Optional[dict] = None) -> str:
    lines = ["| variant | PSNR (dB) | SSIM | params |", "|---|---|---|---|"]
    for variant in VARIANTS:
        if variant in reports:
            r = reports[variant]
            lines.append(f"| {variant} | {r.mean_psnr:.3f} | {r.mean_ssim:.4f} | {r.param_count.get('total', 0)} |")
        elif skipped and variant in skipped:
            lines.append(f"| {variant} | skipped | | |")
    return "\n".join(lines)
