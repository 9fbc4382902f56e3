"""Augmentation, learning-rate schedule and the three training stages."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, ContractError, DataError, NumericError
from .geometry import disparity_pyramid
from .losses import LossWeights, StandInExtractor, deblur_loss, disparity_loss, mse_loss, perceptual_loss
from .network import DAVANet, save_checkpoint
from .synth import StereoSample

log = logging.getLogger(__name__)

STAGES = ("deblur_pretrain", "disp_pretrain", "joint")
STAGE_ALIASES = {"deblur": "deblur_pretrain", "disp": "disp_pretrain", "joint": "joint"}
STAGE_PARAMS = {
    "deblur_pretrain": ("deblurnet",),
    "disp_pretrain": ("dispbinet",),
    "joint": ("deblurnet", "dispbinet", "fusionnet"),
}
CURVE_FIELDS = ("iteration", "stage", "loss_total", "loss_mse", "loss_perc", "loss_disp")


@dataclass
class TrainConfig:
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_interval: int = 200
    deblur_iters: int = 500
    disp_iters: int = 500
    joint_iters: int = 500
    seed: int = 0
    crop_size: int = 64
    crop: bool = True
    vflip: bool = True
    chromatic: bool = True
    noise: bool = True
    jitter_range: tuple = (0.8, 1.2)
    noise_std: float = 0.01
    disp_cap: float = 90.0
    w_mse: float = 1.0
    w_perceptual: float = 0.01
    joint_disp_weight: float = 1.0
    double_view_sum: bool = False
    masked_mean: bool = False
    checkpoint_interval: int = 0
    smoothing: int = 50

    def __post_init__(self):
        self.jitter_range = tuple(self.jitter_range)
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("decay factor must lie in (0, 1]")
        if self.batch_size < 1 or self.decay_interval < 1:
            raise ConfigError("batch size and decay interval must be >= 1")

    def iterations(self, stage: str) -> int:
        return {"deblur_pretrain": self.deblur_iters, "disp_pretrain": self.disp_iters,
                "joint": self.joint_iters}[stage]

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_mse, self.w_perceptual)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter_range"] = list(self.jitter_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AugmentedSample(StereoSample):
    transforms: dict = field(default_factory=dict)


GRAY = np.array([0.299, 0.587, 0.114])


def chromatic_matrix(brightness, contrast, saturation, mean_gray):
    """Affine colour map ``p -> M p + k`` for brightness, contrast, saturation in turn."""
    eye = np.eye(3)
    m = brightness * eye
    k = np.zeros(3)
    # contrast blends towards a scalar shared by both views
    m, k = contrast * m, contrast * k + (1 - contrast) * mean_gray
    sat = saturation * eye + (1 - saturation) * np.outer(np.ones(3), GRAY)
    return sat @ m, sat @ k


def _apply_affine(img, m, k):
    return (np.einsum("ij,jhw->ihw", m, img) + k[:, None, None]).astype(np.float32)


def augment(sample: StereoSample, rng: np.random.Generator, config: TrainConfig) -> AugmentedSample:
    """Epipolar-preserving augmentation applied identically to both views.

    Random crop and vertical flip act on every grid; the chromatic map acts
    on all four images; noise is added to the blurry inputs only. Mask pixels
    whose correspondence falls outside the crop are zeroed. No clipping is
    applied, so the colour map stays affine.
    """
    h, w = sample.shape
    grids = {name: np.asarray(getattr(sample, name)) for name in StereoSample.IMAGE_FIELDS + StereoSample.GRID_FIELDS}
    record = {}

    if config.crop:
        c = config.crop_size
        if c > h or c > w:
            raise ContractError(f"crop {c} larger than image {h}x{w}")
        y0, x0 = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
        grids = {k: v[..., y0:y0 + c, x0:x0 + c] for k, v in grids.items()}
        cols = np.arange(c)
        grids["mask_left"] = grids["mask_left"] * (cols - grids["disp_left"] >= 0)
        grids["mask_right"] = grids["mask_right"] * (cols + grids["disp_right"] <= c - 1)
        record["crop"] = (y0, x0, c)

    if config.vflip:
        flip = bool(rng.random() < 0.5)
        if flip:
            grids = {k: v[..., ::-1, :] for k, v in grids.items()}
        record["vflip"] = flip

    if config.chromatic:
        lo, hi = config.jitter_range
        b, ct, s = (float(v) for v in rng.uniform(lo, hi, size=3))
        mean_gray = float(b * np.tensordot(GRAY, grids["sharp_left"], axes=(0, 0)).mean())
        m, k = chromatic_matrix(b, ct, s, mean_gray)
        for name in StereoSample.IMAGE_FIELDS:
            grids[name] = _apply_affine(grids[name], m, k)
        record["chromatic"] = {"brightness": b, "contrast": ct, "saturation": s,
                               "matrix": m.tolist(), "offset": k.tolist()}

    if config.noise:
        for name in ("blurry_left", "blurry_right"):
            grids[name] = (grids[name] + rng.normal(0.0, config.noise_std, grids[name].shape)).astype(np.float32)
        record["noise_std"] = config.noise_std

    grids = {k: np.ascontiguousarray(v) for k, v in grids.items()}
    grids["mask_left"] = grids["mask_left"].astype(np.uint8)
    grids["mask_right"] = grids["mask_right"].astype(np.uint8)
    return AugmentedSample(meta=dict(sample.meta), transforms=record, **grids)


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.lr * config.lr_decay ** (iteration // config.decay_interval)


def collate(samples, dtype=torch.float32) -> dict:
    def stack(name, channel=False):
        arr = np.stack([np.asarray(getattr(s, name), dtype=np.float64) for s in samples])
        t = torch.from_numpy(arr).to(dtype)
        return t.unsqueeze(1) if channel else t

    batch = {name: stack(name) for name in StereoSample.IMAGE_FIELDS}
    for name in StereoSample.GRID_FIELDS:
        batch[name] = stack(name, channel=True)
    batch["ids"] = [s.sample_id for s in samples]
    return batch


def disparity_targets(batch, levels):
    left = disparity_pyramid(batch["disp_left"], batch["mask_left"], levels)
    right = disparity_pyramid(batch["disp_right"], batch["mask_right"], levels)
    return (left[0], right[0]), (left[1], right[1])


def max_valid_disparity(sample: StereoSample) -> float:
    vals = [sample.disp_left[sample.mask_left > 0], sample.disp_right[sample.mask_right > 0]]
    vals = [v for v in vals if v.size]
    return float(max(v.max() for v in vals)) if vals else 0.0


def normalize_stage(stage: str) -> str:
    stage = STAGE_ALIASES.get(stage, stage)
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    return stage


def stage_losses(stage, model, batch, config, extractor):
    """Return ``(total, parts)`` for one batch."""
    pair = (batch["sharp_left"], batch["sharp_right"])
    weights = config.loss_weights
    parts = {"loss_mse": 0.0, "loss_perc": 0.0, "loss_disp": 0.0}
    total = 0.0
    if stage == "deblur_pretrain":
        restored = (model.deblurnet(batch["blurry_left"])[0], model.deblurnet(batch["blurry_right"])[0])
    else:
        if stage == "disp_pretrain":
            pyr_l, pyr_r, _ = model.dispbinet(batch["blurry_left"], batch["blurry_right"])
            restored = None
        else:
            out = model(batch["blurry_left"], batch["blurry_right"])
            pyr_l, pyr_r = out.disp_left, out.disp_right
            restored = (out.restored_left, out.restored_right)
        targets, masks = disparity_targets(batch, len(pyr_l))
        disp = disparity_loss((pyr_l, pyr_r), targets, masks, masked_mean=config.masked_mean)
        parts["loss_disp"] = float(disp.detach())
        weight = config.joint_disp_weight if stage == "joint" else 1.0
        total = total + weight * disp
    if restored is not None:
        deblur = deblur_loss(restored, pair, weights, extractor, config.double_view_sum)
        with torch.no_grad():
            parts["loss_mse"] = float(mse_loss(restored, pair))
            parts["loss_perc"] = float(perceptual_loss(restored, pair, extractor))
        total = total + deblur
    return total, parts


def _dump_batch(out_dir, stage, iteration, batch):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_{stage}_{iteration:06d}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.numpy() for k, v in batch.items() if isinstance(v, torch.Tensor)}
    np.savez(path, ids=np.array(batch["ids"], dtype=str), **arrays)
    return path


def train_stage(stage: str, model: DAVANet, samples, config: TrainConfig, out_dir=None,
                extractor=None):
    """Optimise the sub-networks belonging to ``stage`` and return the loss curve.

    The curve is a list of dicts with the CSV fields. Checkpoints go to
    ``out_dir`` every ``checkpoint_interval`` iterations and at the end.
    """
    stage = normalize_stage(stage)
    if stage == "joint":
        missing = {"deblur_pretrain", "disp_pretrain"} - set(model.completed_stages)
        if missing:
            raise ConfigError(f"joint training needs pretrained weights; missing stages {sorted(missing)}")
    samples = list(samples)
    if stage == "disp_pretrain":
        samples = [s for s in samples if max_valid_disparity(s) <= config.disp_cap]
    if not samples:
        raise DataError(f"no training samples available for stage {stage}")

    dtype = next(model.parameters()).dtype
    extractor = (extractor or StandInExtractor()).to(dtype)
    params = [p for name in STAGE_PARAMS[stage] for p in model.subnet_parameters(name)]
    opt = torch.optim.Adam(params, lr=lr_at(0, config), betas=(config.beta1, config.beta2))
    rng = np.random.default_rng([config.seed, STAGES.index(stage), len(model.completed_stages)])
    out_dir = Path(out_dir) if out_dir is not None else None

    curve = []
    model.train()
    n_iter = config.iterations(stage)
    for it in range(n_iter):
        for group in opt.param_groups:
            group["lr"] = lr_at(it, config)
        idx = rng.choice(len(samples), size=config.batch_size, replace=len(samples) < config.batch_size)
        batch = collate([augment(samples[i], rng, config) for i in idx], dtype)
        loss, parts = stage_losses(stage, model, batch, config, extractor)
        if not torch.isfinite(loss):
            dump = _dump_batch(out_dir, stage, it, batch)
            raise NumericError(f"non-finite loss in {stage} at iteration {it}, samples {batch['ids']}"
                               + (f"; batch dumped to {dump}" if dump else ""))
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append({"iteration": it, "stage": stage, "loss_total": float(loss.detach()), **parts})
        if out_dir is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            save_checkpoint(model, out_dir / f"{stage}_{it + 1:06d}.npz", stage, it + 1, config.seed)
        if it % 100 == 0:
            log.info("%s iter %d loss %.5f", stage, it, float(loss.detach()))
    model.eval()
    model.completed_stages.append(stage)
    if out_dir is not None:
        save_checkpoint(model, out_dir / f"{stage}_final.npz", stage, n_iter, config.seed,
                        extra={"train_config": config.to_dict()})
        write_curve(curve, out_dir / f"{stage}_loss.csv")
    return curve


def write_curve(curve, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        writer.writerows(curve)


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
