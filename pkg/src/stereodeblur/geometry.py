"""Rectified-stereo geometry: blur/depth relations, disparity warping and masks.

Disparities are stored non-negative for both views. A left-view pixel at
column ``x`` corresponds to column ``x - d_left`` in the right image; a
right-view pixel at ``x`` corresponds to ``x + d_right`` in the left image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DomainError

VIEWS = ("left", "right")


@dataclass(frozen=True)
class CameraRig:
    focal_length_px: float
    baseline_m: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise DomainError(f"focal length must be positive, got {self.focal_length_px}")
        if not self.baseline_m > 0:
            raise DomainError(f"baseline must be positive, got {self.baseline_m}")
        if self.image_width < 8 or self.image_height < 8:
            raise DomainError("image dimensions must be at least 8 px")

    @property
    def fb(self) -> float:
        """Disparity-depth constant: ``d = fb / z``."""
        return self.focal_length_px * self.baseline_m

    def disparity_at(self, depth_m):
        return self.fb / depth_m

    def to_dict(self) -> dict:
        return {
            "focal_length_px": self.focal_length_px,
            "baseline_m": self.baseline_m,
            "image_width": self.image_width,
            "image_height": self.image_height,
        }


@dataclass(frozen=True)
class MotionSpec:
    """Rigid scene motion over one exposure.

    Translation is in m/s (x along the baseline, y down, z away from the
    cameras). Rotation is about a vertical axis through ``rotation_center_m``.
    """

    translation_mps: tuple = (0.0, 0.0, 0.0)
    rotation_radps: float = 0.0
    exposure_s: float = 1.0
    subframes: int = 17
    rotation_center_m: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.subframes < 1 or self.subframes % 2 == 0:
            raise DomainError(f"subframes must be odd and >= 1, got {self.subframes}")
        if not self.exposure_s > 0:
            raise DomainError("exposure must be positive")
        if len(self.translation_mps) != 3 or len(self.rotation_center_m) != 3:
            raise DomainError("translation and rotation center must be 3-vectors")

    def subframe_times(self) -> np.ndarray:
        """Times of the sub-frames relative to the central (sharp) one."""
        n = self.subframes
        return (np.arange(n) - (n - 1) / 2) * (self.exposure_s / n)

    def to_dict(self) -> dict:
        return {
            "translation_mps": [float(v) for v in self.translation_mps],
            "rotation_radps": float(self.rotation_radps),
            "exposure_s": float(self.exposure_s),
            "subframes": int(self.subframes),
            "rotation_center_m": [float(v) for v in self.rotation_center_m],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls(
            translation_mps=tuple(d["translation_mps"]),
            rotation_radps=d["rotation_radps"],
            exposure_s=d["exposure_s"],
            subframes=d["subframes"],
            rotation_center_m=tuple(d.get("rotation_center_m", (0.0, 0.0, 0.0))),
        )


def blur_extent(rig: CameraRig, depth_m: float, motion_m: float) -> float:
    """Image-plane blur size in pixels for motion parallel to the image plane."""
    if not depth_m > 0:
        raise DomainError(f"depth must be positive, got {depth_m}")
    return rig.focal_length_px * motion_m / depth_m


def translation_blur_ratio(h_m: float, baseline_m: float) -> float:
    """Left/right blur-size ratio for translation along the depth direction.

    ``h_m`` is the distance from the left camera to the line of motion; the
    right camera lies a further baseline away.
    """
    if h_m < 0 or baseline_m < 0:
        raise DomainError("distances must be non-negative")
    if not baseline_m > 0:
        raise DomainError("baseline must be positive")
    return h_m / (h_m + baseline_m)


def rotation_speed_ratio(radius_left_m: float, radius_right_m: float) -> float:
    """Ratio of left/right lens speeds under rotation about a common center."""
    if radius_left_m < 0:
        raise DomainError("radius must be non-negative")
    if not radius_right_m > 0:
        raise DomainError("right radius must be positive")
    return radius_left_m / radius_right_m


def _check_view(view):
    if view not in VIEWS:
        raise ContractError(f"view must be one of {VIEWS}, got {view!r}")


def warp_with_disparity(source, disparity, target_view: str = "left"):
    """Backward-warp ``source`` into ``target_view`` along image rows.

    ``source`` is ``(..., C, H, W)``; ``disparity`` is the target view's map,
    shaped ``(..., 1, H, W)`` or ``(..., H, W)``. Samples are bilinear along x
    with clamp-to-edge borders; every channel shares the disparity field.
    numpy inputs give numpy outputs.
    """
    _check_view(target_view)
    as_numpy = isinstance(source, np.ndarray)
    src = torch.as_tensor(source)
    disp = torch.as_tensor(disparity, dtype=src.dtype)
    if src.dim() < 2:
        raise ContractError("source must have at least two dimensions")
    if disp.dim() == src.dim() - 1 and src.dim() >= 3:
        disp = disp.unsqueeze(-3)
    if disp.shape[-2:] != src.shape[-2:]:
        raise ContractError(
            f"disparity grid {tuple(disp.shape[-2:])} does not match source {tuple(src.shape[-2:])}"
        )
    try:
        disp = disp.expand(src.shape)
    except RuntimeError as exc:
        raise ContractError(f"cannot broadcast disparity {tuple(disp.shape)} to {tuple(src.shape)}") from exc

    width = src.shape[-1]
    cols = torch.arange(width, dtype=src.dtype)
    x = cols - disp if target_view == "left" else cols + disp
    x = x.clamp(0, width - 1)
    x0 = torch.floor(x)
    frac = x - x0
    i0 = x0.long()
    i1 = (i0 + 1).clamp(max=width - 1)
    out = torch.gather(src, -1, i0) * (1 - frac) + torch.gather(src, -1, i1) * frac
    return out.numpy() if as_numpy else out


def _factor_to_step(factor) -> int:
    frac = Fraction(factor).limit_denominator(64)
    if frac <= 0 or frac > 1 or frac.numerator != 1:
        raise ContractError(f"factor must be 1/k for integer k >= 1, got {factor}")
    return frac.denominator


def area_downsample(x, step: int):
    """Average over non-overlapping ``step`` x ``step`` blocks of the last two axes."""
    as_numpy = isinstance(x, np.ndarray)
    t = torch.as_tensor(x)
    h, w = t.shape[-2:]
    if h % step or w % step:
        raise ContractError(f"grid {h}x{w} is not divisible by {step}")
    if step == 1:
        return x
    lead = t.shape[:-2]
    out = F.avg_pool2d(t.reshape(-1, 1, h, w), step).reshape(*lead, h // step, w // step)
    return out.numpy() if as_numpy else out


def scale_disparity(disparity, factor):
    """Resample a disparity map by ``factor`` and rescale its pixel units."""
    step = _factor_to_step(factor)
    if step == 1:
        return disparity
    return area_downsample(disparity, step) * (1.0 / step)


def consistency_mask(d_left, d_right, tau: float = 1.0):
    """Bidirectional left-right consistency masks for full-resolution disparities.

    Returns ``(mask_left, mask_right)`` with values in {0, 1}. A pixel is valid
    when its correspondence falls inside the other image and the other view's
    disparity there (bilinear lookup) agrees within ``tau`` pixels.
    """
    as_numpy = isinstance(d_left, np.ndarray)
    dl = torch.as_tensor(d_left, dtype=torch.float64)
    dr = torch.as_tensor(d_right, dtype=torch.float64)
    if dl.shape != dr.shape:
        raise ContractError(f"disparity shapes differ: {tuple(dl.shape)} vs {tuple(dr.shape)}")
    width = dl.shape[-1]
    cols = torch.arange(width, dtype=torch.float64)

    fin_l = torch.isfinite(dl)
    fin_r = torch.isfinite(dr)
    dl0 = torch.where(fin_l, dl, torch.zeros_like(dl))
    dr0 = torch.where(fin_r, dr, torch.zeros_like(dr))

    def one_side(d_own, fin_own, d_other, fin_other, view):
        x = cols - d_own if view == "left" else cols + d_own
        in_range = (x >= 0) & (x <= width - 1)
        other_at = warp_with_disparity(d_other.unsqueeze(-3), d_own, view).squeeze(-3)
        other_fin = warp_with_disparity(fin_other.to(torch.float64).unsqueeze(-3), d_own, view).squeeze(-3)
        ok = in_range & fin_own & (other_fin == 1.0) & ((d_own - other_at).abs() <= tau)
        return ok.to(torch.uint8)

    mask_l = one_side(dl0, fin_l, dr0, fin_r, "left")
    mask_r = one_side(dr0, fin_r, dl0, fin_l, "right")
    if as_numpy:
        return mask_l.numpy(), mask_r.numpy()
    return mask_l, mask_r


def disparity_pyramid(disparity, mask, levels: int):
    """Masked block-averaged ground-truth pyramid, finest level first.

    Coarse disparities average only valid pixels and are rescaled to their
    own pixel units; coarse masks require every pixel in the block to be valid.
    """
    d = torch.as_tensor(disparity)
    m = torch.as_tensor(mask).to(d.dtype)
    d = torch.where(m > 0, d, torch.zeros_like(d))
    disps, masks = [d], [m]
    for level in range(1, levels):
        step = 2**level
        msum = area_downsample(m, step) * step * step
        dsum = area_downsample(d * m, step) * step * step
        full = (msum == step * step).to(d.dtype)
        disps.append(torch.where(full > 0, dsum / msum.clamp(min=1) / step, torch.zeros_like(dsum)))
        masks.append(full)
    return disps, masks

