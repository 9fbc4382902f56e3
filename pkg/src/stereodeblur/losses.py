"""Deblurring and disparity objectives.

Restored and sharp images come as ``(left, right)`` pairs of NCHW tensors.
Every loss returns a 0-d tensor averaged over the batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    perceptual: float = 0.01

    def __post_init__(self):
        if self.mse < 0 or self.perceptual < 0:
            raise ContractError("loss weights must be non-negative")


def _check_pairs(pred, target):
    if len(pred) != 2 or len(target) != 2:
        raise ContractError("expected (left, right) pairs")
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise ContractError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")


def _per_sample_sq(a, b):
    return ((a - b) ** 2).flatten(1).sum(1)


def mse_loss(restored, sharp):
    """Sum over both views of squared error, divided by ``2 C H W``."""
    _check_pairs(restored, sharp)
    c, h, w = sharp[0].shape[1:]
    total = sum(_per_sample_sq(r, s) for r, s in zip(restored, sharp))
    return (total / (2 * c * h * w)).mean()


class StandInExtractor(nn.Module):
    """Frozen random convolutional feature extractor (three stride-2 stages).

    Used where a pretrained perceptual network is unavailable; any module
    mapping NCHW images to NCHW features can be substituted.
    """

    def __init__(self, widths=(16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.body(x)


def perceptual_loss(restored, sharp, extractor):
    """Feature-space counterpart of :func:`mse_loss` under ``extractor``."""
    _check_pairs(restored, sharp)
    total, dims = 0.0, None
    for r, s in zip(restored, sharp):
        try:
            fr, fs = extractor(r), extractor(s)
        except RuntimeError as exc:
            raise ContractError(f"extractor rejected input of shape {tuple(r.shape)}: {exc}") from exc
        dims = fr.shape[1:].numel()
        total = total + _per_sample_sq(fr, fs)
    return (total / (2 * dims)).mean()


def deblur_loss(restored, sharp, weights: LossWeights = LossWeights(), extractor=None,
                double_view_sum: bool = False):
    """Weighted sum of the MSE and perceptual terms.

    Both terms already sum over the two views; ``double_view_sum`` applies the
    outer view sum once more, which doubles the value.
    """
    value = weights.mse * mse_loss(restored, sharp)
    if weights.perceptual and extractor is not None:
        value = value + weights.perceptual * perceptual_loss(restored, sharp, extractor)
    return 2 * value if double_view_sum else value


def disparity_loss(pred, target, masks, masked_mean: bool = False):
    """Masked multiscale squared disparity error.

    ``pred``, ``target`` and ``masks`` are ``(left_pyramid, right_pyramid)``
    pairs of per-scale ``N x 1 x H_i x W_i`` tensors. Each scale is normalised
    by its pixel count (or by its valid-pixel count with ``masked_mean``).
    """
    if not (len(pred) == len(target) == len(masks) == 2):
        raise ContractError("expected (left, right) pyramids")
    total = 0.0
    for p_views, t_views, m_views in zip(pred, target, masks):
        if not (len(p_views) == len(t_views) == len(m_views)):
            raise ContractError(
                f"pyramid depths differ: {len(p_views)}, {len(t_views)}, {len(m_views)}"
            )
        for p, t, m in zip(p_views, t_views, m_views):
            if p.shape != t.shape or p.shape != m.shape:
                raise ContractError(f"scale shapes differ: {tuple(p.shape)}, {tuple(t.shape)}, {tuple(m.shape)}")
            err = (((p - t) ** 2) * m).flatten(1).sum(1)
            norm = m.flatten(1).sum(1).clamp(min=1) if masked_mean else p.shape[-1] * p.shape[-2]
            total = total + err / norm
    return total.mean()

