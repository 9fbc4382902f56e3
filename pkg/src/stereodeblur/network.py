"""DeblurNet, DispBiNet and the depth-aware / view-aggregating fusion stage.

All tensors are NCHW. DeblurNet encodes at 1/4 resolution and decodes back to
full resolution with a global residual; DispBiNet predicts left and right
disparities at four scales in one pass; the fusion stage combines encoder
features of both views at 1/4 resolution before decoding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DataError
from .geometry import area_downsample, scale_disparity, warp_with_disparity

SLOPE = 0.1
INIT_GAIN = 1.0  # unit gain keeps the deep bottleneck from inflating decoder activations
VARIANTS = ("full", "single", "no_context", "no_da", "no_va")


@dataclass
class ModelConfig:
    base_width: int = 16
    res_blocks: int = 1
    atrous_dilations: tuple = (2, 3)
    context_rates: tuple = (1, 2, 3, 4)
    disp_scales: int = 4
    gate_width: int = 16
    depth_width: int = 16
    seed: int = 0
    zero_init_output: bool = True

    def __post_init__(self):
        self.atrous_dilations = tuple(self.atrous_dilations)
        self.context_rates = tuple(self.context_rates)
        if min(self.base_width, self.gate_width, self.depth_width) <= 0:
            raise ConfigError("all widths must be positive")
        if self.res_blocks < 0:
            raise ConfigError("res_blocks must be non-negative")
        if not 1 <= self.disp_scales <= 4:
            raise ConfigError("disp_scales must be between 1 and 4")
        if any(r < 1 for r in self.context_rates + self.atrous_dilations):
            raise ConfigError("dilation rates must be >= 1")

    @property
    def feature_width(self) -> int:
        return 4 * self.base_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["atrous_dilations"] = list(self.atrous_dilations)
        d["context_rates"] = list(self.context_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def conv3(cin, cout, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation)


def conv_act(cin, cout, stride=1):
    return nn.Sequential(conv3(cin, cout, stride), nn.LeakyReLU(SLOPE))


class ResBlock(nn.Module):
    """``y = x + conv(act(conv(x)))`` with both 3x3 convolutions dilated."""

    def __init__(self, channels, dilation=1):
        super().__init__()
        if dilation < 1:
            raise ContractError("dilation must be >= 1")
        self.channels = channels
        self.conv1 = conv3(channels, channels, dilation=dilation)
        self.conv2 = conv3(channels, channels, dilation=dilation)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ContractError(f"block expects {self.channels} channels, got {x.shape[1]}")
        return x + self.conv2(F.leaky_relu(self.conv1(x), SLOPE))


class ContextModule(nn.Module):
    """Parallel dilated 3x3 branches, concatenated and fused by a 1x1 convolution."""

    def __init__(self, channels, rates=(1, 2, 3, 4)):
        super().__init__()
        if channels % len(rates):
            raise ContractError(f"{channels} channels cannot be split over {len(rates)} branches")
        self.channels = channels
        branch = channels // len(rates)
        self.branches = nn.ModuleList(conv3(channels, branch, dilation=r) for r in rates)
        self.fuse = nn.Conv2d(branch * len(rates), channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ContractError(f"context module expects {self.channels} channels, got {x.shape[1]}")
        return self.fuse(torch.cat([F.leaky_relu(b(x), SLOPE) for b in self.branches], 1))


class Up(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv3(cin, cout)

    def forward(self, x):
        return F.leaky_relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")), SLOPE)


def _stage(cin, cout, n_res, stride=1):
    return nn.Sequential(conv_act(cin, cout, stride), *[ResBlock(cout) for _ in range(n_res)])


def _bottleneck(channels, config: ModelConfig):
    layers = [ResBlock(channels, d) for d in config.atrous_dilations]
    layers.append(ContextModule(channels, config.context_rates))
    return nn.Sequential(*layers)


def _check_image(x, multiple):
    if x.dim() != 4:
        raise ContractError(f"expected an NCHW tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ContractError(f"image size {h}x{w} must be divisible by {multiple}")


class DeblurNet(nn.Module):
    """Single-view U-Net deblurring network with a global residual connection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, n = config.base_width, config.res_blocks
        self.enc1 = _stage(3, w, n)
        self.enc2 = _stage(w, 2 * w, n, stride=2)
        self.enc3 = nn.Sequential(_stage(2 * w, 4 * w, n, stride=2), _bottleneck(4 * w, config))
        self.dec3 = _stage(4 * w, 4 * w, n)
        self.up2 = Up(4 * w, 2 * w)
        self.dec2 = _stage(4 * w, 2 * w, n)
        self.up1 = Up(2 * w, w)
        self.dec1 = _stage(2 * w, w, n)
        self.out = conv3(w, 3)

    def encode(self, image):
        _check_image(image, 4)
        s1 = self.enc1(image)
        s2 = self.enc2(s1)
        return self.enc3(s2), (s1, s2)

    def decode(self, features, skips, image):
        s1, s2 = skips
        x = self.dec3(features)
        x = self.dec2(torch.cat([s2, self.up2(x)], 1))
        x = self.dec1(torch.cat([s1, self.up1(x)], 1))
        return image + self.out(x)

    def forward(self, image):
        features, skips = self.encode(image)
        return self.decode(features, skips, image), features


class DispBiNet(nn.Module):
    """Bidirectional multiscale disparity network on the concatenated pair.

    Returns ``(left_pyramid, right_pyramid, features)``; pyramids are lists of
    ``N x 1 x H_i x W_i`` maps from full resolution down to 1/8, in pixels of
    their own grid. ``features`` feed the full-resolution prediction head.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, n = config.base_width, config.res_blocks
        self.scales = config.disp_scales
        self.enc1 = _stage(6, w, n)
        self.enc2 = _stage(w, 2 * w, n, stride=2)
        self.enc3 = _stage(2 * w, 4 * w, n, stride=2)
        self.enc4 = nn.Sequential(_stage(4 * w, 4 * w, n, stride=2), _bottleneck(4 * w, config))
        self.up3 = Up(4 * w, 4 * w)
        self.dec3 = _stage(8 * w, 4 * w, n)
        self.up2 = Up(4 * w, 2 * w)
        self.dec2 = _stage(4 * w, 2 * w, n)
        self.up1 = Up(2 * w, w)
        self.dec1 = _stage(2 * w, w, n)
        self.heads = nn.ModuleList([conv3(w, 2), conv3(2 * w, 2), conv3(4 * w, 2), conv3(4 * w, 2)])

    def forward(self, left, right):
        _check_image(left, 8)
        if left.shape != right.shape:
            raise ContractError(f"view shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        e1 = self.enc1(torch.cat([left, right], 1))
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(torch.cat([e3, self.up3(e4)], 1))
        d2 = self.dec2(torch.cat([e2, self.up2(d3)], 1))
        d1 = self.dec1(torch.cat([e1, self.up1(d2)], 1))
        feats = (d1, d2, d3, e4)[: self.scales]
        preds = [head(f) for head, f in zip(self.heads, feats)]
        return [p[:, :1] for p in preds], [p[:, 1:] for p in preds], d1


class GateNet(nn.Module):
    """Five 3x3 convolutions on ``|I_ref - W(I_other)|``, squashed to [0, 1]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        g = config.gate_width
        self.body = nn.Sequential(
            conv_act(3, g), conv_act(g, g), conv_act(g, g), conv_act(g, g), conv3(g, 1)
        )

    def forward(self, diff):
        if diff.shape[1] != 3:
            raise ContractError(f"gate input must have 3 channels, got {diff.shape[1]}")
        return torch.sigmoid(self.body(diff))


class DepthAwareNet(nn.Module):
    """Three 3x3 convolutions over ``[disparity, disparity features]`` for one view."""

    def __init__(self, config: ModelConfig, view: str):
        super().__init__()
        self.view = view
        w, d = config.base_width, config.depth_width
        self.body = nn.Sequential(conv_act(1 + w, d), conv_act(d, d), conv3(d, d))

    def forward(self, disp, disp_features, view: str):
        if view != self.view:
            raise ContractError(f"depth-aware network for the {self.view} view called for {view}")
        if disp.shape[-2:] != disp_features.shape[-2:]:
            raise ContractError("disparity and features must share a grid")
        return self.body(torch.cat([disp, disp_features], 1))


def aggregate_views(f_ref, f_other_warped, gate):
    """Gated convex blend of reference and warped other-view features.

    The single-channel gate broadcasts over feature channels.
    """
    if gate.shape[1] != 1:
        raise ContractError("gate map must be single-channel")
    if f_ref.shape != f_other_warped.shape or gate.shape[-2:] != f_ref.shape[-2:]:
        raise ContractError("fusion inputs must share one grid")
    return f_ref * (1 - gate) + f_other_warped * gate


class Fusion(nn.Module):
    """1x1 convolution over ``[F_ref, F_views, F_depth]``.

    The weight is constrained to ``[I - A, A, B]`` so that ``F_views = F_ref``
    with zero depth features maps back to ``F_ref`` exactly; the decoder then
    sees the same input as in single-view mode.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c, d = config.feature_width, config.depth_width
        self.channels = c
        self.view_weight = nn.Parameter(torch.zeros(c, c))
        self.depth_weight = nn.Parameter(torch.zeros(c, d))

    def weight(self):
        eye = torch.eye(self.channels, dtype=self.view_weight.dtype)
        return torch.cat([eye - self.view_weight, self.view_weight, self.depth_weight], 1)

    def forward(self, f_ref, f_other_warped, gate, f_depth, use_views=True):
        if f_depth.shape[-2:] != f_ref.shape[-2:]:
            raise ContractError("depth features must be at the encoder feature scale")
        f_views = aggregate_views(f_ref, f_other_warped, gate) if use_views else f_ref
        stacked = torch.cat([f_ref, f_views, f_depth], 1)
        return F.conv2d(stacked, self.weight()[:, :, None, None]), f_views


@dataclass
class NetOutput:
    restored_left: torch.Tensor
    restored_right: torch.Tensor
    disp_left: list = field(default_factory=list)
    disp_right: list = field(default_factory=list)
    gate_left: Optional[torch.Tensor] = None
    gate_right: Optional[torch.Tensor] = None


def init_weights(module: nn.Module, seed: int, zero_output: bool = True):
    """Fan-in scaled normal init (std sqrt(INIT_GAIN / fan_in)) from a private generator; biases zero."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            std = (INIT_GAIN / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        if isinstance(m, ResBlock):
            with torch.no_grad():
                m.conv2.weight.mul_(0.1)
        if isinstance(m, Fusion):
            with torch.no_grad():
                for p in (m.view_weight, m.depth_weight):
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.1 / p.shape[1] ** 0.5)
    if zero_output:
        for m in module.modules():
            if isinstance(m, DeblurNet):
                with torch.no_grad():
                    m.out.weight.zero_()
                    m.out.bias.zero_()


class DAVANet(nn.Module):
    """Stereo deblurring network: shared DeblurNet, DispBiNet and FusionNet."""

    SUBNETS = {
        "deblurnet": ("deblurnet",),
        "dispbinet": ("dispbinet",),
        "fusionnet": ("gatenet", "depth_left", "depth_right", "fusion"),
    }

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.deblurnet = DeblurNet(self.config)
        self.dispbinet = DispBiNet(self.config)
        self.gatenet = GateNet(self.config)
        self.depth_left = DepthAwareNet(self.config, "left")
        self.depth_right = DepthAwareNet(self.config, "right")
        self.fusion = Fusion(self.config)
        self.completed_stages: list = []
        init_weights(self, self.config.seed, self.config.zero_init_output)

    def subnet_parameters(self, name: str):
        for attr in self.SUBNETS[name]:
            yield from getattr(self, attr).parameters()

    def depth_aware(self, disp, disp_features, view):
        net = self.depth_left if view == "left" else self.depth_right
        return net(disp, disp_features, view)

    def forward(self, left, right, variant: str = "full", gate_override: Optional[float] = None):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        if left.shape != right.shape:
            raise ContractError(f"view shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        if variant == "single":
            return NetOutput(self.deblurnet(left)[0], self.deblurnet(right)[0])
        _check_image(left, 8)

        feat_l, skips_l = self.deblurnet.encode(left)
        feat_r, skips_r = self.deblurnet.encode(right)
        pyr_l, pyr_r, disp_feats = self.dispbinet(left, right)

        dl = scale_disparity(pyr_l[0], 0.25)
        dr = scale_disparity(pyr_r[0], 0.25)
        il, ir = area_downsample(left, 4), area_downsample(right, 4)
        fd = area_downsample(disp_feats, 4)

        gate_l = self.gatenet((il - warp_with_disparity(ir, dl, "left")).abs())
        gate_r = self.gatenet((ir - warp_with_disparity(il, dr, "right")).abs())
        if gate_override is not None:
            gate_l = torch.full_like(gate_l, gate_override)
            gate_r = torch.full_like(gate_r, gate_override)

        depth_l = self.depth_aware(dl, fd, "left")
        depth_r = self.depth_aware(dr, fd, "right")
        if variant == "no_da":
            depth_l, depth_r = torch.zeros_like(depth_l), torch.zeros_like(depth_r)

        use_views = variant != "no_va"
        fused_l, _ = self.fusion(feat_l, warp_with_disparity(feat_r, dl, "left"), gate_l, depth_l, use_views)
        fused_r, _ = self.fusion(feat_r, warp_with_disparity(feat_l, dr, "right"), gate_r, depth_r, use_views)
        return NetOutput(
            restored_left=self.deblurnet.decode(fused_l, skips_l, left),
            restored_right=self.deblurnet.decode(fused_r, skips_r, right),
            disp_left=pyr_l,
            disp_right=pyr_r,
            gate_left=gate_l,
            gate_right=gate_r,
        )


def count_params(model: DAVANet) -> dict:
    """Scalar parameter counts per subnetwork plus ``total``."""
    counts = {name: sum(p.numel() for p in model.subnet_parameters(name)) for name in model.SUBNETS}
    counts["total"] = sum(counts.values())
    return counts


HEADER_KEY = "__header__"


def save_checkpoint(model: DAVANet, path, stage: Optional[str] = None, iteration: int = 0,
                    seed: Optional[int] = None, extra: Optional[dict] = None):
    header = {
        "model_config": model.config.to_dict(),
        "stage": stage,
        "iteration": iteration,
        "seed": seed,
        "completed_stages": list(model.completed_stages),
    }
    header.update(extra or {})
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    """Return ``(header, arrays)`` from a checkpoint archive."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
        header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode())
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{Path(path).name}: not a valid checkpoint ({exc})") from exc
    return header, arrays


def load_checkpoint(path, config: Optional[ModelConfig] = None):
    """Rebuild a model from ``path``; refuses a checkpoint whose config differs from ``config``."""
    header, arrays = read_checkpoint(path)
    stored = ModelConfig.from_dict(header["model_config"])
    if config is not None and config.to_dict() != stored.to_dict():
        raise ConfigError(f"checkpoint config {stored} does not match requested {config}")
    model = DAVANet(stored)
    if set(model.state_dict()) != set(arrays):
        raise DataError(f"{Path(path).name}: parameter names do not match the model")
    if all(v.dtype == np.float64 for v in arrays.values()):
        model = model.double()
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.completed_stages = list(header.get("completed_stages", []))
    return model, header
