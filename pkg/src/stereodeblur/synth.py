"""Synthetic stereo blur data.

Scenes are stacks of textured fronto-parallel planes seen by a rectified
stereo rig. The whole scene moves rigidly during the exposure; each blurry
image is the box average of densely rendered sub-frames, and the sharp image
is the temporally central sub-frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError, DomainError
from .geometry import CameraRig, MotionSpec, consistency_mask

PALETTE_SIZE = 5
TEXTURE_SIZE = 128
MIN_DEPTH_M = 1e-3


@dataclass(frozen=True)
class Layer:
    """A fronto-parallel plane at ``depth_m``.

    ``extent`` is ``(x_min, x_max, y_min, y_max)`` in meters in the scene
    frame; ``None`` means unbounded. ``color`` overrides the texture with a
    constant RGB value.
    """

    depth_m: float
    extent: Optional[tuple] = None
    texture_seed: int = 0
    texel_m: float = 0.02
    color: Optional[tuple] = None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SceneSpec:
    layers: tuple
    background: Layer

    def __post_init__(self):
        if self.background.extent is not None:
            raise DomainError("background must be unbounded")
        depths = [l.depth_m for l in self.layers] + [self.background.depth_m]
        if any(not d > 0 for d in depths):
            raise DomainError("layer depths must be positive")
        if any(a > b for a, b in zip(depths, depths[1:])):
            raise DomainError("layers must be ordered near to far, background last")

    @property
    def all_layers(self):
        return tuple(self.layers) + (self.background,)

    def to_dict(self):
        return {
            "layers": [l.to_dict() for l in self.layers],
            "background": self.background.to_dict(),
        }


@dataclass
class StereoSample:
    blurry_left: np.ndarray
    blurry_right: np.ndarray
    sharp_left: np.ndarray
    sharp_right: np.ndarray
    disp_left: np.ndarray
    disp_right: np.ndarray
    mask_left: np.ndarray
    mask_right: np.ndarray
    meta: dict = field(default_factory=dict)

    IMAGE_FIELDS = ("blurry_left", "blurry_right", "sharp_left", "sharp_right")
    GRID_FIELDS = ("disp_left", "disp_right", "mask_left", "mask_right")

    def __post_init__(self):
        h, w = self.sharp_left.shape[-2:]
        for name in self.IMAGE_FIELDS:
            arr = getattr(self, name)
            if arr.shape != (3, h, w):
                raise ContractError(f"{name} has shape {arr.shape}, expected {(3, h, w)}")
        for name in self.GRID_FIELDS:
            arr = getattr(self, name)
            if arr.shape != (h, w):
                raise ContractError(f"{name} has shape {arr.shape}, expected {(h, w)}")

    @property
    def sample_id(self):
        return self.meta.get("sample_id")

    @property
    def shape(self):
        return self.sharp_left.shape[-2:]


@lru_cache(maxsize=256)
def _texture(seed: int) -> np.ndarray:
    """Periodic RGB texture, ``(TEXTURE_SIZE, TEXTURE_SIZE, 3)`` in [0.05, 0.95].

    Low-frequency noise is posterised into a few flat colour regions with sharp
    boundaries, then overlaid with faint fine-grained noise.
    """
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal((TEXTURE_SIZE, TEXTURE_SIZE)), 4.0, mode="wrap")
    edges = np.quantile(field, np.linspace(0, 1, PALETTE_SIZE + 1)[1:-1])
    palette = rng.uniform(0.1, 0.9, size=(PALETTE_SIZE, 3))
    tex = palette[np.digitize(field, edges)]
    fine = ndimage.gaussian_filter(rng.standard_normal(tex.shape), sigma=(1.0, 1.0, 0), mode="wrap")
    tex = tex + 0.05 * fine / fine.std()
    return np.clip(tex, 0.05, 0.95)


def _shade(layer: Layer, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if layer.color is not None:
        return np.broadcast_to(np.asarray(layer.color, dtype=np.float64), xs.shape + (3,))
    tex = _texture(layer.texture_seed)
    coords = np.stack([ys / layer.texel_m, xs / layer.texel_m])
    return np.stack(
        [ndimage.map_coordinates(tex[..., c], coords, order=1, mode="grid-wrap") for c in range(3)],
        axis=-1,
    )


def _rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _pixel_rays(rig: CameraRig, supersample: int):
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    us = (np.arange(rig.image_width)[:, None] + offs[None, :]).reshape(-1)
    vs = (np.arange(rig.image_height)[:, None] + offs[None, :]).reshape(-1)
    u, v = np.meshgrid(us, vs)
    cx = (rig.image_width - 1) / 2
    cy = (rig.image_height - 1) / 2
    f = rig.focal_length_px
    return np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1)


def _check_in_front(scene: SceneSpec, motion: MotionSpec):
    v = np.asarray(motion.translation_mps, dtype=np.float64)
    c = np.asarray(motion.rotation_center_m, dtype=np.float64)
    for t in motion.subframe_times():
        rot = _rot_y(motion.rotation_radps * t)
        for layer in scene.all_layers:
            if layer.extent is None:
                pts = np.array([[0.0, 0.0, layer.depth_m]])
            else:
                x0, x1, y0, y1 = layer.extent
                pts = np.array([[x, y, layer.depth_m] for x in (x0, x1) for y in (y0, y1)])
            world = (pts - c) @ rot.T + c + v * t
            if np.any(world[:, 2] <= MIN_DEPTH_M):
                raise DomainError(f"layer at depth {layer.depth_m} m passes behind the camera at t={t:.4g} s")


def render_view(scene: SceneSpec, rig: CameraRig, camera_x: float, t: float = 0.0,
                motion: Optional[MotionSpec] = None, supersample: int = 1):
    """Render one view at time ``t``.

    Returns ``(image, depth)``: a ``3xHxW`` image (box-filtered over the
    supersampling grid) and the per-pixel camera-frame depth of the visible
    surface on the supersampled grid.
    """
    rays = _pixel_rays(rig, supersample)
    origin = np.array([camera_x, 0.0, 0.0])
    if motion is None:
        rot, shift, center = np.eye(3), np.zeros(3), np.zeros(3)
    else:
        rot = _rot_y(motion.rotation_radps * t)
        shift = np.asarray(motion.translation_mps, dtype=np.float64) * t
        center = np.asarray(motion.rotation_center_m, dtype=np.float64)
    # scene frame: p_s = R^T (p_w - c - v t) + c
    o_s = rot.T @ (origin - center - shift) + center
    d_s = rays @ rot

    best = np.full(rays.shape[:2], np.inf)
    image = np.zeros(rays.shape[:2] + (3,))
    for layer in scene.all_layers:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (layer.depth_m - o_s[2]) / d_s[..., 2]
        xs = o_s[0] + s * d_s[..., 0]
        ys = o_s[1] + s * d_s[..., 1]
        hit = (s > 0) & (s < best)
        if layer.extent is not None:
            x0, x1, y0, y1 = layer.extent
            hit &= (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        if not hit.any():
            continue
        image[hit] = _shade(layer, xs[hit], ys[hit])
        best[hit] = s[hit]

    h, w = rig.image_height, rig.image_width
    ss = supersample
    image = image.reshape(h, ss, w, ss, 3).mean(axis=(1, 3)).transpose(2, 0, 1)
    return image, best


def render_subframes(scene: SceneSpec, rig: CameraRig, motion: MotionSpec, supersample: int = 1):
    """Render both views over one exposure.

    Returns ``(left_seq, right_seq, disp_left, disp_right)``; sequences are
    ``(subframes, 3, H, W)`` and disparities belong to the central sub-frame.
    """
    _check_in_front(scene, motion)
    times = motion.subframe_times()
    left = np.stack([render_view(scene, rig, 0.0, t, motion, supersample)[0] for t in times])
    right = np.stack([render_view(scene, rig, rig.baseline_m, t, motion, supersample)[0] for t in times])
    _, depth_l = render_view(scene, rig, 0.0)
    _, depth_r = render_view(scene, rig, rig.baseline_m)
    return left, right, rig.fb / depth_l, rig.fb / depth_r


def average_frames(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise mean of equally shaped frames (box shutter, linear intensity)."""
    if len(frames) == 0:
        raise ContractError("cannot average an empty frame sequence")
    shape = np.shape(frames[0])
    if any(np.shape(f) != shape for f in frames):
        raise ContractError("frames must share one shape")
    return np.mean(np.asarray(frames, dtype=np.float64), axis=0)


@dataclass
class SynthConfig:
    seed: int = 0
    count: int = 16
    width: int = 128
    height: int = 96
    focal_length_px: Optional[float] = None
    baseline_m: float = 0.12
    fps: float = 480.0
    subframe_choices: tuple = (17, 33, 49)
    max_layers: int = 3
    near_depth_m: tuple = (1.0, 3.0)
    background_depth_m: tuple = (4.0, 8.0)
    speed_xy_mps: float = 4.0
    speed_z_mps: float = 4.0
    rotation_radps: float = 1.0
    supersample: int = 2
    test_fraction: float = 0.25
    tau: float = 1.0

    @property
    def rig(self) -> CameraRig:
        f = self.focal_length_px if self.focal_length_px is not None else float(self.width)
        return CameraRig(f, self.baseline_m, self.width, self.height)

    def to_dict(self):
        d = asdict(self)
        d["subframe_choices"] = list(self.subframe_choices)
        d["near_depth_m"] = list(self.near_depth_m)
        d["background_depth_m"] = list(self.background_depth_m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        for key in ("subframe_choices", "near_depth_m", "background_depth_m"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def random_scene(rng: np.random.Generator, config: SynthConfig):
    rig = config.rig
    n_layers = int(rng.integers(0, config.max_layers + 1))
    depths = np.sort(rng.uniform(*config.near_depth_m, size=n_layers))
    layers = []
    for z in depths:
        half_w = 0.5 * rig.image_width * z / rig.focal_length_px
        half_h = 0.5 * rig.image_height * z / rig.focal_length_px
        cx, cy = rng.uniform(-0.7, 0.7) * half_w, rng.uniform(-0.7, 0.7) * half_h
        ew, eh = rng.uniform(0.25, 0.7) * half_w, rng.uniform(0.25, 0.7) * half_h
        layers.append(Layer(
            depth_m=float(z),
            extent=(float(cx - ew), float(cx + ew), float(cy - eh), float(cy + eh)),
            texture_seed=int(rng.integers(2**31)),
            texel_m=float(z / rig.focal_length_px * rng.uniform(0.7, 1.6)),
        ))
    zb = float(rng.uniform(*config.background_depth_m))
    background = Layer(
        depth_m=zb,
        texture_seed=int(rng.integers(2**31)),
        texel_m=float(zb / rig.focal_length_px * rng.uniform(0.7, 1.6)),
    )
    return SceneSpec(tuple(layers), background)


def random_motion(rng: np.random.Generator, config: SynthConfig, scene: SceneSpec) -> MotionSpec:
    n = int(rng.choice(config.subframe_choices))
    vx, vy = rng.uniform(-config.speed_xy_mps, config.speed_xy_mps, size=2)
    vz = rng.uniform(-config.speed_z_mps, config.speed_z_mps)
    center_z = scene.all_layers[0].depth_m
    return MotionSpec(
        translation_mps=(float(vx), float(vy), float(vz)),
        rotation_radps=float(rng.uniform(-config.rotation_radps, config.rotation_radps)),
        exposure_s=n / config.fps,
        subframes=n,
        rotation_center_m=(config.baseline_m / 2, 0.0, float(center_z)),
    )


def make_sample(scene: SceneSpec, rig: CameraRig, motion: MotionSpec, supersample: int = 1,
                tau: float = 1.0, meta: Optional[dict] = None) -> StereoSample:
    left, right, d_l, d_r = render_subframes(scene, rig, motion, supersample)
    centre = motion.subframes // 2
    mask_l, mask_r = consistency_mask(d_l, d_r, tau)
    info = {"rig": rig.to_dict(), "motion": motion.to_dict(), "subframes": motion.subframes,
            "scene": scene.to_dict()}
    info.update(meta or {})
    return StereoSample(
        blurry_left=average_frames(left).astype(np.float32),
        blurry_right=average_frames(right).astype(np.float32),
        sharp_left=left[centre].astype(np.float32),
        sharp_right=right[centre].astype(np.float32),
        disp_left=d_l.astype(np.float32),
        disp_right=d_r.astype(np.float32),
        mask_left=mask_l,
        mask_right=mask_r,
        meta=info,
    )


def generate_sample(config: SynthConfig, index: int) -> StereoSample:
    """Sample ``index`` of the dataset; depends only on ``(config.seed, index)``."""
    rng = sample_rng(config.seed, index)
    scene_seed = int(rng.integers(2**31))
    scene_rng = np.random.default_rng(scene_seed)
    scene = random_scene(scene_rng, config)
    motion = None
    for _ in range(100):
        candidate = random_motion(scene_rng, config, scene)
        try:
            _check_in_front(scene, candidate)
        except DomainError:
            continue
        motion = candidate
        break
    if motion is None:
        raise DomainError(f"could not draw a valid motion for sample {index}")
    meta = {"sample_id": f"{index:05d}", "seed": config.seed, "index": index, "scene_seed": scene_seed}
    return make_sample(scene, config.rig, motion, config.supersample, config.tau, meta)


def split_of(index: int, config: SynthConfig) -> str:
    n_test = int(round(config.count * config.test_fraction))
    return "test" if index >= config.count - n_test else "train"


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write ``config.count`` samples under ``out_dir`` and return the manifest."""
    from .fileio import write_sample

    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    splits = {"train": [], "test": []}
    scene_seeds = {}
    for index in range(config.count):
        sample = generate_sample(config, index)
        split = split_of(index, config)
        sid = sample.sample_id
        try:
            write_sample(sample, root / split / sid)
        except OSError as exc:
            raise DataError(f"failed writing sample {sid}: {exc}") from exc
        splits[split].append(sid)
        scene_seeds[sid] = sample.meta["scene_seed"]
    manifest = {
        "format_version": 1,
        "rig": config.rig.to_dict(),
        "generator": config.to_dict(),
        "splits": splits,
        "scene_seeds": scene_seeds,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
