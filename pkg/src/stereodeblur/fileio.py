"""On-disk dataset format.

Each sample lives in ``<root>/<split>/<sample_id>/`` with 8-bit RGB PNG
images, PFM disparities (little-endian float32, bottom-up scanlines),
{0, 255} grayscale PNG masks and a ``meta.json``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .synth import StereoSample

FILES = {
    "blurry_left": "blurry_L.png",
    "blurry_right": "blurry_R.png",
    "sharp_left": "sharp_L.png",
    "sharp_right": "sharp_R.png",
    "disp_left": "disp_L.pfm",
    "disp_right": "disp_R.pfm",
    "mask_left": "mask_L.png",
    "mask_right": "mask_R.png",
}


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("only grayscale PFM is supported")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    name = Path(path).name
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{name}: cannot read ({exc})") from exc
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise DataError(f"{name}: truncated header")
    kind, dims, scale_line, payload = parts
    if kind.strip() != b"Pf":
        raise DataError(f"{name}: expected grayscale 'Pf' header, got {kind[:8]!r}")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise DataError(f"{name}: malformed header") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise DataError(f"{name}: invalid dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 4
    if len(payload) < expected:
        raise DataError(f"{name}: truncated data ({len(payload)} of {expected} bytes)")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float32)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png_rgb(path, img: np.ndarray):
    Image.fromarray(_to_uint8(np.transpose(img, (1, 2, 0))), mode="RGB").save(path, format="PNG")


def write_png_gray(path, img: np.ndarray):
    Image.fromarray(_to_uint8(img), mode="L").save(path, format="PNG")


def read_png(path, mode: str) -> np.ndarray:
    name = Path(path).name
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DataError(f"{name}: expected PNG mode {mode}, got {im.mode}")
            arr = np.asarray(im)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{name}: cannot decode PNG ({exc})") from exc
    return arr


def write_sample(sample: StereoSample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for field in StereoSample.IMAGE_FIELDS:
        write_png_rgb(d / FILES[field], getattr(sample, field))
    write_pfm(d / FILES["disp_left"], sample.disp_left)
    write_pfm(d / FILES["disp_right"], sample.disp_right)
    for field in ("mask_left", "mask_right"):
        write_png_gray(d / FILES[field], getattr(sample, field).astype(np.float64))
    with open(d / "meta.json", "w") as fh:
        json.dump(sample.meta, fh, indent=2, sort_keys=True)


def read_sample(directory) -> StereoSample:
    d = Path(directory)
    fields = {}
    for field in StereoSample.IMAGE_FIELDS:
        arr = read_png(d / FILES[field], "RGB")
        fields[field] = np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
    for field in ("disp_left", "disp_right"):
        fields[field] = read_pfm(d / FILES[field])
    for field in ("mask_left", "mask_right"):
        arr = read_png(d / FILES[field], "L")
        if not np.isin(arr, (0, 255)).all():
            raise DataError(f"{FILES[field]}: mask values must be 0 or 255")
        fields[field] = (arr == 255).astype(np.uint8)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"meta.json: cannot parse ({exc})") from exc
    try:
        return StereoSample(meta=meta, **fields)
    except ValueError as exc:
        raise DataError(f"{d.name}: inconsistent sample ({exc})") from exc


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"manifest.json: cannot read ({exc})") from exc


def load_split(root, split: str) -> list:
    """All samples of ``split`` in sample-id order."""
    manifest = read_manifest(root)
    if split not in manifest.get("splits", {}):
        raise DataError(f"manifest.json: no split named {split!r}")
    return [read_sample(Path(root) / split / sid) for sid in sorted(manifest["splits"][split])]


def read_image(path) -> np.ndarray:
    """Any Pillow-readable image as a ``3xHxW`` float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise DataError(f"{Path(path).name}: cannot read image ({exc})") from exc
    return np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
