"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the criterion
lines are printed even when pytest captures output.
"""

import copy
import hashlib
import math
import time

import numpy as np
import pytest
import torch

from stereodeblur.cli import main as cli_main
from stereodeblur.evaluation import evaluate_model
from stereodeblur.fileio import load_split, read_manifest, read_sample
from stereodeblur.geometry import CameraRig, MotionSpec, blur_extent, translation_blur_ratio, warp_with_disparity
from stereodeblur.losses import LossWeights, StandInExtractor, deblur_loss, disparity_loss, mse_loss, perceptual_loss
from stereodeblur.metrics import psnr, ssim
from stereodeblur.network import DAVANet, ModelConfig, aggregate_views
from stereodeblur.synth import (Layer, SceneSpec, SynthConfig, average_frames, generate_dataset, generate_sample,
                               render_subframes)
from stereodeblur.training import TrainConfig, augment, smoothed, train_stage

from oracles import bilinear_warp_oracle, central_difference_grad, relative_error, ssim_oracle
from test_synth import blur_width, dot_scene, two_plane_sample

torch.set_num_threads(1)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {number}: {detail}"

    return emit


def test_criterion_01_warp_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(100):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        c = int(rng.integers(1, 4))
        src = rng.standard_normal((c, h, w))
        disp = rng.uniform(0, 4, size=(h, w))
        view = "left" if case % 2 == 0 else "right"
        worst = max(worst, float(np.abs(warp_with_disparity(src, disp, view) - bilinear_warp_oracle(src, disp, view)).max()))
    src = torch.rand(3, 16, 16, dtype=torch.float64)
    identity = all(torch.equal(warp_with_disparity(src, torch.zeros(16, 16, dtype=torch.float64), v), src)
                   for v in ("left", "right"))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-6 and identity and elapsed < 10,
           f"max deviation {worst:.2e} over 100 cases, zero-disparity identity exact: {identity}, {elapsed:.1f} s")


def test_criterion_02_geometry_laws(report):
    t0 = time.perf_counter()
    extent_errors = []
    for f, z, dp in [(100, 1.0, 0.05), (100, 2.0, 0.1), (200, 2.0, 0.05), (200, 4.0, 0.1), (200, 1.0, 0.08)]:
        rig = CameraRig(float(f), 0.12, 256, 16)
        motion = MotionSpec(translation_mps=(dp / 0.1, 0, 0), exposure_s=0.1, subframes=33)
        left, _, _, _ = render_subframes(dot_scene(-0.05, z), rig, motion, supersample=4)
        extent_errors.append(abs(blur_width(average_frames(left), left[16]) - blur_extent(rig, z, dp)))
    ratio_errors = []
    for h, b in [(0.3, 0.12), (0.5, 0.3), (0.2, 0.2), (1.0, 0.1)]:
        rig = CameraRig(200.0, b, 320, 16)
        motion = MotionSpec(translation_mps=(0, 0, 5.0), exposure_s=0.1, subframes=33)
        left, right, _, _ = render_subframes(dot_scene(-h, 2.0), rig, motion, supersample=4)
        ratio = blur_width(average_frames(left), left[16]) / blur_width(average_frames(right), right[16])
        expected = translation_blur_ratio(h, b)
        ratio_errors.append(abs(ratio - expected) / expected)
    elapsed = time.perf_counter() - t0
    ok = max(extent_errors) < 1.0 and max(ratio_errors) < 0.10 and elapsed < 120
    report(2, ok, f"blur extent max error {max(extent_errors):.3f} px over 5 settings, "
                  f"view ratio max relative error {max(ratio_errors):.3%} over 4 settings, {elapsed:.1f} s")


def _grad_error(loss_fn, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    loss_fn(t).backward()
    numeric = central_difference_grad(lambda v: loss_fn(torch.from_numpy(v)).item(), x, step=1e-6)
    return relative_error(t.grad.numpy(), numeric)


def test_criterion_03_gradient_checks(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    sharp = torch.from_numpy(rng.random((1, 3, 16, 16)))
    other = torch.from_numpy(rng.random((1, 3, 16, 16)))
    x0 = rng.random((1, 3, 16, 16))
    ext = StandInExtractor().double()
    errors = {
        "mse": _grad_error(lambda x: mse_loss((x, other), (sharp, sharp)), x0),
        "perceptual": _grad_error(lambda x: perceptual_loss((x, other), (sharp, sharp), ext), x0),
        "deblur": _grad_error(lambda x: deblur_loss((x, other), (sharp, sharp), LossWeights(), ext), x0),
    }
    target = ([torch.from_numpy(rng.random((1, 1, 16, 16))), torch.from_numpy(rng.random((1, 1, 8, 8)))],
              [torch.from_numpy(rng.random((1, 1, 16, 16))), torch.from_numpy(rng.random((1, 1, 8, 8)))])
    masks = tuple([torch.from_numpy((rng.random(t.shape) < 0.7).astype(np.float64)) for t in v] for v in target)
    errors["disparity"] = _grad_error(
        lambda d: disparity_loss(([d, d[..., ::2, ::2]], [0.5 * d, d[..., 1::2, 1::2]]), target, masks),
        rng.random((1, 1, 16, 16)) * 4)

    model = DAVANet(ModelConfig(base_width=4, gate_width=4, depth_width=4)).double()
    with torch.no_grad():
        model.deblurnet.out.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
    right = torch.from_numpy(rng.random((1, 3, 16, 16)))

    def composed(x):
        out = model(x, right)
        return deblur_loss((out.restored_left, out.restored_right), (sharp, sharp), LossWeights(), ext)

    errors["forward+deblur"] = _grad_error(composed, x0)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(3, worst < 1e-4 and elapsed < 300, f"max relative errors: {detail}; {elapsed:.1f} s")


def test_criterion_04_gate_convexity(report):
    rng = np.random.default_rng(4)
    inside = True
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
        f_ref = torch.from_numpy(rng.standard_normal((1,) + shape))
        f_other = torch.from_numpy(rng.standard_normal((1,) + shape))
        gate = torch.from_numpy(rng.uniform(0, 1, (1, 1) + shape[1:]))
        fused = aggregate_views(f_ref, f_other, gate)
        inside &= bool(((fused >= torch.minimum(f_ref, f_other)) & (fused <= torch.maximum(f_ref, f_other))).all())
    zeros, ones = torch.zeros(1, 1, 4, 4, dtype=torch.float64), torch.ones(1, 1, 4, 4, dtype=torch.float64)
    f_ref = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    f_other = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    exact = torch.equal(aggregate_views(f_ref, f_other, zeros), f_ref) and \
        torch.equal(aggregate_views(f_ref, f_other, ones), f_other)
    report(4, inside and exact, f"1000 triples inside their source interval: {inside}; G=0/G=1 endpoints exact: {exact}")


def test_criterion_05_shapes_and_symmetry(report):
    cfg = ModelConfig(base_width=8, gate_width=8, depth_width=8)
    model = DAVANet(cfg)
    problems = []
    for size in (16, 32, 64, 128):
        gen = torch.Generator().manual_seed(size)
        left, right = torch.rand(1, 3, size, size, generator=gen), torch.rand(1, 3, size, size, generator=gen)
        restored, feats = model.deblurnet(left)
        pyr_l, pyr_r, fd = model.dispbinet(left, right)
        out = model(left, right)
        checks = [
            restored.shape == left.shape,
            feats.shape == (1, cfg.feature_width, size // 4, size // 4),
            [tuple(p.shape) for p in pyr_l] == [(1, 1, size >> k, size >> k) for k in range(4)],
            [tuple(p.shape) for p in pyr_r] == [(1, 1, size >> k, size >> k) for k in range(4)],
            fd.shape == (1, cfg.base_width, size, size),
            out.restored_left.shape == out.restored_right.shape == left.shape,
            out.gate_left.shape == (1, 1, size // 4, size // 4),
            bool(out.gate_left.min() >= 0) and bool(out.gate_left.max() <= 1),
            bool(out.gate_right.min() >= 0) and bool(out.gate_right.max() <= 1),
        ]
        if not all(checks):
            problems.append(size)

    sym = DAVANet(cfg).double()
    with torch.no_grad():
        for head in sym.dispbinet.heads:
            head.weight.zero_()
            head.bias.zero_()
        sym.deblurnet.out.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
    sym.depth_right.load_state_dict(sym.depth_left.state_dict())
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    out = sym(x, x.clone())
    gap = float((out.restored_left - out.restored_right).abs().max().detach())
    report(5, not problems and gap < 1e-6,
           f"shape contracts hold for sizes 16-128: {not problems} (failing {problems}); "
           f"identical-view restoration gap {gap:.1e}")


def test_criterion_06_ablation_equivalence(report):
    model = DAVANet(ModelConfig(base_width=8, gate_width=8, depth_width=8)).double()
    with torch.no_grad():
        model.deblurnet.out.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
    gen = torch.Generator().manual_seed(6)
    left = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=gen)
    right = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=gen)
    with torch.no_grad():
        single = model(left, right, variant="single")
        forced = model(left, right, variant="no_da", gate_override=0.0)
    gap = max(float((forced.restored_left - single.restored_left).abs().max()),
              float((forced.restored_right - single.restored_right).abs().max()))
    report(6, gap < 1e-6, f"gate 0 and zero depth features vs single DeblurNet: max difference {gap:.1e}")


# training smoke run ----------------------------------------------------------

SMOKE_SEED = 0
SMOKE_SYNTH = dict(count=64, width=64, height=64)
SMOKE_TRAIN = dict(deblur_iters=500, disp_iters=500, joint_iters=500)


def smoke_run(seed, root):
    """Three stages on a fresh toy dataset plus a single-view baseline with the same budget."""
    generate_dataset(SynthConfig(seed=seed, **SMOKE_SYNTH), root)
    train, test = load_split(root, "train"), load_split(root, "test")
    config = TrainConfig(seed=seed, **SMOKE_TRAIN)
    model = DAVANet(ModelConfig(seed=seed))
    window = config.smoothing
    ratios = {}
    for stage in ("deblur", "disp"):
        curve = smoothed([r["loss_total"] for r in train_stage(stage, model, train, config)], window)
        ratios[stage] = curve[-1] / curve[window - 1]
    single = copy.deepcopy(model)
    curve = smoothed([r["loss_total"] for r in train_stage("joint", model, train, config)], window)
    ratios["joint"] = curve[-1] / curve[window - 1]
    # the single-view baseline gets the joint stage's iterations as extra deblurring steps
    train_stage("deblur", single, train, TrainConfig(seed=seed, **{**SMOKE_TRAIN, "deblur_iters": config.joint_iters}))
    stereo_psnr = evaluate_model(model, test, "full").mean_psnr
    single_psnr = evaluate_model(single, test, "single").mean_psnr
    blurry_psnr = float(np.mean([(psnr(s.blurry_left, s.sharp_left) + psnr(s.blurry_right, s.sharp_right)) / 2
                                 for s in test]))
    return {"ratios": ratios, "stereo": stereo_psnr, "single": single_psnr, "blurry": blurry_psnr,
            "test_count": len(test)}


def smoke_passes(result):
    return all(r < 0.5 for r in result["ratios"].values()) and result["stereo"] >= result["single"]


def describe(seed, result):
    ratios = ", ".join(f"{k} {v:.3f}" for k, v in result["ratios"].items())
    return (f"seed {seed}: smoothed final/initial loss {ratios}; test PSNR stereo {result['stereo']:.3f} dB, "
            f"single {result['single']:.3f} dB, blurry input {result['blurry']:.3f} dB "
            f"({result['test_count']} test samples)")


def test_criterion_07_training_smoke(report, tmp_path):
    t0 = time.perf_counter()
    first = smoke_run(SMOKE_SEED, tmp_path / "seed0")
    details = [describe(SMOKE_SEED, first)]
    ok = smoke_passes(first)
    if not ok:
        second = smoke_run(SMOKE_SEED + 1, tmp_path / "seed1")
        details.append("rerun " + describe(SMOKE_SEED + 1, second))
        ok = smoke_passes(second)
    elapsed = time.perf_counter() - t0
    report(7, ok and elapsed < 1800, "; ".join(details) + f"; {elapsed / 60:.1f} min")


def test_criterion_08_metrics(report):
    zeros = np.zeros((3, 16, 16))
    closed = psnr(zeros, zeros + 0.1) == pytest.approx(20.0, abs=1e-9) and psnr(zeros, zeros + 1) == 0.0
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(5):
        a, b = rng.random((2, 3, 16, 16))
        worst = max(worst, abs(ssim(a, b) - ssim_oracle(a, b)))
    same = ssim(a, a)
    report(8, closed and worst < 1e-8 and same == pytest.approx(1.0, abs=1e-12),
           f"PSNR 20 dB and 0 dB cases exact: {closed}; SSIM dual-implementation gap {worst:.1e}; "
           f"identical-image SSIM {same:.12f}")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_09_dataset(report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli_main(["synth", "--out", str(out), "--seed", "9", "--count", "12"]) == 0
    identical = _digest(a) == _digest(b)

    manifest = read_manifest(a)
    rig = manifest["rig"]
    fb = rig["focal_length_px"] * rig["baseline_m"]
    plane_errors, layered_ok, count = [], True, 0
    for split, ids in manifest["splits"].items():
        for sid in ids:
            sample = read_sample(a / split / sid)
            count += 1
            scene = sample.meta["scene"]
            disparities = [fb / l["depth_m"] for l in scene["layers"]] + [fb / scene["background"]["depth_m"]]
            if not scene["layers"]:
                plane_errors.append(float(np.mean(np.abs(sample.disp_left - disparities[-1]))))
                plane_errors.append(float(np.mean(np.abs(sample.disp_right - disparities[-1]))))
            for d in (sample.disp_left, sample.disp_right):
                layered_ok &= bool(np.min(np.abs(d[..., None] - np.array(disparities)), axis=-1).max() < 1e-3)

    # a guaranteed single-plane scene as well
    rig_obj = CameraRig(64.0, 0.12, 48, 32)
    _, _, dl, dr = render_subframes(SceneSpec((), Layer(3.0, texture_seed=1)), rig_obj,
                                    MotionSpec(exposure_s=0.05, subframes=5))
    plane_errors += [float(np.mean(np.abs(dl - rig_obj.fb / 3.0))), float(np.mean(np.abs(dr - rig_obj.fb / 3.0)))]

    rig2, sample = two_plane_sample()
    row = sample.mask_left[16]
    edge = int(np.argmax(sample.disp_left[16] > 0.5 * (rig2.fb + 1.0)))
    band = 0
    while row[edge - 1 - band] == 0:
        band += 1
    band_error = abs(band - (rig2.fb - 1.0))
    ok = identical and layered_ok and max(plane_errors) < 1e-3 and band_error <= 1
    report(9, ok, f"two synth runs byte-identical: {identical}; {count} samples read back, disparities on "
                  f"analytic layer values: {layered_ok}; single-plane mean error {max(plane_errors):.1e} px; "
                  f"mask band {band} px vs disparity jump {rig2.fb - 1.0:.2f} px")


def test_criterion_10_epipolar_augmentation(report):
    config = SynthConfig(width=48, height=48, seed=10)
    bases = [generate_sample(config, i) for i in range(8)]
    rng = np.random.default_rng(10)
    train = TrainConfig(crop_size=32)
    worst, checked = -math.inf, 0
    for i in range(200):
        base = bases[i % len(bases)]
        aug = augment(base, rng, train)
        y0, x0, c = aug.transforms["crop"]

        def residual(s):
            warped = warp_with_disparity(s.sharp_right.astype(np.float64), s.disp_left.astype(np.float64))
            return np.abs(warped - s.sharp_left).max(0)

        before = residual(base)[y0:y0 + c, x0:x0 + c]
        if aug.transforms["vflip"]:
            before = before[::-1]
        gain = np.abs(np.asarray(aug.transforms["chromatic"]["matrix"])).sum(1).max()
        valid = aug.mask_left > 0
        excess = residual(aug)[valid] - (gain * before[valid])
        worst = max(worst, float(excess.max()))
        checked += int(valid.sum())
    report(10, worst <= 1e-6, f"200 augmented samples, {checked} mask-valid pixels; largest excess of the "
                              f"augmented residual over the transformed original {worst:.1e}")
