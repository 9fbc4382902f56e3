"""Three-stage training on a tiny dataset, then the ablation table.

DeblurNet is pretrained alone, DispBiNet alone, then everything jointly. The
ablation harness reuses the joint weights for the single, no_da and no_va
variants. no_context needs its own single-rate checkpoint and is skipped here.
Sizes are small so this finishes in well under a minute on one core; the
numbers show the plumbing, not the quality of a properly trained model.
"""

import tempfile
from pathlib import Path

import torch

from stereodeblur.evaluation import ablate
from stereodeblur.fileio import load_split
from stereodeblur.network import DAVANet, ModelConfig, count_params, save_checkpoint
from stereodeblur.synth import SynthConfig, generate_dataset
from stereodeblur.training import TrainConfig, smoothed, train_stage

torch.set_num_threads(1)
root = Path(tempfile.mkdtemp())
generate_dataset(SynthConfig(seed=1, count=16, width=48, height=48), root / "data")
train = load_split(root / "data", "train")

model = DAVANet(ModelConfig(base_width=8, gate_width=8, depth_width=8))
print("parameters:", count_params(model))
config = TrainConfig(deblur_iters=60, disp_iters=60, joint_iters=60, crop_size=32, smoothing=10)
for stage in ("deblur", "disp", "joint"):
    curve = smoothed([r["loss_total"] for r in train_stage(stage, model, train, config)], config.smoothing)
    print(f"{stage:>6}: smoothed loss {curve[config.smoothing - 1]:.4f} -> {curve[-1]:.4f}")

save_checkpoint(model, root / "ckpt" / "joint_final.npz", stage="joint")
result = ablate(root / "ckpt", root / "data")
print(result["table"])
print("skipped:", result["skipped"])
