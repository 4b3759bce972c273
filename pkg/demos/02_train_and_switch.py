"""Train a sparse adapter on a toy teacher task, store it, switch it in and out."""

import os
import tempfile

import numpy as np

from shira.masks import build_grad_mask, build_random_mask, collect_gradients, density_to_k
from shira.model import (
    TrainConfig,
    apply_adapters,
    evaluate,
    extract_adapters,
    fuse_loras,
    init_model,
    make_teacher_task,
    train_lora,
    train_shira,
)
from shira.store import file_size, load_all, save

base = init_model(64, 128, 32, seed=0)
# the teacher differs from the base in 2% of W1
task = make_teacher_task(base, density=0.02, scale=0.5, seed=100)
print("base model held-out MSE:", f"{evaluate(base, task):.4g}")

cfg = TrainConfig(learning_rate=0.5, steps=1000, seed=0)
k = density_to_k(128, 64, 0.02)

# saliency from a few calibration batches picks which entries to train
rng = np.random.default_rng(500)
grads = collect_gradients(base, [task.sample(256, rng) for _ in range(4)])["W1"]
masks = {
    "oracle": task.support_masks()["W1"],
    "grad": build_grad_mask(grads, k),
    "random": build_random_mask(128, 64, 0.02, seed=0),
}
trained = {}
for name, mask in masks.items():
    trained[name], _ = train_shira(base, {"W1": mask}, task, cfg)
    print(f"{name:7s} mask ({mask.count} weights): MSE {evaluate(trained[name], task):.4g}")

loras, _ = train_lora(base, ["W1"], 4, 8.0, "alpha_over_r", cfg, task)
print(f"rank-4 LoRA ({loras['W1'].A.size + loras['W1'].B.size} weights): MSE {evaluate(fuse_loras(base, loras), task):.4g}")

# the adapter is just indices and values
adapters = extract_adapters(trained["grad"], base)
path = os.path.join(tempfile.mkdtemp(), "grad.shra")
save(list(adapters.values()), path)
print("adapter file:", os.path.getsize(path), "bytes; predicted", file_size(list(adapters.values())))

# switching in touches only those entries; alpha scales the effect
loaded = {a.name: a for a in load_all(path)}
for alpha in (0.0, 0.5, 1.0):
    print(f"alpha={alpha}: MSE {evaluate(apply_adapters(base, loaded, alpha), task):.4g}")
switched = apply_adapters(base, loaded, 1.0)
back = apply_adapters(switched, loaded, -1.0)
# not exactly zero: the base weights are not on the float32 grid the file stores
print("max |W1 after switch out - base|:", np.abs(back.W1 - base.W1).max())
