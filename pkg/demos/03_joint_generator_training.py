"""Train the two field generators against a segmenter and look at their samples.

A short run on 64x64 phantoms: pre-train the segmenter on one labeled
volume, train G_V (deformations) and G_I (intensity fields) jointly with it
and a discriminator on unlabeled volumes, then draw GV / GI / GVI samples.

    python demos/03_joint_generator_training.py --iters 200 --out samples.png
"""

import argparse

import numpy as np

from tdaug.experiments import PhantomExperiment, desk_config
from tdaug.plots import save_sample_grid
from tdaug.trainer import LossLog, pretrain_segmenter, sample_augmented_set, train_generator_jointly

p = argparse.ArgumentParser()
p.add_argument("--iters", type=int, default=200)
p.add_argument("--out", default="samples.png")
args = p.parse_args()

exp = PhantomExperiment()
data = exp.training_data(replicate=0)
cfg = desk_config(gen_iters=args.iters, pretrain_iters=200)
print(f"{len(data.labeled)} labeled slices, {len(data.unlabeled)} unlabeled slices")

losses = LossLog()
S = pretrain_segmenter(data, cfg, losses)
gens = {}
for kind in ("deform", "intensity"):
    sel = train_generator_jointly(kind, data, cfg, S, losses)
    gens[kind] = sel.generator
    print(f"{kind}: kept iteration {sel.best_iter} (validation Dice {sel.best_val_dsc:.3f})")
losses.write("losses.csv")

sets = sample_augmented_set(gens["deform"], gens["intensity"], data.x_l, data.y_l, 8,
                            np.random.default_rng(0), cfg.z_dim)
for name, (x, y) in sets.items():
    path = args.out.replace(".png", f"_{name}.png")
    save_sample_grid(path, x, y, title=name)
    print("wrote", path)
