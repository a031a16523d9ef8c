"""The classical augmentation baselines side by side.

Random affine (scale, flip, small and 45-degree rotations), random elastic
deformation, contrast/brightness and Mixup, each applied to one phantom slice.

    python demos/02_baseline_augmentations.py --out baselines.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tdaug import augment as aug
from tdaug.data import SyntheticPhantomSpec, extract_slices, generate_phantom_dataset

p = argparse.ArgumentParser()
p.add_argument("--out", default="baselines.png")
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

pairs = generate_phantom_dataset(SyntheticPhantomSpec(), 2, seed=args.seed)
a, b = extract_slices(*pairs[0])[3], extract_slices(*pairs[1])[3]
rng = np.random.default_rng(args.seed)
sigma = 10.0 * 64 / 224  # same relative magnitude as sigma=10 at 224 px

samples = {
    "original": a,
    "flip": aug.apply_affine_op(a, "flip"),
    "rotate 45": aug.apply_affine_op(a, "rotate_multiple", 45.0),
    "scale 1.1": aug.apply_affine_op(a, "scale", 1.1),
    "elastic": aug.random_elastic(a, aug.ElasticAugConfig(sigma=sigma), rng),
    "contrast/brightness": aug.random_intensity(a, aug.IntensityAugConfig(), rng),
    "mixup": aug.mixup(a, b, aug.MixupConfig(), rng),
}

fig, ax = plt.subplots(2, len(samples), figsize=(2.2 * len(samples), 4.6))
for i, (name, s) in enumerate(samples.items()):
    ax[0, i].imshow(s.image, cmap="gray", vmin=-0.2, vmax=1.3)
    ax[1, i].imshow(s.label_onehot.argmax(-1), vmin=0, vmax=3)
    ax[0, i].set_title(name, fontsize=9)
    for r in range(2):
        ax[r, i].axis("off")
fig.tight_layout()
fig.savefig(args.out, dpi=80)
print("wrote", args.out)
