"""Compare augmentation policies on the phantom population.

For each seed, one labeled volume (a different sub-group per seed) trains a
segmenter under each policy; test Dice is then compared with a paired
Wilcoxon test.  The defaults mirror the desk-scale acceptance run and take
roughly 20 minutes per seed on one CPU thread.

    python demos/04_policy_comparison.py --seeds 0 1 --policies none Aff RD+RI GD+GI
"""

import argparse
import time

import numpy as np

from tdaug.evaluate import compare_policies, save_results
from tdaug.experiments import PhantomExperiment, desk_config
from tdaug.trainer import Pipeline

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[0])
p.add_argument("--policies", nargs="+", default=["none", "Aff", "RD+RI", "GD+GI"])
p.add_argument("--iters", type=int, default=2000)
p.add_argument("--out", default="policy_results.json")
args = p.parse_args()

exp = PhantomExperiment()
split = exp.split()
results = {pol: [] for pol in args.policies}
for seed in args.seeds:
    pipe = Pipeline(exp.training_data(seed, split=split), desk_config(seed=seed, total_iters=args.iters))
    for pol in args.policies:
        t = time.time()
        r = pipe.run(pol, replicate=seed)
        results[pol].append(r)
        print(f"seed {seed} {pol:>8}: mean DSC {r.mean():.4f} ({time.time() - t:.0f}s)")

save_results([r for rs in results.values() for r in rs], args.out)
for pol, rs in results.items():
    print(f"{pol:>8}: {np.mean([r.mean() for r in rs]):.4f}")
if "GD+GI" in results and "RD+RI" in results:
    c = compare_policies(results["GD+GI"], results["RD+RI"])
    print(f"GD+GI vs RD+RI: {c.mean_difference:+.4f}, p = {c.p_value:.3g} ({c.n_pairs} pairs)")
