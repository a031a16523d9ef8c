"""Command-line entry points.

A run directory collects everything one experiment produces::

    run/config.json  splits.json  losses.csv  val_trace.csv  report.json
    run/checkpoints/{pretrain,gen_v,gen_i,final}.ckpt
    run/samples/*.png
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from .data import (SyntheticPhantomSpec, generate_phantom_dataset, load_array_volume,
                   load_nifti_dataset, sample_labeled_subset, save_array_volume, build_split,
                   DatasetSplit, write_nifti_dataset)
from .evaluate import (build_report, compare_policies, evaluate_checkpoint, load_results,
                       save_results, summarize, write_dsc_csv)
from .networks import load_checkpoint, save_checkpoint
from .preprocess import PRESETS, PreprocessConfig, preprocess_pair
from .trainer import (LEARNED, POLICIES, LossLog, TrainConfig, TrainingData, final_retrain,
                      pretrain_segmenter, run_experiment_matrix, sample_augmented_set,
                      train_generator_jointly)

log = logging.getLogger("tdaug")

GEN_FILES = {"deform": "gen_v.ckpt", "intensity": "gen_i.ckpt"}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"file not found: {path}")


def load_run_config(args) -> dict:
    """Merge run/config.json with --config and --seed; persist the result."""
    run = Path(args.run) if getattr(args, "run", None) else None
    conf = {"train": {}, "data": {}}
    if run is not None and (run / "config.json").exists():
        conf = _load_json(run / "config.json")
    if getattr(args, "config", None):
        extra = _load_json(args.config)
        for section in ("train", "data"):
            conf.setdefault(section, {}).update(extra.get(section, {}))
    if getattr(args, "seed", None) is not None:
        conf["train"]["seed"] = args.seed
    train = conf["train"]
    if getattr(args, "rd_sigma", None) is not None or getattr(args, "rd_grid", None) is not None:
        el = dict(train.get("elastic", {}))
        if args.rd_sigma is not None:
            el["sigma"] = args.rd_sigma
        if args.rd_grid is not None:
            el["grid_size"] = [args.rd_grid, args.rd_grid, 2]
        train["elastic"] = el
    if getattr(args, "ri_contrast", None) is not None or \
            getattr(args, "ri_brightness", None) is not None:
        it = dict(train.get("intensity", {}))
        if args.ri_contrast is not None:
            it["contrast_range"] = list(args.ri_contrast)
        if args.ri_brightness is not None:
            it["brightness_range"] = list(args.ri_brightness)
        train["intensity"] = it
    if run is not None:
        if args.command == "make-split":
            run.mkdir(parents=True, exist_ok=True)
        elif not run.is_dir():
            raise CLIError(f"run directory {run} does not exist; start with make-split")
        (run / "config.json").write_text(json.dumps(conf, indent=2))
    return conf


def train_config(conf: dict, **overrides) -> TrainConfig:
    cfg = TrainConfig.from_dict(conf.get("train", {}))
    return cfg.replace(**overrides) if overrides else cfg


def _load_cache(cache_dir):
    cache_dir = Path(cache_dir)
    index = _load_json(cache_dir / "index.json")
    return [load_array_volume(cache_dir / sid) for sid in index["subjects"]]


def _load_split(run: Path, conf: dict) -> DatasetSplit:
    manifest = _load_json(run / "splits.json")
    vols = {img.subject_id: (img, lab) for img, lab in _load_cache(conf["data"]["cache_dir"])}
    pick = lambda ids: [vols[i] for i in ids]
    return DatasetSplit(pick(manifest["labeled_pool"]), pick(manifest["unlabeled"]),
                        pick(manifest["validation"]), pick(manifest["test"]),
                        seed=manifest["seed"], counts=manifest["counts"])


def _training_data(run: Path, conf: dict) -> TrainingData:
    split = _load_split(run, conf)
    d = conf["data"]
    subset = sample_labeled_subset(split, int(d.get("n_labeled", 1)), int(d.get("replicate", 0)))
    return TrainingData.from_split(split, subset, conf["train"].get("skip_empty_slices", False))


def _ckpt_dir(run: Path) -> Path:
    p = run / "checkpoints"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _append_losses(run: Path, losses: LossLog):
    path = run / "losses.csv"
    if path.exists():
        import csv
        with open(path, newline="") as fh:
            old = list(csv.DictReader(fh))
        losses.rows = old + losses.rows
    losses.write(path)


# ---------------------------------------------------------------------------
# commands


def cmd_make_phantoms(args, conf):
    spec = SyntheticPhantomSpec(image_size=args.image_size, depth=args.depth,
                                num_structures=args.num_structures)
    seed = conf["train"].get("seed", 0)
    pairs = generate_phantom_dataset(spec, args.n, seed)
    path = write_nifti_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} phantom volumes, manifest {path}")


def cmd_preprocess(args, conf):
    if args.resolution:
        cfg = PreprocessConfig(tuple(args.resolution), tuple(args.size or (224, 224)))
    else:
        cfg = PRESETS[args.preset]
    pairs = load_nifti_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for img, lab in pairs:
        p_img, p_lab = preprocess_pair(img, lab, cfg)
        save_array_volume(out / img.subject_id, p_img, p_lab,
                          original_spacing=list(img.spacing), original_shape=list(img.shape),
                          transform={"target_resolution": list(cfg.target_resolution),
                                     "target_size": list(cfg.target_size),
                                     "percentiles": [cfg.percentile_lo, cfg.percentile_hi]})
        ids.append(img.subject_id)
    (out / "index.json").write_text(json.dumps({"subjects": ids}, indent=2))
    print(f"preprocessed {len(ids)} volumes into {out}")


def cmd_make_split(args, conf):
    run = Path(args.run)
    d = conf["data"]
    if args.data:
        d["cache_dir"] = str(Path(args.data).resolve())
    if "cache_dir" not in d:
        raise CLIError("make-split needs --data <preprocessed dir> (or data.cache_dir in config)")
    for key, val in (("N_UL", args.n_ul), ("N_ts", args.n_ts), ("N_vl", args.n_vl)):
        if val is not None:
            d.setdefault("counts", {})[key] = val
    counts = {"N_UL": 25, "N_ts": 20, "N_vl": 2, **d.get("counts", {})}
    d["counts"] = counts
    (run / "config.json").write_text(json.dumps(conf, indent=2))
    split = build_split(_load_cache(d["cache_dir"]), counts, conf["train"].get("seed", 0))
    split.save(run / "splits.json")
    m = split.manifest()
    print(f"split: pool={len(m['labeled_pool'])} unlabeled={len(m['unlabeled'])} "
          f"validation={len(m['validation'])} test={len(m['test'])}")


def cmd_pretrain(args, conf):
    run = Path(args.run)
    data = _training_data(run, conf)
    cfg = train_config(conf, num_classes=data.num_classes)
    losses = LossLog()
    S = pretrain_segmenter(data, cfg, losses)
    save_checkpoint(S, _ckpt_dir(run) / "pretrain.ckpt", iters=cfg.pretrain_iters)
    _append_losses(run, losses)
    print(f"pretrained segmenter for {cfg.pretrain_iters} iterations")


def cmd_train_gen(args, conf):
    run = Path(args.run)
    data = _training_data(run, conf)
    cfg = train_config(conf, num_classes=data.num_classes)
    ckpt = _ckpt_dir(run) / "pretrain.ckpt"
    S = load_checkpoint(ckpt)[0] if ckpt.exists() else pretrain_segmenter(data, cfg)
    losses = LossLog()
    sel = train_generator_jointly(args.kind, data, cfg, S, losses)
    save_checkpoint(sel.generator, _ckpt_dir(run) / GEN_FILES[args.kind],
                    best_iter=sel.best_iter, best_val_dsc=sel.best_val_dsc, mode=cfg.mode)
    sel.write_trace(run / "val_trace.csv")
    sel.write_trace(run / f"val_trace_{args.kind}.csv")
    _append_losses(run, losses)
    print(f"{args.kind} generator: best iteration {sel.best_iter}, val DSC {sel.best_val_dsc:.4f}")


def _load_generators(run: Path, kinds):
    gens = {}
    for kind in kinds:
        path = run / "checkpoints" / GEN_FILES[kind]
        if not path.exists():
            raise CLIError(f"missing {path}; run `train-gen --kind {kind}` first")
        gens[kind] = load_checkpoint(path)[0].eval()
    return gens


def cmd_sample_aug(args, conf):
    run = Path(args.run)
    data = _training_data(run, conf)
    kinds = [k for k in ("deform", "intensity") if (run / "checkpoints" / GEN_FILES[k]).exists()]
    if not kinds:
        raise CLIError("no trained generators in run directory")
    gens = _load_generators(run, kinds)
    rng = np.random.default_rng(conf["train"].get("seed", 0))
    sets = sample_augmented_set(gens.get("deform"), gens.get("intensity"), data.x_l, data.y_l,
                                args.n, rng, train_config(conf).z_dim)
    out = run / "samples"
    out.mkdir(exist_ok=True)
    np.savez_compressed(out / "augmented.npz",
                        **{f"{k}_{part}": v[i] for k, v in sets.items()
                           for i, part in enumerate(("x", "y"))})
    from .plots import save_sample_grid
    for k, (x, y) in sets.items():
        if len(x):
            save_sample_grid(out / f"{k}.png", x, y, title=k)
    print(f"sampled {args.n} pairs per source: {sorted(sets)}")


def cmd_train_seg(args, conf):
    run = Path(args.run)
    data = _training_data(run, conf)
    cfg = train_config(conf, num_classes=data.num_classes, policy=args.policy)
    gens = _load_generators(run, LEARNED.get(args.policy, ()))
    losses = LossLog()
    S, trace = final_retrain(data, cfg, gens, losses)
    tag = args.policy.replace("+", "_")
    for name in ("final.ckpt", f"final_{tag}.ckpt"):
        save_checkpoint(S, _ckpt_dir(run) / name, policy=args.policy)
    _append_losses(run, losses)
    best = max((d for _, d in trace), default=float("nan"))
    print(f"trained segmenter with policy {args.policy}; best val DSC {best:.4f}")


def cmd_evaluate(args, conf):
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / "final.ckpt"
    if not ckpt.exists():
        raise CLIError(f"missing checkpoint {ckpt}")
    S, meta = load_checkpoint(ckpt)
    split = _load_split(run, conf)
    res = evaluate_checkpoint(S, split.test, meta.get("policy", ""),
                              config_hash=train_config(conf).digest())
    save_results([res], run / "results.json")
    write_dsc_csv([res], run / "dsc.csv")
    report = build_report(res.policy, [res])
    (run / "report.json").write_text(json.dumps(report, indent=2))
    for s in report["structures"]:
        print(f"{s['name']}: mean DSC {s['mean']:.4f} (std {s['std']:.4f})")


def cmd_ablate(args, conf):
    run = Path(args.run)
    cfg = train_config(conf)
    vols = _load_cache(conf["data"]["cache_dir"])
    cfg = cfg.replace(num_classes=vols[0][1].num_classes)
    counts = conf["data"].get("counts", {"N_UL": 25, "N_ts": 20, "N_vl": 2})
    overrides = conf.get("ablation", {})
    policies = args.policies.split(",") if args.policies else ["GD+GI"]
    results = run_experiment_matrix(cfg, vols, counts, split_seed=cfg.seed,
                                    n_labeled=int(conf["data"].get("n_labeled", 1)),
                                    replicates=args.replicates, restarts=args.restarts,
                                    policies=policies, ablation=args.which, overrides=overrides)
    save_results(results, run / f"ablation_{args.which}.json")
    write_dsc_csv(results, run / f"ablation_{args.which}.csv")
    groups = {}
    for r in results:
        groups.setdefault(r.group, []).append(r)
    summary = {g: {k: v["mean"] for k, v in summarize(rs).items()} for g, rs in groups.items()}
    (run / f"ablation_{args.which}_summary.json").write_text(json.dumps(summary, indent=2))
    for g, s in summary.items():
        print(g, " ".join(f"{k}={v:.4f}" for k, v in s.items()))
    failed = sum(r.failed for r in results)
    print(f"{len(groups)} groups, {len(results)} runs, {failed} failed")


def cmd_compare(args, conf):
    a, b = load_results(args.a), load_results(args.b)
    rep = compare_policies(a, b, per_subject_mean=args.per_subject_mean)
    out = {"p_value": rep.p_value, "n_pairs": rep.n_pairs, "mean_difference": rep.mean_difference,
           "structures": rep.structures, "per_structure_p": rep.per_structure_p}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_dump_samples(args, conf):
    from .plots import save_field_panel, save_prediction_panel

    run = Path(args.run)
    data = _training_data(run, conf)
    out = run / "samples"
    out.mkdir(exist_ok=True)
    kinds = [k for k in ("deform", "intensity") if (run / "checkpoints" / GEN_FILES[k]).exists()]
    gens = _load_generators(run, kinds)
    rng = np.random.default_rng(conf["train"].get("seed", 0))
    z_dim = train_config(conf).z_dim
    import torch
    x = torch.from_numpy(data.x_l[: args.n])
    for kind, G in gens.items():
        with torch.no_grad():
            z = torch.from_numpy(rng.standard_normal((len(x), z_dim))).float()
            field = G(x, z).numpy()
        save_field_panel(out / f"fields_{kind}.png", data.x_l[: args.n], field, kind)
    # random-elastic counterpart for side-by-side inspection
    cfg = train_config(conf)
    rd = np.stack([aug.random_elastic_field(x.shape[-2:], cfg.elastic, rng).transpose(2, 0, 1)
                   for _ in range(len(x))])
    save_field_panel(out / "fields_random_elastic.png", data.x_l[: args.n], rd, "deform")
    final = run / "checkpoints" / "final.ckpt"
    if final.exists():
        S = load_checkpoint(final)[0]
        save_prediction_panel(out / "predictions.png", S, data.test[: 2])
    print(f"wrote sample figures to {out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with 'train' and 'data' sections")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--rd-sigma", type=float, help="random elastic control-point std (pixels)")
    sweep.add_argument("--rd-grid", type=int, help="random elastic control grid size per axis")
    sweep.add_argument("--ri-contrast", type=float, nargs=2, metavar=("LO", "HI"))
    sweep.add_argument("--ri-brightness", type=float, nargs=2, metavar=("LO", "HI"))

    p = argparse.ArgumentParser(prog="tdaug", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, helptext, parents=(common,), run=True):
        sp = sub.add_parser(name, parents=list(parents), help=helptext)
        if run:
            sp.add_argument("--run", required=True, help="run directory")
        sp.set_defaults(func=func)
        return sp

    sp = add("make-phantoms", cmd_make_phantoms, "write a synthetic phantom dataset as NIfTI", run=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--depth", type=int, default=8)
    sp.add_argument("--num-structures", type=int, default=3)

    sp = add("preprocess", cmd_preprocess, "normalize and resample NIfTI volumes", run=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS), default="cardiac")
    sp.add_argument("--resolution", type=float, nargs=2)
    sp.add_argument("--size", type=int, nargs=2)

    sp = add("make-split", cmd_make_split, "draw labeled-pool/unlabeled/validation/test sets")
    sp.add_argument("--data", help="preprocessed cache directory")
    sp.add_argument("--n-ul", type=int)
    sp.add_argument("--n-ts", type=int)
    sp.add_argument("--n-vl", type=int)

    add("pretrain", cmd_pretrain, "pre-train the segmenter on labeled data")
    sp = add("train-gen", cmd_train_gen, "jointly train a deformation or intensity generator")
    sp.add_argument("--kind", choices=("deform", "intensity"), required=True)
    sp = add("sample-aug", cmd_sample_aug, "sample augmented pairs from trained generators")
    sp.add_argument("--n", type=int, default=8)
    sp = add("train-seg", cmd_train_seg, "train a segmenter from scratch with a policy",
             parents=(common, sweep))
    sp.add_argument("--policy", required=True, choices=POLICIES)
    sp = add("evaluate", cmd_evaluate, "Dice of a checkpoint on the test set")
    sp.add_argument("--checkpoint")
    sp = add("ablate", cmd_ablate, "run an ablation sweep", parents=(common, sweep))
    sp.add_argument("--which", choices=list("ABCDEF"), required=True)
    sp.add_argument("--replicates", type=int, default=5)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--policies", help="comma-separated policies (default GD+GI)")
    sp = add("compare", cmd_compare, "paired Wilcoxon comparison of two result files", run=False)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--per-subject-mean", action="store_true")
    sp.add_argument("--out")
    sp = add("dump-samples", cmd_dump_samples, "write field and prediction figures")
    sp.add_argument("--n", type=int, default=4)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = load_run_config(args)
        args.func(args, conf)
    except (CLIError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
