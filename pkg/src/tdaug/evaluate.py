"""Dice scoring, per-subject reports and paired policy comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


@torch.no_grad()
def predict_volume(model: torch.nn.Module, voxels: np.ndarray, batch: int = 32,
                   device="cpu") -> np.ndarray:
    """Slice-wise argmax labels for an (H, W, D) volume."""
    was_training = model.training
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(voxels.transpose(2, 0, 1)[:, None])).float()
    preds = []
    for i in range(0, x.shape[0], batch):
        preds.append(model(x[i:i + batch].to(device)).argmax(1).cpu())
    model.train(was_training)
    return torch.cat(preds).numpy().transpose(1, 2, 0)


def volume_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> list:
    return [dice(pred == c, gt == c) for c in range(1, num_classes)]


def mean_foreground_dice(model, pairs, device="cpu") -> float:
    scores = []
    for img, lab in pairs:
        pred = predict_volume(model, img.voxels, device=device)
        scores.extend(volume_dice(pred, lab.labels, lab.num_classes))
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class RunResult:
    policy: str
    config_hash: str = ""
    dsc: dict = field(default_factory=dict)  # (subject_id, structure) -> float
    replicate: int = 0
    restart: int = 0
    group: str = ""
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def failed(self):
        return self.error is not None

    def mean(self) -> float:
        return float(np.mean(list(self.dsc.values()))) if self.dsc else float("nan")

    def to_json(self) -> dict:
        d = asdict(self)
        d["dsc"] = [{"subject": s, "structure": k, "dsc": v} for (s, k), v in sorted(self.dsc.items())]
        return d

    @classmethod
    def from_json(cls, d) -> "RunResult":
        d = dict(d)
        d["dsc"] = {(r["subject"], r["structure"]): r["dsc"] for r in d.get("dsc", [])}
        return cls(**d)


def evaluate_checkpoint(model, test_pairs, policy: str = "", structure_names: Sequence[str] = (),
                        device="cpu", **run_info) -> RunResult:
    res = RunResult(policy=policy, **run_info)
    for img, lab in test_pairs:
        n_out = model.spec.num_classes
        if n_out != lab.num_classes:
            raise ValueError(f"model predicts {n_out} classes, labels have {lab.num_classes}")
        names = list(structure_names or img.structure_names) or \
            [f"class{c}" for c in range(1, lab.num_classes)]
        pred = predict_volume(model, img.voxels, device=device)
        for name, d in zip(names, volume_dice(pred, lab.labels, lab.num_classes)):
            res.dsc[(img.subject_id, name)] = d
    return res


def save_results(results: Sequence[RunResult], path):
    Path(path).write_text(json.dumps([r.to_json() for r in results], indent=2))


def load_results(path) -> list:
    return [RunResult.from_json(d) for d in json.loads(Path(path).read_text())]


def _structures(results):
    return sorted({k for r in results for (_, k) in r.dsc})


def summarize(results: Sequence[RunResult]) -> dict:
    """Per-structure mean/std over all runs and per-subject means."""
    ok = [r for r in results if not r.failed]
    out = {}
    for name in _structures(ok):
        vals = [v for r in ok for (s, k), v in r.dsc.items() if k == name]
        per_subject = {}
        for r in ok:
            for (s, k), v in r.dsc.items():
                if k == name:
                    per_subject.setdefault(s, []).append(v)
        out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                     "per_subject": {s: float(np.mean(v)) for s, v in sorted(per_subject.items())}}
    return out


def wilcoxon_p(diffs) -> float:
    """Two-sided signed-rank p-value; 1.0 when every difference is zero."""
    d = np.asarray(diffs, float)
    if d.size == 0 or np.all(d == 0):
        return 1.0
    return float(stats.wilcoxon(d, zero_method="wilcox", alternative="two-sided").pvalue)


@dataclass
class ComparisonReport:
    structures: dict
    p_value: float
    n_pairs: int
    mean_difference: float
    per_structure_p: dict = field(default_factory=dict)


def _pair_key(r: RunResult, s, k, per_subject_mean):
    return (s, k) if per_subject_mean else (s, k, r.replicate, r.restart)


def _paired_values(results, per_subject_mean):
    vals = {}
    for r in results:
        if r.failed:
            continue
        for (s, k), v in r.dsc.items():
            vals.setdefault(_pair_key(r, s, k, per_subject_mean), []).append(v)
    return {key: float(np.mean(v)) for key, v in vals.items()}


def compare_policies(a: Sequence[RunResult], b: Sequence[RunResult],
                     per_subject_mean: bool = False) -> ComparisonReport:
    """Paired Wilcoxon signed-rank test of policy ``a`` against ``b``.

    Pairs are matched on (subject, structure, replicate, restart), or on
    (subject, structure) after averaging runs when ``per_subject_mean``.
    """
    va, vb = _paired_values(a, per_subject_mean), _paired_values(b, per_subject_mean)
    if set(va) != set(vb):
        missing = sorted(set(va) ^ set(vb))[:5]
        raise ValueError(f"unmatched pairing between policies, e.g. {missing}")
    keys = sorted(va)
    diffs = np.array([va[k] - vb[k] for k in keys])
    structures, per_p = {}, {}
    for name in sorted({k[1] for k in keys}):
        ka = [k for k in keys if k[1] == name]
        xa = np.array([va[k] for k in ka])
        xb = np.array([vb[k] for k in ka])
        structures[name] = {"a_mean": float(xa.mean()), "a_std": float(xa.std()),
                            "b_mean": float(xb.mean()), "b_std": float(xb.std())}
        per_p[name] = wilcoxon_p(xa - xb)
    return ComparisonReport(structures, wilcoxon_p(diffs), len(keys),
                            float(diffs.mean()) if len(keys) else 0.0, per_p)


def build_report(policy: str, results: Sequence[RunResult],
                 baselines: dict | None = None) -> dict:
    summary = summarize(results)
    report = {"policy": policy,
              "structures": [{"name": k, **v} for k, v in summary.items()],
              "comparisons": []}
    for name, other in (baselines or {}).items():
        cmp = compare_policies(results, other)
        report["comparisons"].append({"baseline": name, "p_value": cmp.p_value,
                                      "mean_difference": cmp.mean_difference})
    return report


def write_dsc_csv(results: Sequence[RunResult], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "group", "replicate", "restart", "subject", "structure", "dsc"])
        for r in results:
            for (s, k), v in sorted(r.dsc.items()):
                w.writerow([r.policy, r.group, r.replicate, r.restart, s, k, f"{v:.6f}"])
