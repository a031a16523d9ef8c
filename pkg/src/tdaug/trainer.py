"""Training pipeline: pre-training, joint generator training, sampling and final retraining."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import augment as aug
from .data import (DatasetSplit, SliceSample, build_split, derive_seed, extract_slices,
                   restrict_unlabeled, sample_labeled_subset, stack_slices)
from .evaluate import RunResult, evaluate_checkpoint, mean_foreground_dice
from .losses import (LossWeights, adversarial_losses, default_class_weights,
                     generator_adversarial_loss, large_deviation_loss, regularization_loss,
                     task_driven_objective, weighted_cross_entropy)
from .networks import build_discriminator, build_generator, build_segmenter
from .warp import warp, warp_labels

log = logging.getLogger(__name__)

POLICIES = ("none", "Aff", "RD", "RI", "RD+RI", "GD", "GI", "GD+GI", "Mixup", "GD+GI+Mixup")
LEARNED = {"GD": ("deform",), "GI": ("intensity",), "GD+GI": ("deform", "intensity"),
           "GD+GI+Mixup": ("deform", "intensity")}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    total_iters: int = 10000
    gen_iters: int | None = None  # defaults to total_iters
    pretrain_iters: int = 1000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    val_eval_stride: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "joint"  # or "independent"
    selection: str = "validation"  # or "fixed": keep the last iterate
    policy: str = "GD+GI"
    pretrain_affine: bool = False
    image_size: int = 224
    num_classes: int = 4
    seg_widths: tuple = (16, 32, 64, 128)
    gen_image_widths: tuple = (16, 32)
    gen_z_widths: tuple = (16, 16, 16, 32)
    gen_common_widths: tuple = (32, 32, 32)
    z_dim: int = 100
    disc_widths: tuple = (32, 64, 128, 256, 512)
    disc_fc_widths: tuple = (256, 64)
    affine: aug.AffineAugConfig = field(default_factory=aug.AffineAugConfig)
    elastic: aug.ElasticAugConfig = field(default_factory=aug.ElasticAugConfig)
    intensity: aug.IntensityAugConfig = field(default_factory=aug.IntensityAugConfig)
    mixup: aug.MixupConfig = field(default_factory=aug.MixupConfig)
    augment_mode: str = "on_the_fly"  # or "fixed_pool"
    pool_size: int = 200
    skip_empty_slices: bool = False
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.mode not in ("joint", "independent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.selection not in ("validation", "fixed"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")

    @property
    def generator_iters(self):
        return self.total_iters if self.gen_iters is None else self.gen_iters

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "affine": aug.AffineAugConfig,
                  "elastic": aug.ElasticAugConfig, "intensity": aug.IntensityAugConfig,
                  "mixup": aug.MixupConfig}
        for k, c in nested.items():
            if k in d and isinstance(d[k], dict):
                d[k] = c(**{kk: tuple(v) if isinstance(v, list) else v for kk, v in d[k].items()})
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas))


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _check_finite(loss, what, it):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what} loss became {loss.item()} at iteration {it}")


def _seg_loss(S, x, y, weights, what="segmentation", it=-1):
    logits = S(x)
    if not torch.isfinite(logits).all():
        raise TrainingDiverged(f"{what}: non-finite segmenter logits at iteration {it}")
    return weighted_cross_entropy(logits, y, weights)


def new_segmenter(cfg: TrainConfig):
    return build_segmenter(cfg.image_size, cfg.num_classes, widths=tuple(cfg.seg_widths))


def new_generator(kind: str, cfg: TrainConfig):
    return build_generator(kind, cfg.image_size, z_dim=cfg.z_dim,
                           image_widths=tuple(cfg.gen_image_widths),
                           z_widths=tuple(cfg.gen_z_widths),
                           common_widths=tuple(cfg.gen_common_widths))


def new_discriminator(cfg: TrainConfig):
    return build_discriminator(cfg.image_size, widths=tuple(cfg.disc_widths),
                               fc_widths=tuple(cfg.disc_fc_widths))


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingData:
    labeled: list  # SliceSample
    unlabeled: np.ndarray  # (M,1,H,W)
    validation: list  # (ImageVolume, LabelVolume)
    test: list
    structure_names: tuple = ()

    def __post_init__(self):
        self.x_l, self.y_l = stack_slices(self.labeled)

    @property
    def num_classes(self):
        return self.y_l.shape[1]

    @classmethod
    def from_split(cls, split: DatasetSplit, labeled_pairs: Sequence, skip_empty: bool = False):
        labeled = [s for img, lab in labeled_pairs for s in extract_slices(img, lab, skip_empty)]
        if not labeled:
            raise ValueError("no labeled slices")
        ul = [img.voxels.transpose(2, 0, 1) for img, _ in split.unlabeled]
        unlabeled = np.concatenate(ul)[:, None] if ul else np.zeros((0, 1) + labeled[0].image.shape,
                                                                    np.float32)
        names = labeled_pairs[0][0].structure_names
        return cls(labeled, np.ascontiguousarray(unlabeled, dtype=np.float32),
                   list(split.validation), list(split.test), names)


def weights_for(cfg: TrainConfig) -> LossWeights:
    w = cfg.weights
    if len(w.class_weights) != cfg.num_classes:
        w = dataclasses.replace(w, class_weights=default_class_weights(cfg.num_classes))
    return w


class LossLog:
    """Per-iteration loss rows; written as CSV."""

    FIELDS = ("phase", "iter", "L_S", "L_adv_D", "L_adv_G", "L_LD", "L_reg", "val_DSC")

    def __init__(self):
        self.rows = []

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in self.FIELDS})

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            w.writerows(self.rows)


def _to_device(a, device):
    return torch.from_numpy(np.ascontiguousarray(a)).float().to(device)


# ---------------------------------------------------------------------------
# stage 0: supervised pre-training


def pretrain_segmenter(data: TrainingData, cfg: TrainConfig, losses: LossLog | None = None):
    """Weighted-CE training of a fresh segmenter on the labeled slices only."""
    rng = _seed_all(derive_seed("pretrain", cfg.seed))
    S = new_segmenter(cfg).to(cfg.device)
    if cfg.pretrain_iters == 0:
        return S
    w = weights_for(cfg).class_weights
    opt = _adam(S.parameters(), cfg)
    S.train()
    for it in range(cfg.pretrain_iters):
        idx = rng.integers(len(data.labeled), size=cfg.batch_size)
        if cfg.pretrain_affine:
            batch = [aug.random_affine(data.labeled[i], cfg.affine, rng) for i in idx]
            x, y = stack_slices(batch)
        else:
            x, y = data.x_l[idx], data.y_l[idx]
        loss = _seg_loss(S, _to_device(x, cfg.device), _to_device(y, cfg.device), w,
                         "pre-training", it)
        _check_finite(loss, "pre-training segmentation", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.add(phase="pretrain", iter=it, L_S=loss.item())
    return S


# ---------------------------------------------------------------------------
# stage 1: joint training of (S, G, D)


def apply_generator(G, kind: str, x, y, z):
    """Return the transformed (image, label) pair and the raw field."""
    field_ = G(x, z)
    if kind == "deform":
        return warp(x, field_), warp_labels(y, field_), field_
    return x + field_, y, field_


@dataclass
class GeneratorSelection:
    kind: str
    generator: torch.nn.Module
    best_iter: int
    best_val_dsc: float
    trace: list = field(default_factory=list)  # (iter, val_dsc)
    segmenter: torch.nn.Module | None = None

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "val_DSC"])
            for it, d in self.trace:
                w.writerow([it, f"{d:.6f}"])


class JointTrainer:
    """One (S, G, D) triple and its three optimizers.

    Each iteration runs a discriminator step, a generator step and a
    segmenter step, in that order; every step mutates only its own network.
    """

    def __init__(self, kind: str, data: TrainingData, cfg: TrainConfig, segmenter):
        if len(data.unlabeled) == 0:
            raise ValueError("joint generator training needs at least one unlabeled volume")
        self.kind, self.data, self.cfg = kind, data, cfg
        self.rng = _seed_all(derive_seed("joint", kind, cfg.seed))
        self.G = new_generator(kind, cfg).to(cfg.device)
        self.D = new_discriminator(cfg).to(cfg.device)
        self.S = copy.deepcopy(segmenter).to(cfg.device)
        self.opt_G = _adam(self.G.parameters(), cfg)
        self.opt_D = _adam(self.D.parameters(), cfg)
        self.opt_S = _adam(self.S.parameters(), cfg)
        self.weights = weights_for(cfg)
        self.joint = cfg.mode == "joint"
        for m in (self.G, self.D, self.S):
            m.train()

    def draw_batch(self):
        half = self.cfg.batch_size // 2
        dev = self.cfg.device
        li = self.rng.integers(len(self.data.labeled), size=half)
        ui = self.rng.integers(len(self.data.unlabeled), size=self.cfg.batch_size)
        z = torch.from_numpy(self.rng.standard_normal((half, self.cfg.z_dim))).float().to(dev)
        return (_to_device(self.data.x_l[li], dev), _to_device(self.data.y_l[li], dev),
                _to_device(self.data.unlabeled[ui], dev), z)

    def d_step(self, x_l, y_l, x_ul, z):
        with torch.no_grad():
            x_g, _, _ = apply_generator(self.G, self.kind, x_l, y_l, z)
        loss_d, _ = adversarial_losses(self.D(x_ul), self.D(x_g))
        self.opt_D.zero_grad()
        loss_d.backward()
        self.opt_D.step()
        return loss_d

    def g_step(self, x_l, y_l, z):
        w = self.weights
        x_g, y_g, field_ = apply_generator(self.G, self.kind, x_l, y_l, z)
        adv_g = generator_adversarial_loss(self.D(x_g), w.saturating_gan)
        ld = large_deviation_loss(field_, w.ld_reduction)
        reg = regularization_loss(adv_g, ld, w)
        if self.joint:
            seg = _seg_loss(self.S, torch.cat([x_l, x_g]), torch.cat([y_l, y_g]),
                            w.class_weights, "generator step")
            obj = task_driven_objective(seg, reg)
        else:
            seg = torch.zeros(())
            obj = reg
        self.opt_G.zero_grad()
        if obj.requires_grad:
            obj.backward()
            self.opt_G.step()
        self.opt_G.zero_grad()
        self.opt_D.zero_grad()
        self.opt_S.zero_grad()
        return dict(obj=obj, seg=seg, adv_g=adv_g, ld=ld, reg=reg,
                    x_g=x_g.detach(), y_g=y_g.detach())

    def s_step(self, x_l, y_l, x_g, y_g):
        loss = _seg_loss(self.S, torch.cat([x_l, x_g]), torch.cat([y_l, y_g]),
                         self.weights.class_weights, "segmenter step")
        self.opt_S.zero_grad()
        loss.backward()
        self.opt_S.step()
        return loss

    def iteration(self, it: int):
        x_l, y_l, x_ul, z = self.draw_batch()
        loss_d = self.d_step(x_l, y_l, x_ul, z)
        _check_finite(loss_d, "discriminator", it)
        g = self.g_step(x_l, y_l, z)
        _check_finite(g["obj"], "generator", it)
        row = dict(L_adv_D=loss_d.item(), L_adv_G=g["adv_g"].item(), L_LD=g["ld"].item(),
                   L_reg=g["reg"].item(), L_S=g["seg"].item())
        if self.joint:
            loss_s = self.s_step(x_l, y_l, g["x_g"], g["y_g"])
            _check_finite(loss_s, "segmentation", it)
            row["L_S"] = loss_s.item()
        return row


def train_generator_jointly(kind: str, data: TrainingData, cfg: TrainConfig, segmenter,
                            losses: LossLog | None = None) -> GeneratorSelection:
    """Train (S, G, D) for ``cfg.generator_iters`` and pick the generator to keep.

    With validation selection the generator from the iteration with the best
    mean foreground validation Dice is returned.  In independent mode the
    segmenter never changes, so the last iterate is kept instead.
    """
    trainer = JointTrainer(kind, data, cfg, segmenter)
    use_val = cfg.selection == "validation" and cfg.mode == "joint" and data.validation
    best = (-1.0, -1)
    best_state = copy.deepcopy(trainer.G.state_dict())
    best_S = None
    trace = []
    for it in range(cfg.generator_iters):
        row = trainer.iteration(it)
        if use_val and ((it + 1) % cfg.val_eval_stride == 0 or it + 1 == cfg.generator_iters):
            dsc = mean_foreground_dice(trainer.S, data.validation, cfg.device)
            trace.append((it, dsc))
            row["val_DSC"] = dsc
            if dsc > best[0]:
                best = (dsc, it)
                best_state = copy.deepcopy(trainer.G.state_dict())
                best_S = copy.deepcopy(trainer.S.state_dict())
        if losses is not None:
            losses.add(phase=f"gen_{kind}", iter=it, **row)
    if not use_val:
        best_state = copy.deepcopy(trainer.G.state_dict())
        best_S = copy.deepcopy(trainer.S.state_dict())
        dsc = mean_foreground_dice(trainer.S, data.validation, cfg.device) if data.validation else 0.0
        best = (dsc, cfg.generator_iters - 1)
        trace.append((best[1], dsc))
    trainer.G.load_state_dict(best_state)
    trainer.G.eval()
    trainer.S.load_state_dict(best_S)
    return GeneratorSelection(kind, trainer.G, best[1], max(0.0, best[0]), trace, trainer.S)


# ---------------------------------------------------------------------------
# stage 2: sampling


@torch.no_grad()
def _generate(G, kind, x, y, gen: torch.Generator, z_dim: int):
    z = torch.randn(x.shape[0], z_dim, generator=gen).to(x.device)
    x_g, y_g, _ = apply_generator(G, kind, x, y, z)
    return x_g, y_g


@torch.no_grad()
def sample_augmented_set(G_V, G_I, x_l, y_l, n_per_source: int, rng: np.random.Generator,
                         z_dim: int = 100) -> dict:
    """Draw ``n_per_source`` pairs from G_V, G_I and G_I applied after G_V.

    Returns numpy arrays keyed ``GV``, ``GI`` and ``GVI``; GVI reuses the GV
    draws, so its labels are the GV labels.
    """
    x_l = torch.as_tensor(x_l).float()
    y_l = torch.as_tensor(y_l).float()
    C = y_l.shape[1]
    empty = (np.zeros((0,) + tuple(x_l.shape[1:]), np.float32),
             np.zeros((0, C) + tuple(x_l.shape[2:]), np.float32))
    if n_per_source == 0:
        return {"GV": empty, "GI": empty, "GVI": empty}
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    idx = torch.from_numpy(rng.integers(len(x_l), size=n_per_source))
    out = {}
    for m in (G_V, G_I):
        if m is not None:
            m.eval()
    dev = next(G_V.parameters()).device if G_V is not None else next(G_I.parameters()).device
    xb, yb = x_l[idx].to(dev), y_l[idx].to(dev)
    if G_V is not None:
        xv, yv = _generate(G_V, "deform", xb, yb, gen, z_dim)
        out["GV"] = (xv.cpu().numpy(), yv.cpu().numpy())
    if G_I is not None:
        xi, yi = _generate(G_I, "intensity", xb, yb, gen, z_dim)
        out["GI"] = (xi.cpu().numpy(), yi.cpu().numpy())
    if G_V is not None and G_I is not None:
        xvi, yvi = _generate(G_I, "intensity", xv, yv, gen, z_dim)
        out["GVI"] = (xvi.cpu().numpy(), yvi.cpu().numpy())
    return out


# ---------------------------------------------------------------------------
# stage 3: final retraining


class BatchComposer:
    """Builds final-training batches: half random-affine labeled data, half policy samples.

    ``none`` uses raw labeled slices for the whole batch and ``Aff`` uses
    affine samples for the whole batch.
    """

    def __init__(self, data: TrainingData, cfg: TrainConfig, rng: np.random.Generator,
                 generators: dict | None = None):
        self.data, self.cfg, self.rng = data, cfg, rng
        self.policy = cfg.policy
        gens = generators or {}
        self.G_V, self.G_I = gens.get("deform"), gens.get("intensity")
        for kind in LEARNED.get(self.policy, ()):
            if gens.get(kind) is None:
                raise ValueError(f"policy {self.policy} needs a trained {kind} generator")
        self.torch_gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
        self.pool = None
        if cfg.augment_mode == "fixed_pool" and self.policy in LEARNED:
            self.pool = sample_augmented_set(self.G_V, self.G_I, data.x_l, data.y_l,
                                             cfg.pool_size, rng, cfg.z_dim)
        elif cfg.augment_mode not in ("on_the_fly", "fixed_pool"):
            raise ValueError(f"unknown augment_mode {cfg.augment_mode!r}")

    def _labeled(self):
        return self.data.labeled[self.rng.integers(len(self.data.labeled))]

    def _affine(self):
        return aug.random_affine(self._labeled(), self.cfg.affine, self.rng)

    def _classic(self, which):
        s = self._labeled()
        if "RD" in which:
            s = aug.random_elastic(s, self.cfg.elastic, self.rng)
        if "RI" in which:
            s = aug.random_intensity(s, self.cfg.intensity, self.rng)
        return s

    def _learned(self, source, n):
        """n samples from GV / GI / GVI as SliceSamples."""
        if n == 0:
            return []
        if self.pool is not None:
            xs, ys = self.pool[source]
            idx = self.rng.integers(len(xs), size=n)
            x, y = xs[idx], ys[idx]
        else:
            idx = self.rng.integers(len(self.data.labeled), size=n)
            dev = next((self.G_V or self.G_I).parameters()).device
            xb = torch.from_numpy(self.data.x_l[idx]).to(dev)
            yb = torch.from_numpy(self.data.y_l[idx]).to(dev)
            if source in ("GV", "GVI"):
                xb, yb = _generate(self.G_V, "deform", xb, yb, self.torch_gen, self.cfg.z_dim)
            if source in ("GI", "GVI"):
                xb, yb = _generate(self.G_I, "intensity", xb, yb, self.torch_gen, self.cfg.z_dim)
            x, y = xb.cpu().numpy(), yb.cpu().numpy()
        return [SliceSample(x[i, 0], y[i].transpose(1, 2, 0)) for i in range(n)]

    def _generated_sources(self):
        return [s for s, g in (("GV", self.G_V), ("GI", self.G_I)) if g is not None] + \
            (["GVI"] if self.G_V is not None and self.G_I is not None else [])

    def _draw_sources(self, choices, n):
        return [choices[i] for i in self.rng.integers(len(choices), size=n)]

    def _materialize(self, sources):
        """Turn a list of source tags into samples, batching generator calls."""
        out = [None] * len(sources)
        for tag in set(sources):
            pos = [i for i, s in enumerate(sources) if s == tag]
            if tag in ("GV", "GI", "GVI"):
                samples = self._learned(tag, len(pos))
            elif tag == "L":
                samples = [self._labeled() for _ in pos]
            elif tag == "Aff":
                samples = [self._affine() for _ in pos]
            else:
                samples = [self._classic(tag) for _ in pos]
            for i, s in zip(pos, samples):
                out[i] = s
        return out

    def _policy_half(self, n):
        p = self.policy
        if p == "RD":
            tags = ["RD"] * n
        elif p == "RI":
            tags = ["RI"] * n
        elif p == "RD+RI":
            tags = self._draw_sources(["RD", "RI", "RD+RI"], n)
        elif p == "GD":
            tags = ["GV"] * n
        elif p == "GI":
            tags = ["GI"] * n
        elif p == "GD+GI":
            tags = self._draw_sources(["GV", "GI", "GVI"], n)
        elif p in ("Mixup", "GD+GI+Mixup"):
            pool = ["L", "Aff"] + (self._generated_sources() if p == "GD+GI+Mixup" else [])
            a = self._materialize(self._draw_sources(pool, n))
            b = self._materialize(self._draw_sources(pool, n))
            return [aug.mixup(s, t, self.cfg.mixup, self.rng) for s, t in zip(a, b)], [p] * n
        else:
            raise ValueError(f"unknown policy {p!r}")
        return self._materialize(tags), tags

    def sample(self):
        """Return (x, y, sources) for one batch."""
        B = self.cfg.batch_size
        if self.policy == "none":
            tags = ["L"] * B
            samples = self._materialize(tags)
        elif self.policy == "Aff":
            tags = ["Aff"] * B
            samples = self._materialize(tags)
        else:
            half = B // 2
            first = self._materialize(["Aff"] * half)
            second, tags2 = self._policy_half(B - half)
            samples, tags = first + second, ["Aff"] * half + list(tags2)
        x, y = stack_slices(samples)
        return x, y, tags


def final_retrain(data: TrainingData, cfg: TrainConfig, generators: dict | None = None,
                  losses: LossLog | None = None):
    """Train a freshly initialised segmenter under ``cfg.policy``.

    Returns ``(segmenter, trace)``; the segmenter carries the weights from the
    iteration with the best validation Dice (or the last iteration when there
    is no validation data or selection is fixed).
    """
    rng = _seed_all(derive_seed("final", cfg.policy, cfg.seed))
    composer = BatchComposer(data, cfg, rng, generators)
    S = new_segmenter(cfg).to(cfg.device)
    S.train()
    opt = _adam(S.parameters(), cfg)
    w = weights_for(cfg).class_weights
    use_val = cfg.selection == "validation" and bool(data.validation)
    best, best_state, trace = (-1.0, -1), None, []
    for it in range(cfg.total_iters):
        x, y, _ = composer.sample()
        loss = _seg_loss(S, _to_device(x, cfg.device), _to_device(y, cfg.device), w,
                         "final training", it)
        _check_finite(loss, "segmentation", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = dict(L_S=loss.item())
        if use_val and ((it + 1) % cfg.val_eval_stride == 0 or it + 1 == cfg.total_iters):
            dsc = mean_foreground_dice(S, data.validation, cfg.device)
            trace.append((it, dsc))
            row["val_DSC"] = dsc
            if dsc > best[0]:
                best = (dsc, it)
                best_state = copy.deepcopy(S.state_dict())
        if losses is not None:
            losses.add(phase=f"final_{cfg.policy}", iter=it, **row)
    if best_state is not None:
        S.load_state_dict(best_state)
    S.eval()
    return S, trace


# ---------------------------------------------------------------------------
# whole pipeline and experiment matrix


class Pipeline:
    """Runs every training stage for one labeled subset, caching shared stages.

    The pre-trained segmenter and trained generators are reused across the
    policies evaluated for the same (config, data) combination.
    """

    def __init__(self, data: TrainingData, cfg: TrainConfig, losses: LossLog | None = None):
        self.data, self.cfg = data, cfg
        self.losses = losses if losses is not None else LossLog()
        self._pretrained = None
        self.selections = {}

    @staticmethod
    def _gen_key(cfg):
        w = cfg.weights
        return (cfg.mode, cfg.selection, cfg.generator_iters, w.lambda_adv, w.lambda_ld,
                w.ld_reduction, w.saturating_gan, cfg.seed)

    def pretrained(self):
        if self._pretrained is None:
            self._pretrained = pretrain_segmenter(self.data, self.cfg, self.losses)
        return self._pretrained

    def generator(self, kind, cfg=None) -> GeneratorSelection:
        cfg = cfg or self.cfg
        key = (kind,) + self._gen_key(cfg)
        if key not in self.selections:
            self.selections[key] = train_generator_jointly(kind, self.data, cfg, self.pretrained(),
                                                           self.losses)
        return self.selections[key]

    def run(self, policy: str | None = None, cfg: TrainConfig | None = None, **info) -> RunResult:
        cfg = (cfg or self.cfg).replace(policy=policy or (cfg or self.cfg).policy)
        gens = {k: self.generator(k, cfg).generator for k in LEARNED.get(cfg.policy, ())}
        S, trace = final_retrain(self.data, cfg, gens, self.losses)
        res = evaluate_checkpoint(S, self.data.test, cfg.policy, self.data.structure_names,
                                  cfg.device, config_hash=cfg.digest(), **info)
        res.extra["val_trace_best"] = max((d for _, d in trace), default=None)
        res.extra["pretrain_iters"] = cfg.pretrain_iters
        return res


def ablation_grid(which: str, overrides: dict | None = None) -> list:
    """(group label, config changes, data changes) triples for an ablation."""
    o = overrides or {}
    if which == "A":
        lams = o.get("lambdas", [(0.0, 0.0), (1.0, 0.0), (0.0, 1e-3), (1.0, 1e-3)])
        return [(f"adv={a:g},ld={b:g}", {"lambda_adv": a, "lambda_ld": b}, {}) for a, b in lams]
    if which == "B":
        return [(m, {"mode": m}, {}) for m in ("independent", "joint")]
    if which == "C":
        return [(f"N_UL={n}", {}, {"N_UL": n}) for n in o.get("n_ul", [1, 3, 5, 10, 20, 25, 50])]
    if which == "D":
        return [(f"N_L={n}", {}, {"N_L": n}) for n in o.get("n_l", [1, 3, 5, 10, 15, 40])]
    if which == "E":
        return [(f"split_seed={s}", {}, {"split_seed": s}) for s in o.get("split_seeds", [0, 1])]
    if which == "F":
        groups = [(f"fixed_{k}", {"selection": "fixed", "gen_iters": k}, {})
                  for k in o.get("fixed_iters", [1000, 2000, 4000, 6000, 10000])]
        return groups + [("best", {}, {})]
    raise ValueError(f"unknown ablation {which!r}")


def _apply_changes(cfg: TrainConfig, changes: dict) -> TrainConfig:
    changes = dict(changes)
    w = {k: changes.pop(k) for k in ("lambda_adv", "lambda_ld") if k in changes}
    if w:
        changes["weights"] = dataclasses.replace(cfg.weights, **w)
    return cfg.replace(**changes)


def run_experiment_matrix(base_cfg: TrainConfig, volumes: Sequence, counts: dict,
                          split_seed: int = 0, n_labeled: int = 1, replicates: int = 5,
                          restarts: int = 3, policies: Sequence[str] | None = None,
                          ablation: str | None = None, overrides: dict | None = None,
                          preprocess=None) -> list:
    """Run every (group, replicate, restart, policy) cell and collect RunResults.

    Failures are recorded on the RunResult (``error``) and the matrix goes on.
    """
    policies = list(policies or [base_cfg.policy])
    groups = ablation_grid(ablation, overrides) if ablation else [("", {}, {})]
    results = []
    splits = {}
    for label, cfg_changes, data_changes in groups:
        s_seed = data_changes.get("split_seed", split_seed)
        if s_seed not in splits:
            splits[s_seed] = build_split(volumes, counts, s_seed)
        split = splits[s_seed]
        if "N_UL" in data_changes:
            split = restrict_unlabeled(split, data_changes["N_UL"])
        n_l = data_changes.get("N_L", n_labeled)
        for rep in range(replicates):
            subset = sample_labeled_subset(split, n_l, rep)
            data = TrainingData.from_split(split, subset, base_cfg.skip_empty_slices)
            for restart in range(restarts):
                cfg = _apply_changes(base_cfg, cfg_changes).replace(
                    seed=derive_seed(base_cfg.seed, rep, restart))
                pipe = Pipeline(data, cfg)
                for policy in policies:
                    info = dict(replicate=rep, restart=restart, group=label)
                    try:
                        res = pipe.run(policy, **info)
                    except Exception as exc:  # keep going; the failure is recorded
                        log.exception("run failed: %s %s", label, info)
                        res = RunResult(policy=policy, config_hash=cfg.digest(),
                                        error=f"{type(exc).__name__}: {exc}", **info)
                    results.append(res)
    return results

