"""Desk-scale experiment presets on the synthetic phantom population."""

from __future__ import annotations

from dataclasses import dataclass, field

from .augment import ElasticAugConfig
from .data import SyntheticPhantomSpec, build_split, generate_phantom_dataset, sample_labeled_subset
from .preprocess import PreprocessConfig, preprocess_pair
from .trainer import TrainConfig, TrainingData


def desk_config(**overrides) -> TrainConfig:
    """Small networks and a short schedule for 64x64 phantoms on one CPU.

    The elastic sigma is rescaled from 224-pixel images to 64 pixels so the
    random deformations keep the same relative magnitude.  Learning rate and
    loss weights stay at their full-scale values.
    """
    base = dict(
        image_size=64, num_classes=4, batch_size=8,
        total_iters=2000, gen_iters=500, pretrain_iters=500, val_eval_stride=25,
        seg_widths=(8, 16, 32, 64),
        gen_image_widths=(8, 16), gen_z_widths=(8, 8, 8, 16), gen_common_widths=(16, 16, 16),
        disc_widths=(8, 16, 32, 64, 64), disc_fc_widths=(64, 32),
        elastic=ElasticAugConfig(sigma=10.0 * 64 / 224),
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PhantomExperiment:
    """32 phantom volumes split into pool / unlabeled / validation / test."""

    n_volumes: int = 32
    counts: dict = field(default_factory=lambda: {"N_UL": 10, "N_ts": 10, "N_vl": 2})
    data_seed: int = 0
    split_seed: int = 0
    phantom: SyntheticPhantomSpec = field(default_factory=SyntheticPhantomSpec)

    def volumes(self):
        if not hasattr(self, "_volumes"):
            cfg = PreprocessConfig(self.phantom.spacing[:2],
                                   (self.phantom.image_size, self.phantom.image_size))
            raw = generate_phantom_dataset(self.phantom, self.n_volumes, self.data_seed)
            self._volumes = [preprocess_pair(img, lab, cfg) for img, lab in raw]
        return self._volumes

    def split(self, split_seed: int | None = None):
        return build_split(self.volumes(), self.counts,
                           self.split_seed if split_seed is None else split_seed)

    def training_data(self, replicate: int, n_labeled: int = 1, split=None) -> TrainingData:
        split = split or self.split()
        subset = sample_labeled_subset(split, n_labeled, replicate)
        return TrainingData.from_split(split, subset)
