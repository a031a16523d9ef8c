"""Volumes, slices, dataset splits and the synthetic phantom population."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageVolume:
    voxels: np.ndarray
    spacing: tuple
    subject_id: str
    phase_tag: str | None = None
    structure_names: tuple = ()
    group: str | None = None

    def __post_init__(self):
        vox = _frozen(self.voxels, np.float32)
        if vox.ndim != 3:
            raise ValueError(f"expected a 3D volume, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError(f"{self.subject_id}: non-finite voxel values")
        if self.spacing is None or len(self.spacing) != 3:
            raise ValueError(f"{self.subject_id}: spacing must have 3 components")
        spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"{self.subject_id}: spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "structure_names", tuple(self.structure_names))

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def num_slices(self):
        return self.voxels.shape[2]


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        lab = _frozen(self.labels, np.int64)
        if lab.ndim != 3:
            raise ValueError(f"expected a 3D label volume, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        object.__setattr__(self, "labels", lab)


Pair = tuple  # (ImageVolume, LabelVolume)


def check_pair(image: ImageVolume, label: LabelVolume):
    if image.shape != label.labels.shape:
        raise ValueError(
            f"{image.subject_id}: image shape {image.shape} != label shape {label.labels.shape}"
        )


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Channel-last one-hot encoding of an integer label array."""
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(num_classes)).astype(np.float32)


@dataclass(frozen=True)
class SliceSample:
    image: np.ndarray  # H x W
    label_onehot: np.ndarray  # H x W x C
    subject_id: str = ""
    slice_index: int = -1

    def __post_init__(self):
        img = np.array(self.image, dtype=np.float32)
        lab = np.array(self.label_onehot, dtype=np.float32)
        if img.ndim != 2 or lab.ndim != 3 or lab.shape[:2] != img.shape:
            raise ValueError(f"inconsistent slice shapes: image {img.shape}, label {lab.shape}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "label_onehot", lab)

    @property
    def num_classes(self):
        return self.label_onehot.shape[-1]


def extract_slices(image: ImageVolume, label: LabelVolume | None = None,
                   skip_empty: bool = False) -> list[SliceSample]:
    """Cut a volume into 2D samples along the through-plane (last) axis."""
    out = []
    for k in range(image.num_slices):
        if label is not None:
            lab = label.labels[:, :, k]
            if skip_empty and not np.any(lab > 0):
                continue
            oh = one_hot(lab, label.num_classes)
        else:
            oh = np.zeros(image.voxels.shape[:2] + (1,), np.float32)
            oh[..., 0] = 1.0
        out.append(SliceSample(image.voxels[:, :, k], oh, image.subject_id, k))
    return out


def stack_slices(samples: Sequence[SliceSample]):
    """(N,1,H,W) images and (N,C,H,W) labels as float32 arrays."""
    x = np.stack([s.image for s in samples])[:, None]
    y = np.stack([s.label_onehot for s in samples]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplit:
    labeled_pool: tuple
    unlabeled: tuple
    validation: tuple
    test: tuple
    seed: int = 0
    counts: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for name in ("labeled_pool", "unlabeled", "validation", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        sets = [self._ids(self.labeled_pool), self._ids(self.unlabeled),
                self._ids(self.validation), self._ids(self.test)]
        seen = set()
        for s in sets:
            if seen & set(s):
                raise ValueError(f"split sets overlap on {sorted(seen & set(s))}")
            seen |= set(s)

    @staticmethod
    def _ids(items):
        return [(p[0] if isinstance(p, tuple) else p).subject_id for p in items]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "counts": dict(self.counts),
            "labeled_pool": self._ids(self.labeled_pool),
            "unlabeled": self._ids(self.unlabeled),
            "validation": self._ids(self.validation),
            "test": self._ids(self.test),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2))


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def _group_of(pair, groups):
    img = pair[0]
    if groups is not None:
        return groups[img.subject_id]
    return img.group


def build_split(volumes: Sequence[Pair], counts: Mapping[str, int], seed: int,
                groups: Mapping[str, str] | None = None,
                use_groups: bool = True) -> DatasetSplit:
    """Draw unlabeled/test/validation sets; the remainder is the labeled pool.

    ``counts`` holds ``N_UL``, ``N_ts`` and ``N_vl``.  When volumes carry a
    sub-group (``ImageVolume.group`` or the ``groups`` map) each set is filled
    round-robin over the groups, so per-group counts differ by at most one
    and are equal whenever the set size is a multiple of the group count.
    """
    n_ul, n_ts, n_vl = int(counts["N_UL"]), int(counts["N_ts"]), int(counts.get("N_vl", 2))
    need = n_ul + n_ts + n_vl
    if need > len(volumes):
        raise ValueError(
            f"insufficient volumes: need {need} (N_UL={n_ul}, N_ts={n_ts}, N_vl={n_vl}) "
            f"but only {len(volumes)} available, deficit {need - len(volumes)}"
        )
    for img, lab in volumes:
        check_pair(img, lab)

    rng = np.random.default_rng(derive_seed("split", seed))
    order = sorted(range(len(volumes)), key=lambda i: volumes[i][0].subject_id)
    grouped = use_groups and all(_group_of(volumes[i], groups) is not None for i in order)

    if grouped:
        buckets: dict = {}
        for i in order:
            buckets.setdefault(_group_of(volumes[i], groups), []).append(i)
        keys = sorted(buckets)
        for k in keys:
            buckets[k] = list(rng.permutation(buckets[k]))
        # rotate the starting group per set so leftover slots are spread out
        start = 0

        def take(n):
            nonlocal start
            chosen = []
            g = start
            while len(chosen) < n:
                live = [k for k in keys if buckets[k]]
                if not live:
                    raise ValueError("insufficient volumes within groups")
                k = keys[g % len(keys)]
                g += 1
                if buckets[k]:
                    chosen.append(buckets[k].pop(0))
            start = g % len(keys)
            return chosen

        ul, ts, vl = take(n_ul), take(n_ts), take(n_vl)
        used = set(ul) | set(ts) | set(vl)
        pool = [i for i in order if i not in used]
    else:
        perm = [order[i] for i in rng.permutation(len(order))]
        ul, ts, vl = perm[:n_ul], perm[n_ul:n_ul + n_ts], perm[n_ul + n_ts:need]
        pool = sorted(perm[need:], key=lambda i: volumes[i][0].subject_id)

    pick = lambda idx: [volumes[i] for i in idx]
    return DatasetSplit(pick(pool), pick(ul), pick(vl), pick(ts), seed=seed,
                        counts={"N_UL": n_ul, "N_ts": n_ts, "N_vl": n_vl})


def restrict_unlabeled(split: DatasetSplit, n_ul: int) -> DatasetSplit:
    """Keep only the first ``n_ul`` unlabeled volumes (unlabeled-count sweeps)."""
    if n_ul > len(split.unlabeled):
        raise ValueError(f"requested {n_ul} unlabeled volumes, split has {len(split.unlabeled)}")
    return DatasetSplit(split.labeled_pool, split.unlabeled[:n_ul], split.validation,
                        split.test, seed=split.seed, counts={**split.counts, "N_UL": n_ul})


NUM_REPLICATES = 5


def sample_labeled_subset(split: DatasetSplit, n_labeled: int, replicate: int,
                          groups: Mapping[str, str] | None = None) -> list:
    """One of five pre-committed labeled draws from the training pool."""
    if not 0 <= replicate < NUM_REPLICATES:
        raise ValueError(f"replicate must be in [0, {NUM_REPLICATES - 1}], got {replicate}")
    pool = list(split.labeled_pool)
    if n_labeled < 1 or n_labeled > len(pool):
        raise ValueError(f"N_L={n_labeled} not in [1, {len(pool)}]")
    if n_labeled == len(pool):
        return pool
    rng = np.random.default_rng(derive_seed("replicate", split.seed, replicate))
    pool_groups = [_group_of(p, groups) for p in pool]
    if n_labeled == 1 and all(g is not None for g in pool_groups):
        keys = sorted(set(pool_groups))
        key = keys[replicate % len(keys)]
        members = [p for p, g in zip(pool, pool_groups) if g == key]
        return [members[rng.integers(len(members))]]
    idx = rng.choice(len(pool), size=n_labeled, replace=False)
    return [pool[i] for i in sorted(idx)]


# ---------------------------------------------------------------------------
# synthetic phantoms


CARDIAC_NAMES = {1: ("LV",), 2: ("Myo", "LV"), 3: ("RV", "Myo", "LV")}


@dataclass(frozen=True)
class SyntheticPhantomSpec:
    """Nested-ellipse "short-axis heart" phantoms.

    Lengths are fractions of ``image_size``.  Groups modulate the anatomy the
    way pathology sub-groups do (dilated ventricle, thick wall, ...), and each
    subject draws its own tissue contrasts and a smooth bias field.
    """

    image_size: int = 64
    depth: int = 8
    num_structures: int = 3
    num_groups: int = 5
    lv_axes: tuple = (0.13, 0.11)
    myo_thickness: float = 0.06
    rv_axes: tuple = (0.17, 0.10)
    center_jitter: float = 0.06
    axis_jitter: float = 0.18
    max_rotation_deg: float = 30.0
    apex_shrink: float = 0.55
    # (low, high) uniform ranges for the per-subject tissue means
    lv_intensity: tuple = (0.55, 0.95)
    myo_intensity: tuple = (0.10, 0.35)
    rv_intensity: tuple = (0.45, 0.90)
    body_intensity: tuple = (0.20, 0.45)
    bias_strength: float = 0.25
    noise_std: float = 0.03
    num_distractors: int = 2
    spacing: tuple = (1.367, 1.367, 10.0)

    def validate(self):
        if self.num_structures not in CARDIAC_NAMES:
            raise ValueError(f"num_structures must be 1, 2 or 3, got {self.num_structures}")
        if self.image_size < 16 or self.depth < 1:
            raise ValueError("image_size must be >= 16 and depth >= 1")
        if min(self.lv_axes) <= 0 or (self.num_structures >= 2 and self.myo_thickness <= 0) \
                or (self.num_structures == 3 and min(self.rv_axes) <= 0):
            raise ValueError("degenerate phantom spec: zero-size structures")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")


# group -> multipliers for (lv size, myo thickness, rv size, overall scale)
_GROUP_MODS = [
    (1.00, 1.00, 1.00, 1.00),   # normal
    (1.35, 0.80, 1.00, 1.10),   # dilated LV
    (0.80, 1.60, 0.95, 0.95),   # hypertrophy
    (0.95, 1.00, 1.45, 1.05),   # enlarged RV
    (0.85, 1.10, 0.85, 0.85),   # small heart
]


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def _smooth_field(rng, n, grid=4):
    from scipy.ndimage import zoom
    coarse = rng.standard_normal((grid, grid))
    f = zoom(coarse, n / grid, order=3, mode="nearest")[:n, :n]
    return f / (np.abs(f).max() + 1e-8)


def _phantom(spec: SyntheticPhantomSpec, index: int, rng: np.random.Generator):
    n, D = spec.image_size, spec.depth
    group = index % spec.num_groups
    lv_m, myo_m, rv_m, scale_m = _GROUP_MODS[group % len(_GROUP_MODS)]
    jit = lambda: 1.0 + spec.axis_jitter * rng.uniform(-1, 1)

    cy = n / 2 + spec.center_jitter * n * rng.standard_normal()
    cx = n / 2 + spec.center_jitter * n * rng.standard_normal()
    theta = np.deg2rad(spec.max_rotation_deg) * rng.uniform(-1, 1)
    lv_ay = spec.lv_axes[0] * n * lv_m * scale_m * jit()
    lv_ax = spec.lv_axes[1] * n * lv_m * scale_m * jit()
    thick = spec.myo_thickness * n * myo_m * jit()
    rv_ay = spec.rv_axes[0] * n * rv_m * scale_m * jit()
    rv_ax = spec.rv_axes[1] * n * rv_m * scale_m * jit()
    lv_int = rng.uniform(*spec.lv_intensity)
    myo_int = rng.uniform(*spec.myo_intensity)
    rv_int = rng.uniform(*spec.rv_intensity)
    body_int = rng.uniform(*spec.body_intensity)
    bias = spec.bias_strength * rng.uniform(0.2, 1.0) * _smooth_field(rng, n)
    body_ay, body_ax = n * rng.uniform(0.40, 0.47), n * rng.uniform(0.42, 0.49)
    distract = [
        (n / 2 + n * rng.uniform(-0.3, 0.3), n / 2 + n * rng.uniform(-0.3, 0.3),
         n * rng.uniform(0.04, 0.08), n * rng.uniform(0.04, 0.08), rng.uniform(0, np.pi),
         rng.uniform(0.4, 0.9))
        for _ in range(spec.num_distractors)
    ]

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    vox = np.zeros((n, n, D), np.float32)
    lab = np.zeros((n, n, D), np.int64)
    k_lv = spec.num_structures
    for k in range(D):
        t = k / max(D - 1, 1)
        s = 1.0 - spec.apex_shrink * t ** 1.5
        img = np.full((n, n), 0.02)
        body = _ellipse(yy, xx, n / 2, n / 2, body_ay, body_ax, 0.0)
        img[body] = body_int
        for dy_, dx_, a1, a2, th, it in distract:
            m = _ellipse(yy, xx, dy_, dx_, a1, a2, th) & body
            img[m] = it
        labels = np.zeros((n, n), np.int64)
        ky, kx = cy + 0.5 * t, cx - 0.5 * t
        outer = _ellipse(yy, xx, ky, kx, s * lv_ay + thick, s * lv_ax + thick, theta)
        if spec.num_structures == 3:
            # RV sits to one side of the LV, along the rotated minor axis
            off = s * lv_ax + thick + 0.45 * s * rv_ax
            ry, rx = ky - np.sin(theta) * off, kx - np.cos(theta) * off
            rv = _ellipse(yy, xx, ry, rx, s * rv_ay, s * rv_ax, theta) & ~outer
            img[rv] = rv_int
            labels[rv] = 1
        if spec.num_structures >= 2:
            img[outer] = myo_int
            labels[outer] = k_lv - 1
        inner = _ellipse(yy, xx, ky, kx, s * lv_ay, s * lv_ax, theta)
        img[inner] = lv_int
        labels[inner] = k_lv
        img = img + bias * body + spec.noise_std * rng.standard_normal((n, n))
        vox[:, :, k] = img
        lab[:, :, k] = labels

    frac = np.mean(lab > 0)
    if not 0.0 < frac < 0.5:
        raise ValueError(f"phantom {index}: foreground fraction {frac:.3f} outside (0, 0.5)")
    sid = f"phantom_{index:03d}"
    names = CARDIAC_NAMES[spec.num_structures]
    image = ImageVolume(vox, spec.spacing, sid, "ES", names, group=f"g{group}")
    return image, LabelVolume(lab, spec.num_structures + 1)


def generate_phantom_dataset(spec: SyntheticPhantomSpec, n_volumes: int, seed: int) -> list:
    spec.validate()
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    return [
        _phantom(spec, i, np.random.default_rng(derive_seed("phantom", seed, i)))
        for i in range(n_volumes)
    ]


# ---------------------------------------------------------------------------
# files


def save_array_volume(path, image: ImageVolume, label: LabelVolume | None = None, **meta):
    """Portable container: ``<path>.npz`` arrays plus ``<path>.json`` metadata."""
    path = Path(path)
    arrays = {"voxels": image.voxels}
    if label is not None:
        arrays["labels"] = label.labels.astype(np.int16)
    np.savez_compressed(path.with_suffix(".npz"), **arrays)
    info = {
        "subject_id": image.subject_id,
        "spacing": list(image.spacing),
        "phase_tag": image.phase_tag,
        "structure_names": list(image.structure_names),
        "group": image.group,
        "num_classes": None if label is None else label.num_classes,
        **meta,
    }
    path.with_suffix(".json").write_text(json.dumps(info, indent=2))


def load_array_volume(path):
    path = Path(path)
    info = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as z:
        image = ImageVolume(z["voxels"], tuple(info["spacing"]), info["subject_id"],
                            info.get("phase_tag"), tuple(info.get("structure_names", ())),
                            group=info.get("group"))
        label = LabelVolume(z["labels"], info["num_classes"]) if "labels" in z else None
    return image, label


def load_nifti_dataset(manifest_path, num_classes: int | None = None,
                       structure_names: Sequence[str] = ()) -> list:
    """Read the volumes listed in a JSON manifest.

    The manifest maps ``subject_id`` to ``{"image_path", "label_path", "group"}``;
    paths are relative to the manifest's directory.
    """
    import nibabel as nib

    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    if "subjects" in entries:
        num_classes = num_classes or entries.get("num_classes")
        structure_names = structure_names or entries.get("structure_names", ())
        entries = entries["subjects"]
    root = manifest_path.parent
    out = []
    for sid in sorted(entries):
        e = entries[sid]
        img = nib.load(str(root / e["image_path"]))
        spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
        vox = np.asarray(img.get_fdata(), dtype=np.float32)
        lab_arr = np.rint(np.asarray(nib.load(str(root / e["label_path"])).get_fdata())).astype(np.int64)
        C = num_classes or int(lab_arr.max()) + 1
        out.append((ImageVolume(vox, spacing, sid, e.get("phase_tag"), tuple(structure_names),
                                group=e.get("group")),
                    LabelVolume(lab_arr, C)))
    return out


def write_nifti_dataset(pairs: Sequence[Pair], out_dir) -> Path:
    """Write pairs as NIfTI files plus the JSON manifest ``load_nifti_dataset`` reads."""
    import nibabel as nib

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = {}
    for img, lab in pairs:
        affine = np.diag(list(img.spacing) + [1.0])
        ip, lp = f"{img.subject_id}_img.nii.gz", f"{img.subject_id}_lab.nii.gz"
        nib.save(nib.Nifti1Image(img.voxels, affine), str(out_dir / ip))
        nib.save(nib.Nifti1Image(lab.labels.astype(np.int16), affine), str(out_dir / lp))
        subjects[img.subject_id] = {"image_path": ip, "label_path": lp, "group": img.group,
                                    "phase_tag": img.phase_tag}
    first_img, first_lab = pairs[0]
    manifest = {"num_classes": first_lab.num_classes,
                "structure_names": list(first_img.structure_names),
                "subjects": subjects}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
