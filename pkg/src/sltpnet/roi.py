"""ROI sampling, class balancing, stratified splitting and reflection augmentation.

A ROI is the 36^3 cube covering ``[c - 18, c + 18)`` on each axis around its
centroid ``c = (x, y, z)``. Two congruent cubes offset by ``d`` overlap in
``prod(max(0, 36 - |d_i|))`` voxels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .volume_io import (
    ROI_EDGE,
    SubjectRecord,
    Volume,
    extract_cube,
    normalize_lung_intensity,
    read_volume,
    valid_centroid_bounds,
    write_volume,
)

ROI_VOLUME = ROI_EDGE**3
MIN_CLASS_FRACTION = 0.30
MAX_OVERLAP_FRACTION = 0.20
SPLITS = ("train", "val", "test")
NUM_CLASSES = 10
INDEX_COLUMNS = ["sample_id", "subject_id", "scanner_model", "label", "split", "x", "y", "z", "file"]


class DatasetError(ValueError):
    pass


@dataclass
class ROISample:
    """A labelled 36^3 cube; ``voxels`` is indexed ``[z, y, x]`` and may be ``None``
    when only the geometry is needed."""

    voxels: Optional[np.ndarray]
    label: int
    subject_id: str
    scanner_model: str
    centroid: tuple
    reflection: str = ""


@dataclass
class ROIDataset:
    samples: list
    split: list
    seed: int = 0

    def __post_init__(self):
        if len(self.samples) != len(self.split):
            raise DatasetError("every sample needs exactly one split assignment")

    def subset(self, name: str) -> list:
        return [s for s, sp in zip(self.samples, self.split) if sp == name]

    def counts(self) -> dict:
        return {name: sum(1 for sp in self.split if sp == name) for name in SPLITS}


def overlap_voxels(c1, c2, edge: int = ROI_EDGE) -> int:
    d = np.abs(np.asarray(c1) - np.asarray(c2))
    return int(np.prod(np.maximum(0, edge - d)))


def overlap_fraction(c1, c2, edge: int = ROI_EDGE) -> float:
    return overlap_voxels(c1, c2, edge) / edge**3


def class_fraction(labels: np.ndarray, centroid, label: int) -> float:
    cube = extract_cube(labels, centroid)
    return np.count_nonzero(cube == label) / ROI_VOLUME


def candidate_centroids(labels: np.ndarray) -> np.ndarray:
    """``(x, y, z)`` of every labelled voxel whose cube fits inside the grid."""
    dims = labels.shape[::-1]
    (x0, x1), (y0, y1), (z0, z1) = valid_centroid_bounds(dims)
    z, y, x = np.nonzero(labels[z0:z1, y0:y1, x0:x1])
    return np.stack([x + x0, y + y0, z + z0], axis=1)


def sample_centroids(
    labels: np.ndarray,
    rng: np.random.Generator,
    max_rois: Optional[int] = None,
    max_attempts: int = 4000,
) -> list[tuple[tuple[int, int, int], int]]:
    """Greedy rejection sampling of ROI centroids on one label map (``[z, y, x]``).

    Candidates are drawn uniformly (with replacement) from labelled voxels
    whose cube fits. A candidate labelled ``i`` is accepted when at least 30%
    of its cube carries ``i`` and it overlaps no previously accepted cube by
    more than 20%. Returns ``[((x, y, z), label), ...]`` in acceptance order.
    """
    cands = candidate_centroids(labels)
    accepted: list = []
    if len(cands) == 0:
        return accepted
    kept = np.empty((0, 3), dtype=np.int64)
    limit = MAX_OVERLAP_FRACTION * ROI_VOLUME
    for _ in range(max_attempts):
        if max_rois is not None and len(accepted) >= max_rois:
            break
        c = cands[rng.integers(len(cands))]
        x, y, z = (int(v) for v in c)
        label = int(labels[z, y, x])
        if len(kept):
            inter = np.prod(np.maximum(0, ROI_EDGE - np.abs(kept - c)), axis=1)
            if inter.max() > limit:
                continue
        if class_fraction(labels, (x, y, z), label) < MIN_CLASS_FRACTION:
            continue
        accepted.append(((x, y, z), label))
        kept = np.vstack([kept, c[None, :]])
    return accepted


def sample_rois(
    subject: SubjectRecord,
    max_per_subject: Optional[int],
    rng: np.random.Generator,
    max_attempts: int = 4000,
) -> list[ROISample]:
    """Sample ROIs from one subject; voxels are lung-normalised float32 cubes."""
    if subject.labels is None:
        raise DatasetError(f"{subject.subject_id}: no label map")
    picks = sample_centroids(subject.labels.voxels, rng, max_per_subject, max_attempts)
    field_ = normalize_lung_intensity(subject.volume, subject.mask).values
    return [
        ROISample(
            extract_cube(field_, c).astype(np.float32),
            label,
            subject.subject_id,
            subject.scanner_model,
            c,
        )
        for c, label in picks
    ]


# -- balancing and splitting ---------------------------------------------------


def class_counts(labels: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise DatasetError(f"labels must lie in 1..{num_classes}")
    return np.bincount(labels, minlength=num_classes + 1)[1:]


def balance_counts(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.min() < 1:
        missing = [i + 1 for i in np.flatnonzero(counts < 1)]
        raise DatasetError(f"classes {missing} have no samples")
    return np.full_like(counts, counts.min())


def balance_indices(labels: Sequence[int], rng: np.random.Generator, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Indices that subsample every class, without replacement, to the rarest class's count."""
    labels = np.asarray(labels)
    target = balance_counts(class_counts(labels, num_classes))[0]
    keep = []
    for k in range(1, num_classes + 1):
        idx = np.flatnonzero(labels == k)
        keep.append(np.sort(rng.choice(idx, size=target, replace=False)))
    return np.sort(np.concatenate(keep))


def balance_classes(samples: list, rng: np.random.Generator, num_classes: int = NUM_CLASSES) -> list:
    idx = balance_indices([s.label for s in samples], rng, num_classes)
    return [samples[i] for i in idx]


def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Train/val/test sizes for ``n`` samples of one class."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9 or ratios[0] == 0:
        raise DatasetError(f"ratios {ratios} must be three nonnegative numbers summing to 1 with a nonzero train share")
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_counts(counts: Sequence[int], ratios=(0.6, 0.2, 0.2)) -> np.ndarray:
    """Per-class ``(train, val, test)`` sizes, shape K x 3."""
    return np.array([split_sizes(int(n), ratios) for n in counts])


def split_assignment(labels: Sequence[int], rng: np.random.Generator, ratios=(0.6, 0.2, 0.2)) -> list[str]:
    labels = np.asarray(labels)
    out = [""] * len(labels)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = split_sizes(len(idx), ratios)
        for j, i in enumerate(idx):
            out[i] = "train" if j < n_train else "val" if j < n_train + n_val else "test"
    return out


def split_dataset(samples: list, ratios=(0.6, 0.2, 0.2), rng=None, seed: int = 0) -> ROIDataset:
    """Stratified shuffle-split per class."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    split = split_assignment([s.label for s in samples], rng, ratios)
    return ROIDataset(list(samples), split, seed)


# -- augmentation --------------------------------------------------------------

# array axes of a [z, y, x] cube
_REFLECT_AXIS = {"x": 2, "y": 1, "z": 0}


def reflect(cube: np.ndarray, axis: str) -> np.ndarray:
    return np.ascontiguousarray(np.flip(cube, axis=_REFLECT_AXIS[axis]))


def augment_count(n_train: int) -> int:
    return 4 * n_train


def augment_reflections(samples: list) -> list:
    """Each sample followed by its x, y and z reflections."""
    out = []
    for s in samples:
        out.append(s)
        for axis in "xyz":
            vox = reflect(s.voxels, axis) if s.voxels is not None else None
            out.append(replace(s, voxels=vox, reflection=axis))
    return out


@dataclass
class PipelineCounts:
    per_class_sampled: np.ndarray
    per_class_balanced: np.ndarray
    split: np.ndarray
    train: int
    val: int
    test: int
    train_augmented: int
    total_balanced: int = field(init=False)

    def __post_init__(self):
        self.total_balanced = int(self.per_class_balanced.sum())


def dry_run_counts(per_class_sampled: Sequence[int], ratios=(0.6, 0.2, 0.2)) -> PipelineCounts:
    """Sizes produced by balance -> split -> augment, without touching any voxels."""
    sampled = np.asarray(per_class_sampled)
    balanced = balance_counts(sampled)
    split = split_counts(balanced, ratios)
    train, val, test = (int(v) for v in split.sum(axis=0))
    return PipelineCounts(sampled, balanced, split, train, val, test, augment_count(train))


# -- whole pipeline and export -------------------------------------------------


def build_dataset(
    subjects: Sequence[SubjectRecord],
    max_per_subject: Optional[int],
    rng_sample,
    rng_balance: np.random.Generator,
    rng_split: np.random.Generator,
    ratios=(0.6, 0.2, 0.2),
    seed: int = 0,
    max_attempts: int = 4000,
) -> ROIDataset:
    """Sample every subject, balance classes and split 60:20:20.

    ``rng_sample`` is a callable ``subject_index -> Generator`` so each subject
    draws from its own stream regardless of how many subjects precede it.
    """
    samples = []
    for i, subj in enumerate(subjects):
        samples.extend(sample_rois(subj, max_per_subject, rng_sample(i), max_attempts))
    samples = balance_classes(samples, rng_balance)
    return split_dataset(samples, ratios, rng_split, seed)


def export_dataset(dataset: ROIDataset, out_dir) -> Path:
    """One f32 EVF1 cube per sample plus ``index.csv``; returns the index path."""
    out = Path(out_dir)
    (out / "rois").mkdir(parents=True, exist_ok=True)
    index = out / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for i, (s, sp) in enumerate(zip(dataset.samples, dataset.split)):
            name = f"rois/roi_{i:06d}.evf"
            write_volume(Volume(np.asarray(s.voxels, dtype=np.float32)), out / name)
            x, y, z = s.centroid
            w.writerow([f"roi_{i:06d}", s.subject_id, s.scanner_model, s.label, sp, x, y, z, name])
    return index


def load_dataset(index_path, seed: int = 0) -> ROIDataset:
    index_path = Path(index_path)
    base = index_path.parent
    samples, split = [], []
    with open(index_path, newline="") as fh:
        for row in csv.DictReader(fh):
            vox = read_volume(base / row["file"]).voxels
            if vox.shape != (ROI_EDGE,) * 3:
                raise DatasetError(f"{row['file']}: cube shape {vox.shape}")
            centroid = (int(row["x"]), int(row["y"]), int(row["z"]))
            samples.append(ROISample(vox, int(row["label"]), row["subject_id"], row["scanner_model"], centroid))
            split.append(row["split"])
    bad = set(split) - set(SPLITS)
    if bad:
        raise DatasetError(f"unknown split names {sorted(bad)}")
    return ROIDataset(samples, split, seed)


def stack(samples: Sequence[ROISample]) -> tuple[np.ndarray, np.ndarray]:
    """``(N x 1 x 36^3 float32 batch, 1-based labels)``."""
    x = np.stack([s.voxels for s in samples]).astype(np.float32, copy=False)[:, None]
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y
