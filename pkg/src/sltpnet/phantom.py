"""Synthetic CT cohort: ellipsoidal lungs holding Gaussian-HU blobs per sLTP class.

Each subject gets an ellipsoidal lung mask, ``blobs_per_class`` disjoint balls
for every class 1..10, and voxel intensities drawn from a normal
distribution whose mean and spread depend on the voxel's label. Unlabeled lung
and the tissue outside the lung have their own intensity model. A repeat
scan shifts the anatomy rigidly by a small voxel jitter and adds fresh noise.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import substream
from .volume_io import ROI_EDGE, LabelMap, LungMask, SubjectRecord, Volume, read_labels, read_mask, read_volume, write_volume

HU_MIN, HU_MAX = -1024, 200
NUM_CLASSES = 10

MANIFEST_COLUMNS = [
    "subject_id",
    "scanner_model",
    "uln_pct",
    "volume",
    "mask",
    "labels",
    "repeat_volume",
    "repeat_mask",
    "repeat_labels",
]


class PhantomError(ValueError):
    pass


def _default_means() -> tuple:
    return tuple(-975.0 + 43.0 * k for k in range(NUM_CLASSES))


@dataclass
class PhantomSpec:
    """Cohort parameters. ``dims`` is ``(nx, ny, nz)``; HU values are in [-1024, 200]."""

    dims: tuple = (160, 160, 160)
    spacing_mm: tuple = (0.7, 0.7, 0.7)
    n_subjects: int = 4
    class_means: tuple = field(default_factory=_default_means)
    class_sd: float = 20.0
    background_mean: float = -480.0
    background_sd: float = 20.0
    outside_mean: float = 40.0
    outside_sd: float = 20.0
    blob_radius: tuple = (24.0, 32.0)
    blobs_per_class: int = 2
    blob_gap: float = 3.0
    seed_spacing: float = 36.0
    classes_per_subject: int = NUM_CLASSES
    lung_semi_axes: tuple = (0.46, 0.44, 0.47)
    scanner_models: tuple = ("ScannerA", "ScannerB", "ScannerC")
    uln_range: tuple = (2.0, 6.0)
    repeat_noise_sd: float = 10.0
    repeat_jitter: int = 1
    min_margin: float = 25.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < ROI_EDGE:
            raise PhantomError(f"dims {self.dims} cannot host {ROI_EDGE}^3 ROIs")
        if self.n_subjects < 0:
            raise PhantomError("n_subjects must be >= 0")
        if len(self.class_means) != NUM_CLASSES:
            raise PhantomError(f"need {NUM_CLASSES} class means, got {len(self.class_means)}")
        means = sorted(self.class_means) + [self.background_mean]
        means.sort()
        gaps = np.diff(means)
        if gaps.min() < self.min_margin:
            raise PhantomError(f"class mean HUs closer than the {self.min_margin} HU margin")
        for m in list(self.class_means) + [self.background_mean, self.outside_mean]:
            if not HU_MIN <= m <= HU_MAX:
                raise PhantomError(f"mean HU {m} outside [{HU_MIN}, {HU_MAX}]")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi:
            raise PhantomError(f"bad blob radius range {self.blob_radius}")
        if not 1 <= self.classes_per_subject <= NUM_CLASSES:
            raise PhantomError(f"classes_per_subject must lie in 1..{NUM_CLASSES}")
        if not self.scanner_models:
            raise PhantomError("at least one scanner model is required")
        if min(self.class_sd, self.background_sd, self.outside_sd, self.repeat_noise_sd) < 0:
            raise PhantomError("standard deviations must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _grid(dims):
    nx, ny, nz = dims
    z, y, x = np.ogrid[:nz, :ny, :nx]
    return x, y, z


def _lung_mask(spec: PhantomSpec) -> np.ndarray:
    x, y, z = _grid(spec.dims)
    centre = [(n - 1) / 2.0 for n in spec.dims]
    semi = [a * n for a, n in zip(spec.lung_semi_axes, spec.dims)]
    r2 = ((x - centre[0]) / semi[0]) ** 2 + ((y - centre[1]) / semi[1]) ** 2 + ((z - centre[2]) / semi[2]) ** 2
    return r2 <= 1.0


def subject_classes(spec: PhantomSpec, subject_index: int) -> list[int]:
    """Classes present in a subject: all ten, or a window of
    ``classes_per_subject`` consecutive classes that advances per subject so
    every class is covered equally often across the cohort."""
    m = spec.classes_per_subject
    start = (subject_index * m) % NUM_CLASSES
    return [(start + j) % NUM_CLASSES + 1 for j in range(m)]


def _place_seeds(spec: PhantomSpec, classes, rng: np.random.Generator, rounds: int = 50, max_tries: int = 5000):
    """Blob centres ``(class, centre_xyz, radius)`` inside the lung, pairwise at
    least ``seed_spacing`` apart. A jammed layout is redrawn from scratch."""
    centre = np.array([(n - 1) / 2.0 for n in spec.dims])
    semi = np.array([a * n for a, n in zip(spec.lung_semi_axes, spec.dims)])
    half = ROI_EDGE // 2
    lo_c = np.full(3, half, dtype=float)
    hi_c = np.array(spec.dims, dtype=float) - half
    for _ in range(rounds):
        blobs = []
        for _b in range(spec.blobs_per_class):
            for k in classes:
                for _try in range(max_tries):
                    c = rng.uniform(lo_c, hi_c)
                    if (((c - centre) / semi) ** 2).sum() > 1.0:
                        continue
                    if any(np.linalg.norm(c - c2) < spec.seed_spacing for _, c2, _ in blobs):
                        continue
                    blobs.append((k, c, rng.uniform(*spec.blob_radius)))
                    break
                else:
                    break
        if len(blobs) == len(classes) * spec.blobs_per_class:
            return blobs
    raise PhantomError("could not place every blob; enlarge dims or reduce seed_spacing")


def _paint_labels(spec: PhantomSpec, blobs, mask: np.ndarray) -> np.ndarray:
    """Each lung voxel takes the class of its nearest blob centre if it lies
    within that blob's radius and at least ``blob_gap / 2`` voxels from the
    bisector with the second-nearest centre, so blobs are disjoint and
    separated by unlabeled lung."""
    x, y, z = _grid(spec.dims)
    shape = mask.shape
    far = np.float32(1e9)
    best = np.full(shape, far, np.float32)
    second = np.full(shape, far, np.float32)
    owner = np.zeros(shape, np.int16)
    # only voxels within radius + gap of a centre can be labelled, so each
    # centre needs distances inside its own bounding box only
    reach = max(spec.blob_radius) + spec.blob_gap
    for j, (_, c, _) in enumerate(blobs):
        lo = np.maximum(np.floor(c - reach).astype(int), 0)
        hi = np.minimum(np.ceil(c + reach).astype(int) + 1, spec.dims)
        box = (slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0]))
        d2 = (x[:, :, box[2]] - c[0]) ** 2 + (y[:, box[1], :] - c[1]) ** 2 + (z[box[0]] - c[2]) ** 2
        d = np.sqrt(d2).astype(np.float32)
        b, s2, o = best[box], second[box], owner[box]
        closer = d < b
        np.copyto(s2, np.where(closer, b, np.minimum(s2, d)))
        np.copyto(b, d, where=closer)
        o[closer] = j
    classes = np.array([k for k, _, _ in blobs], np.uint8)
    radii = np.array([r for _, _, r in blobs], np.float32)
    # distance to the bisecting plane between the two nearest centres
    # is (second^2 - best^2) / (2 * separation); (second - best) / 2 is a
    # lower bound that is exact along the centre line, which suffices here
    inside = (best <= radii[owner]) & ((second - best) >= spec.blob_gap) & mask
    labels = np.where(inside, classes[owner], 0).astype(np.uint8)
    return labels


def _intensities(spec: PhantomSpec, mask: np.ndarray, labels: np.ndarray, rng) -> np.ndarray:
    means = np.array([spec.background_mean] + list(spec.class_means))
    sds = np.array([spec.background_sd] + [spec.class_sd] * NUM_CLASSES)
    mu = np.where(mask, means[labels], spec.outside_mean)
    sd = np.where(mask, sds[labels], spec.outside_sd)
    hu = mu + sd * rng.standard_normal(mask.shape)
    return np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)


def _anatomy(spec: PhantomSpec, subject_index: int, rng: np.random.Generator):
    spec.validate()
    mask = _lung_mask(spec)
    blobs = _place_seeds(spec, subject_classes(spec, subject_index), rng)
    return mask, _paint_labels(spec, blobs, mask)


def generate_label_map(spec: PhantomSpec, subject_index: int) -> np.ndarray:
    """The ``[z, y, x]`` label map of ``generate_subject(spec, subject_index)``
    without synthesising intensities."""
    return _anatomy(spec, subject_index, substream(spec.seed, "phantom.subject", subject_index))[1]


def generate_subject(spec: PhantomSpec, subject_index: int) -> SubjectRecord:
    """Deterministic in ``(spec.seed, subject_index)``."""
    rng = substream(spec.seed, "phantom.subject", subject_index)
    mask, labels = _anatomy(spec, subject_index, rng)
    hu = _intensities(spec, mask, labels, rng)
    lo, hi = spec.uln_range
    uln = float(np.round(rng.uniform(lo, hi), 4))
    scanner = spec.scanner_models[subject_index % len(spec.scanner_models)]
    return SubjectRecord(
        subject_id=f"S{subject_index:04d}",
        scanner_model=scanner,
        uln_pct=uln,
        volume=Volume(hu, spec.spacing_mm),
        mask=LungMask(mask, spec.spacing_mm),
        labels=LabelMap(labels, spec.spacing_mm),
    )


def _shift(arr: np.ndarray, shift_xyz, fill) -> np.ndarray:
    """Rigid integer translation; vacated voxels take ``fill``."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for axis_shift, n in zip(reversed(list(shift_xyz)), arr.shape):
        s = int(axis_shift)
        if abs(s) >= n:
            return out
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def generate_repeat_scan(
    subject: SubjectRecord,
    spec: PhantomSpec,
    rng: np.random.Generator,
    noise_sd: Optional[float] = None,
    jitter: Optional[Sequence[int]] = None,
) -> SubjectRecord:
    """Second scan of ``subject``: same anatomy, rigid jitter, fresh additive noise.

    ``jitter`` fixes the ``(dx, dy, dz)`` shift; by default each component is
    drawn uniformly from ``[-spec.repeat_jitter, spec.repeat_jitter]``.
    ``noise_sd`` defaults to ``spec.repeat_noise_sd``.
    """
    sd = spec.repeat_noise_sd if noise_sd is None else float(noise_sd)
    if jitter is None:
        j = spec.repeat_jitter
        jitter = rng.integers(-j, j + 1, size=3) if j > 0 else (0, 0, 0)
    jitter = tuple(int(v) for v in jitter)
    vol = subject.volume
    outside = int(np.clip(np.rint(spec.outside_mean), HU_MIN, HU_MAX))
    hu = _shift(vol.voxels, jitter, outside)
    if sd > 0:
        noisy = hu + np.rint(sd * rng.standard_normal(hu.shape))
        hu = np.clip(noisy, HU_MIN, HU_MAX).astype(np.int16)
    mask = _shift(subject.mask.voxels, jitter, 0)
    labels = _shift(subject.labels.voxels, jitter, 0) if subject.labels is not None else None
    return SubjectRecord(
        subject_id=subject.subject_id,
        scanner_model=subject.scanner_model,
        uln_pct=subject.uln_pct,
        volume=Volume(hu, vol.spacing_mm),
        mask=LungMask(mask, vol.spacing_mm),
        labels=LabelMap(labels, vol.spacing_mm) if labels is not None else None,
    )


# -- cohort on disk ------------------------------------------------------------


def write_cohort(spec: PhantomSpec, out_dir, repeat: bool = False) -> Path:
    """Write every subject as EVF1 files plus ``cohort.csv``; returns the manifest path.

    Paths in the manifest are relative to ``out_dir``.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(spec.n_subjects):
        subj = generate_subject(spec, i)
        sid = subj.subject_id
        row = {"subject_id": sid, "scanner_model": subj.scanner_model, "uln_pct": f"{subj.uln_pct:.4f}"}
        for key, vol in (("volume", subj.volume), ("mask", subj.mask), ("labels", subj.labels)):
            name = f"{sid}_{key}.evf"
            write_volume(vol, out / name)
            row[key] = name
        if repeat:
            rep = generate_repeat_scan(subj, spec, substream(spec.seed, "phantom.repeat", i))
            for key, vol in (("repeat_volume", rep.volume), ("repeat_mask", rep.mask), ("repeat_labels", rep.labels)):
                name = f"{sid}_{key}.evf"
                write_volume(vol, out / name)
                row[key] = name
        rows.append(row)
    manifest = out / "cohort.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, restval="", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return manifest


def read_cohort(manifest, repeat: bool = False) -> list[SubjectRecord]:
    """Subjects listed in a cohort manifest, loaded from disk.

    With ``repeat=True`` the repeat-scan files are loaded instead of the visit.
    """
    manifest = Path(manifest)
    base = manifest.parent
    prefix = "repeat_" if repeat else ""
    records = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if not row.get(f"{prefix}volume"):
                raise PhantomError(f"{row['subject_id']}: manifest has no {prefix}volume entry")
            labels = row.get(f"{prefix}labels")
            records.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    scanner_model=row["scanner_model"],
                    uln_pct=float(row["uln_pct"]) if row.get("uln_pct") else None,
                    volume=read_volume(base / row[f"{prefix}volume"]),
                    mask=read_mask(base / row[f"{prefix}mask"]),
                    labels=read_labels(base / labels) if labels else None,
                )
            )
    return records
