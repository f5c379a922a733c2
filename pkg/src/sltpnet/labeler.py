"""Whole-lung labelling on a SURS lattice with -950 HU emphysema gating."""
from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from . import stats
from .seeding import substream
from .volume_io import ROI_EDGE, SubjectRecord, Volume, extract_cube, normalize_lung_intensity, valid_centroid_bounds

EMPHYSEMA_HU = -950
DEFAULT_SPACING = 12


@dataclass
class GateDecision:
    pct_below_950: float
    gate: bool


def _spacing3(spacing) -> tuple[int, int, int]:
    s = np.broadcast_to(np.asarray(spacing, dtype=np.int64), (3,))
    if s.min() < 1:
        raise ValueError(f"SURS spacing must be >= 1, got {spacing}")
    return tuple(int(v) for v in s)


def surs_centroids(mask, spacing=DEFAULT_SPACING, seed: int = 0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Lattice centroids ``(x, y, z)`` with a random phase, kept where the lung
    mask is set and the 36^3 cube fits.

    The lattice is anchored at the low corner of the valid-centroid box with a
    phase drawn per axis from ``[0, min(spacing, extent))``. When the box is
    shorter than the stride this keeps exactly one lattice point on that axis.
    """
    arr = mask.voxels if isinstance(mask, Volume) else np.asarray(mask)
    rng = rng if rng is not None else substream(seed, "labeler.surs")
    steps = _spacing3(spacing)
    dims = arr.shape[::-1]
    axes = []
    for (lo, hi), s in zip(valid_centroid_bounds(dims), steps):
        extent = hi - lo
        if extent < 1:
            axes.append(np.empty(0, dtype=np.int64))
            continue
        phase = int(rng.integers(0, min(s, extent)))
        axes.append(np.arange(lo + phase, hi, s))
    if any(len(a) == 0 for a in axes):
        warnings.warn("volume too small for any SURS centroid", RuntimeWarning, stacklevel=2)
        return np.empty((0, 3), dtype=np.int64)
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    keep = arr[zz, yy, xx] != 0
    pts = np.stack([xx[keep], yy[keep], zz[keep]], axis=1).astype(np.int64)
    if len(pts) == 0:
        warnings.warn("SURS lattice misses the lung mask at this spacing", RuntimeWarning, stacklevel=2)
    return pts


def gate_emphysema(volume: Volume, centroid, uln_pct: float) -> GateDecision:
    """Share of raw-HU voxels strictly below -950 in the ROI, gated against the ULN."""
    cube = extract_cube(volume.voxels, centroid)
    pct = 100.0 * np.count_nonzero(cube < EMPHYSEMA_HU) / ROI_EDGE**3
    return GateDecision(pct, pct > uln_pct)


def _box_counts(indicator: np.ndarray, centroids: np.ndarray, edge: int = ROI_EDGE) -> np.ndarray:
    """Voxel counts of ``indicator`` inside each centroid's cube via a summed-area table."""
    sat = np.zeros(tuple(n + 1 for n in indicator.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = indicator.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    h = edge // 2
    x0, y0, z0 = (centroids[:, i] - h for i in range(3))
    x1, y1, z1 = x0 + edge, y0 + edge, z0 + edge
    return (
        sat[z1, y1, x1] - sat[z0, y1, x1] - sat[z1, y0, x1] - sat[z1, y1, x0]
        + sat[z0, y0, x1] + sat[z0, y1, x0] + sat[z1, y0, x0] - sat[z0, y0, x0]
    )


@dataclass
class LabelingResult:
    subject_id: str
    centroids: np.ndarray
    pct_below_950: np.ndarray
    gated: np.ndarray
    labels: np.ndarray
    sltp_hist: np.ndarray
    ctes_hist: np.ndarray
    unlabeled_pct: float
    timing: dict = field(default_factory=dict)

    def write_centroids_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "x", "y", "z", "pct_below_950", "gated", "label"])
            for c, p, g, lab in zip(self.centroids, self.pct_below_950, self.gated, self.labels):
                w.writerow([self.subject_id, int(c[0]), int(c[1]), int(c[2]), repr(float(p)), int(g), int(lab)])


def label_subject(
    weights: M.ModelWeights,
    subject: SubjectRecord,
    spacing=DEFAULT_SPACING,
    batch_size: int = 64,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> LabelingResult:
    """Classify every gated SURS ROI of one subject; ungated ROIs get label 0.

    Histograms are percentages over all SURS samples, so the unlabeled share
    plus the class shares is 100.
    """
    if subject.uln_pct is None:
        raise ValueError(f"{subject.subject_id}: emphysema gating needs a ULN")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cents = surs_centroids(subject.mask, spacing, seed, rng)
    n = len(cents)
    below = _box_counts(subject.volume.voxels < EMPHYSEMA_HU, cents) if n else np.zeros(0, np.int64)
    pct = 100.0 * below / ROI_EDGE**3
    gated = pct > subject.uln_pct
    labels = np.zeros(n, dtype=np.int64)
    idx = np.flatnonzero(gated)
    infer_s = 0.0
    if len(idx):
        field_ = normalize_lung_intensity(subject.volume, subject.mask).values
        out = []
        for i in range(0, len(idx), batch_size):
            chunk = idx[i : i + batch_size]
            x = np.stack([extract_cube(field_, cents[j]) for j in chunk]).astype(np.float32)[:, None]
            t0 = time.perf_counter()
            out.append(M.predict(weights, x))
            infer_s += time.perf_counter() - t0
        labels[idx] = np.concatenate(out)
    if n:
        sltp = stats.class_histogram(labels)
        unlabeled = 100.0 * np.count_nonzero(labels == 0) / n
    else:
        sltp, unlabeled = np.zeros(stats.NUM_SLTP), 100.0
    timing = {
        "subject_id": subject.subject_id,
        "n_surs": int(n),
        "n_classified": int(len(idx)),
        "batch_size": int(batch_size),
        "inference_seconds": infer_s,
        "ms_per_roi": 1000.0 * infer_s / len(idx) if len(idx) else float("nan"),
        "rois_per_second": len(idx) / infer_s if infer_s > 0 else float("nan"),
    }
    return LabelingResult(subject.subject_id, cents, pct, gated, labels, sltp, stats.ctes_histogram(sltp), unlabeled, timing)


def write_histograms_csv(results: Sequence[LabelingResult], path, scan: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["subject_id", "scan", "unlabeled_pct"]
            + [f"sltp{k}" for k in range(1, stats.NUM_SLTP + 1)]
            + list(stats.CTES_NAMES)
        )
        for r in results:
            w.writerow(
                [r.subject_id, scan, repr(float(r.unlabeled_pct))]
                + [repr(float(v)) for v in r.sltp_hist]
                + [repr(float(v)) for v in r.ctes_hist]
            )


def timing_report(results: Sequence[LabelingResult]) -> dict:
    n = sum(r.timing["n_classified"] for r in results)
    secs = sum(r.timing["inference_seconds"] for r in results)
    return {
        "subjects": [r.timing for r in results],
        "n_classified": n,
        "inference_seconds": secs,
        "ms_per_roi": 1000.0 * secs / n if n else None,
        "rois_per_second": n / secs if secs > 0 else None,
    }


def write_timing_json(results: Sequence[LabelingResult], path) -> None:
    rep = timing_report(results)

    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    Path(path).write_text(json.dumps(clean(rep), indent=2, sort_keys=True) + "\n")


# -- scan-rescan reproducibility -----------------------------------------------


@dataclass
class ReproResult:
    rows: list
    visit: list
    repeat: list


def _agreement(level: str, names, a: np.ndarray, b: np.ndarray) -> list[dict]:
    rows = []
    for j, name in enumerate(names):
        x, y = a[:, j], b[:, j]
        occupied = bool(np.any(x != 0) or np.any(y != 0))
        try:
            r2 = stats.pearson_r2(x, y)
        except stats.StatsError:
            r2 = float("nan")
        icc = stats.icc31(np.stack([x, y], axis=1))
        display = f"R2 {r2:.2f}; ICC {icc.icc:.2f} [{icc.lower:.2f}, {icc.upper:.2f}]" if occupied else "unoccupied"
        rows.append(
            {
                "level": level,
                "class": name,
                "n": icc.n,
                "r2": r2,
                "icc": icc.icc,
                "icc_lower": icc.lower,
                "icc_upper": icc.upper,
                "degenerate": int(icc.degenerate),
                "occupied": occupied,
                "display": display,
            }
        )
    return rows


def reproducibility_run(
    weights: M.ModelWeights,
    pairs: Sequence[tuple[SubjectRecord, SubjectRecord]],
    spacing=DEFAULT_SPACING,
    seed: int = 0,
    batch_size: int = 64,
    shared_phase: bool = False,
) -> ReproResult:
    """Label visit and repeat scans and compute per-class R^2 and ICC(3,1).

    With ``shared_phase`` both scans of a subject use the same SURS phase;
    otherwise each scan draws its own.
    """
    if len(pairs) < 3:
        raise ValueError("need at least 3 subject pairs")
    for v, r in pairs:
        if v.subject_id != r.subject_id:
            raise ValueError(f"mismatched pair {v.subject_id} / {r.subject_id}")
    visit, repeat = [], []
    for i, (v, r) in enumerate(pairs):
        rv = substream(seed, "labeler.surs", i, 0)
        rr = substream(seed, "labeler.surs", i, 0 if shared_phase else 1)
        visit.append(label_subject(weights, v, spacing, batch_size, rng=rv))
        repeat.append(label_subject(weights, r, spacing, batch_size, rng=rr))
    a = np.array([x.sltp_hist for x in visit])
    b = np.array([x.sltp_hist for x in repeat])
    rows = _agreement("sltp", [str(k) for k in range(1, stats.NUM_SLTP + 1)], a, b)
    a = np.array([x.ctes_hist for x in visit])
    b = np.array([x.ctes_hist for x in repeat])
    rows += _agreement("ctes", list(stats.CTES_NAMES), a, b)
    return ReproResult(rows, visit, repeat)
