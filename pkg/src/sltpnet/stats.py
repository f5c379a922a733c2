"""Confusion matrices, CTES aggregation, stratified accuracy, histograms, R^2 and ICC(3,1)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

NUM_SLTP = 10

CTES_NAMES = ("vanishing", "apical-bronchitic", "diffuse", "senile", "oCPFE", "rCPFE")
# sLTP (1-based) -> CTES (1-based, index into CTES_NAMES)
CTES_MAP: Mapping[int, int] = {1: 1, 2: 1, 3: 2, 5: 2, 9: 2, 4: 3, 6: 3, 7: 4, 8: 5, 10: 6}


class StatsError(ValueError):
    pass


# -- confusion matrices --------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted, both 1-based in ``names`` order."""

    counts: np.ndarray
    names: tuple = ()

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")


def confusion(true, pred, k: int = NUM_SLTP, names: Sequence[str] = ()) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise StatsError(f"{true.shape[0]} true labels but {pred.shape[0]} predictions")
    for what, v in (("true", true), ("predicted", pred)):
        if v.size and (v.min() < 1 or v.max() > k):
            raise StatsError(f"{what} labels must lie in 1..{k}")
    counts = np.bincount((true - 1) * k + (pred - 1), minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, tuple(names) or tuple(str(i) for i in range(1, k + 1)))


def to_ctes(labels, mapping: Mapping[int, int] = CTES_MAP) -> np.ndarray:
    """Map 1-based sLTP labels to 1-based CTES labels; 0 stays 0."""
    lut = np.zeros(NUM_SLTP + 1, dtype=np.int64)
    for s, c in mapping.items():
        lut[s] = c
    return lut[np.asarray(labels, dtype=np.int64)]


def collapse_to_ctes(cm: ConfusionMatrix, mapping: Mapping[int, int] = CTES_MAP) -> ConfusionMatrix:
    if cm.counts.shape != (NUM_SLTP, NUM_SLTP):
        raise StatsError(f"expected a {NUM_SLTP}x{NUM_SLTP} matrix, got {cm.counts.shape}")
    if sorted(mapping) != list(range(1, NUM_SLTP + 1)):
        raise StatsError("CTES map must be defined on every sLTP 1..10")
    m = len(set(mapping.values()))
    # one-hot projection P (10 x m); collapsed = P^T C P
    P = np.zeros((NUM_SLTP, m), dtype=np.int64)
    for s, c in mapping.items():
        P[s - 1, c - 1] = 1
    names = CTES_NAMES if m == len(CTES_NAMES) else ()
    return ConfusionMatrix(P.T @ cm.counts @ P, tuple(names) or tuple(str(i) for i in range(1, m + 1)))


@dataclass
class GroupAccuracy:
    group: str
    n_rois: int
    n_subjects: int
    sltp_accuracy: float
    ctes_accuracy: float


def stratify_accuracy(groups, subjects, true, pred) -> list[GroupAccuracy]:
    """Per-group top-1 accuracy at the sLTP and CTES levels, groups sorted by name."""
    groups = np.asarray(groups, dtype=object)
    subjects = np.asarray(subjects, dtype=object)
    true = np.asarray(true)
    pred = np.asarray(pred)
    if not len(groups) == len(subjects) == len(true) == len(pred):
        raise StatsError("metadata and label vectors differ in length")
    out = []
    ct, cp = to_ctes(true), to_ctes(pred)
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        out.append(
            GroupAccuracy(
                str(g),
                int(sel.sum()),
                len(set(subjects[sel].tolist())),
                float(np.mean(true[sel] == pred[sel])),
                float(np.mean(ct[sel] == cp[sel])),
            )
        )
    return out


# -- histograms ----------------------------------------------------------------


def class_histogram(labels: np.ndarray, mask: Optional[np.ndarray] = None, num_classes: int = NUM_SLTP) -> np.ndarray:
    """Percentage of lung occupied by each class 1..``num_classes``.

    With a ``mask`` the labels are a dense map and percentages are voxel
    counts over lung voxels. Without one, ``labels`` are per-sample labels
    (0 = unlabeled) and percentages are counts over all samples.
    """
    labels = np.asarray(labels)
    if mask is not None:
        lung = np.asarray(mask) != 0
        n = int(lung.sum())
        if n == 0:
            raise StatsError("lung mask is empty")
        values = labels[lung]
    else:
        values = labels.ravel()
        n = values.size
        if n == 0:
            raise StatsError("no samples")
    values = values.astype(np.int64)
    if values.size and (values.min() < 0 or values.max() > num_classes):
        raise StatsError(f"labels must lie in 0..{num_classes}")
    counts = np.bincount(values, minlength=num_classes + 1)[1:]
    return 100.0 * counts / n


def ctes_histogram(sltp_hist: np.ndarray, mapping: Mapping[int, int] = CTES_MAP) -> np.ndarray:
    out = np.zeros(len(set(mapping.values())))
    for s, c in sorted(mapping.items()):
        out[c - 1] += sltp_hist[s - 1]
    return out


# -- agreement statistics ------------------------------------------------------


def pearson_r2(x, y) -> float:
    """Squared Pearson correlation of two paired vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise StatsError("x and y differ in length")
    if x.size < 3:
        raise StatsError("need at least 3 pairs")
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise StatsError("correlation is undefined for a constant vector")
    sxy = math.fsum(dx * dy)
    return min(1.0, sxy * sxy / (sxx * syy))


@dataclass
class ICCResult:
    icc: float
    lower: float
    upper: float
    n: int
    k: int
    msr: float
    mse: float
    f: float
    degenerate: bool = False


def anova_two_way(values) -> tuple[float, float]:
    """Between-subject and residual mean squares of an n x k table.

    Sums of squares are accumulated in exact rational arithmetic, so the
    result does not depend on summation order and column offsets cancel
    exactly whenever the shifted table is itself exactly representable.
    """
    v = np.asarray(values, dtype=np.float64)
    n, k = v.shape
    q = [[Fraction(float(a)) for a in row] for row in v]
    row_means = [sum(r, Fraction(0)) / k for r in q]
    col_means = [sum((q[i][j] for i in range(n)), Fraction(0)) / n for j in range(k)]
    grand = sum(col_means, Fraction(0)) / k
    ssr = k * sum(((m - grand) ** 2 for m in row_means), Fraction(0))
    sse = sum(
        ((q[i][j] - row_means[i] - col_means[j] + grand) ** 2 for i in range(n) for j in range(k)),
        Fraction(0),
    )
    msr = ssr / (n - 1)
    mse = sse / ((n - 1) * (k - 1))
    return msr, mse


def icc31(pairs, alpha: float = 0.05) -> ICCResult:
    """ICC(3,1), two-way mixed consistency, with the Shrout-Fleiss F interval."""
    v = np.asarray(pairs, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 2:
        raise StatsError(f"expected an n x k table with k >= 2, got shape {v.shape}")
    n, k = v.shape
    if n < 3:
        raise StatsError("need at least 3 subjects")
    if not np.all(np.isfinite(v)):
        raise StatsError("table holds non-finite values")
    msr_q, mse_q = anova_two_way(v)
    msr, mse = float(msr_q), float(mse_q)
    if msr_q == 0 and mse_q == 0:
        return ICCResult(1.0, 1.0, 1.0, n, k, msr, mse, float("nan"), degenerate=True)
    icc = float((msr_q - mse_q) / (msr_q + (k - 1) * mse_q))
    if mse_q == 0:
        return ICCResult(icc, 1.0, 1.0, n, k, msr, mse, float("inf"), degenerate=True)
    f = float(msr_q / mse_q)
    df1, df2 = n - 1, (n - 1) * (k - 1)
    q_hi = f_ppf(1.0 - alpha / 2.0, df1, df2)
    q_lo = f_ppf(alpha / 2.0, df1, df2)

    def back(fq):
        return (fq - 1.0) / (fq + k - 1.0)

    return ICCResult(icc, back(f / q_hi), back(f / q_lo), n, k, msr, mse, f)


# -- F quantiles via the inverse regularised incomplete beta -------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise StatsError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def _log_beta_front(a: float, b: float, x: float) -> float:
    return math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise StatsError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(_log_beta_front(a, b, x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def betaincinv(a: float, b: float, p: float) -> float:
    """Inverse of ``betainc`` in ``x``: bracketed Newton iteration."""
    if not 0.0 <= p <= 1.0:
        raise StatsError(f"probability {p} outside [0, 1]")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    x = a / (a + b)
    lbeta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    for _ in range(200):
        err = betainc(a, b, x) - p
        if err > 0:
            hi = x
        else:
            lo = x
        dens = math.exp((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - lbeta)
        step = err / dens if dens > 0 else 0.0
        nx = x - step
        if not lo < nx < hi:
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 1e-15 * max(x, 1e-300) or hi - lo < 1e-16:
            return nx
        x = nx
    return x


def f_ppf(p: float, d1: float, d2: float) -> float:
    """Quantile of the F(d1, d2) distribution."""
    if d1 <= 0 or d2 <= 0:
        raise StatsError("F degrees of freedom must be positive")
    x = betaincinv(d1 / 2.0, d2 / 2.0, p)
    if x >= 1.0:
        return float("inf")
    return d2 * x / (d1 * (1.0 - x))


def f_cdf(f: float, d1: float, d2: float) -> float:
    if f <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))


# -- CSV and SVG artefacts -----------------------------------------------------


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(cm.names))
        for name, row in zip(cm.names, cm.counts):
            w.writerow([name] + [int(v) for v in row])


def write_group_csv(rows: Sequence[GroupAccuracy], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scanner_model", "n_rois", "n_subjects", "sltp_accuracy", "ctes_accuracy"])
        for r in rows:
            w.writerow([r.group, r.n_rois, r.n_subjects, repr(r.sltp_accuracy), repr(r.ctes_accuracy)])


REPRO_COLUMNS = ["level", "class", "n", "r2", "icc", "icc_lower", "icc_upper", "degenerate", "display"]


def write_repro_csv(rows: Sequence[dict], path) -> None:
    """Rows carry full-precision values plus a rounded ``display`` column."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPRO_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in REPRO_COLUMNS})


def confusion_svg(cm: ConfusionMatrix, title: str = "", cell: int = 36) -> str:
    """Row-normalised heatmap with counts written in each cell."""
    k = cm.k
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    pad = 90
    size = pad + k * cell + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" font-family="sans-serif" font-size="10">',
        f'<text x="{pad}" y="14" font-size="12">{title}</text>',
    ]
    for i in range(k):
        y = pad + i * cell
        out.append(f'<text x="{pad - 4}" y="{y + cell / 2 + 3}" text-anchor="end">{cm.names[i]}</text>')
        out.append(
            f'<text x="{pad + i * cell + cell / 2}" y="{pad - 6}" text-anchor="end" '
            f'transform="rotate(-45 {pad + i * cell + cell / 2} {pad - 6})">{cm.names[i]}</text>'
        )
        for j in range(k):
            x = pad + j * cell
            shade = int(round(255 * (1.0 - frac[i, j])))
            colour = f"rgb({shade},{shade},255)"
            ink = "white" if frac[i, j] > 0.5 else "black"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{colour}" stroke="#888"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 3}" text-anchor="middle" fill="{ink}">{int(counts[i, j])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
