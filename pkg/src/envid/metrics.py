"""Evaluation metrics: top-n accuracy, per-class P/R/F1, open-set ROC/AUC,
regression RMSE, volume binning, position maps and AIR pool correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyPool, LengthMismatch, SingleClassScores
from .rooms import schroeder_curve

VOLUME_RANGE = (10.0, 3750.0)


@dataclass
class ConfusionTally:
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    total: int = 0

    @classmethod
    def from_pairs(cls, predictions, truths) -> "ConfusionTally":
        if len(predictions) != len(truths):
            raise LengthMismatch("predictions and truths differ in length")
        t = cls()
        classes = set(predictions) | set(truths)
        for c in classes:
            t.tp[c] = t.fp[c] = t.fn[c] = 0
        for p, y in zip(predictions, truths):
            t.total += 1
            if p == y:
                t.tp[y] += 1
            else:
                t.fp[p] += 1
                t.fn[y] += 1
        return t

    def micro_accuracy(self) -> float:
        return sum(self.tp.values()) / self.total if self.total else 0.0


def top_n_accuracy(rankings, truths, n: int) -> float:
    """Fraction of queries whose truth appears in the first n ranked classes."""
    if len(rankings) != len(truths):
        raise LengthMismatch("rankings and truths differ in length")
    hits = sum(1 for r, y in zip(rankings, truths) if y in list(r)[:n])
    return hits / len(truths) if len(truths) else 0.0


def prf1(tally: ConfusionTally) -> dict:
    """Per-class precision/recall/F1; any 0/0 is 0 by convention."""
    out = {}
    for c in sorted(tally.tp, key=str):
        tp, fp, fn = tally.tp[c], tally.fp[c], tally.fn[c]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * p * r / (p + r) if p + r else 0.0
        out[c] = {"precision": p, "recall": r, "f1": f1}
    return out


def open_set_trial(protos, queries, rng: np.random.Generator,
                   p_exclude: float = 0.5):
    """50%-unknown open-set trials.

    protos: list of fewshot.Prototype; queries: iterable of (embedding,
    class id). Each query's true class is removed from the candidate
    prototype set with probability p_exclude, making it an unknown; the
    trial score is the minimum distance to the remaining prototypes.
    Returns a list of (score, is_known).
    """
    if not protos or not queries:
        raise EmptyPool("open-set trials need prototypes and queries")
    if len(protos) < 2:
        raise EmptyPool("open-set trials need at least 2 prototype classes")
    mat = np.stack([p.vector for p in protos])
    ids = [p.class_id for p in protos]
    out = []
    for emb, cid in queries:
        d = np.linalg.norm(mat - np.asarray(emb, dtype=np.float64), axis=1)
        exclude = cid in ids and rng.random() < p_exclude
        if exclude:
            keep = [i for i, pid in enumerate(ids) if pid != cid]
            score = float(d[keep].min())
            known = False
        else:
            score = float(d.min())
            known = cid in ids
        out.append((score, known))
    return out


@dataclass
class RocCurve:
    points: np.ndarray  # (M, 2) of (fpr, tpr), monotone from (0,0) to (1,1)
    auc: float


def roc_auc(scores) -> RocCurve:
    """Threshold sweep over min-distance scores; reject when score > theta.

    TPR = rejected unknowns / unknowns, FPR = rejected knowns / knowns.
    """
    s = np.array([x for x, _ in scores], dtype=np.float64)
    known = np.array([bool(k) for _, k in scores])
    n_unknown = int((~known).sum())
    n_known = int(known.sum())
    if n_unknown == 0 or n_known == 0:
        raise SingleClassScores("need both known and unknown trials")
    thresholds = np.concatenate([[np.inf], np.unique(s)[::-1], [-np.inf]])
    pts = []
    for th in thresholds:
        rej = s > th
        pts.append(((rej & known).sum() / n_known, (rej & ~known).sum() / n_unknown))
    pts = np.array(pts)
    auc = float(np.trapezoid(pts[:, 1], pts[:, 0]))
    return RocCurve(points=pts, auc=auc)


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise LengthMismatch(f"shapes {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def volume_bins(values, n_bins: int, vrange=VOLUME_RANGE) -> np.ndarray:
    lo, hi = vrange
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    width = (hi - lo) / n_bins
    return np.minimum(((v - lo) / width).astype(np.int64), n_bins - 1)


def volume_bin_classify(estimates, targets, n_bins: int,
                        vrange=VOLUME_RANGE) -> float:
    """Equal-width binning over the volume range; estimates are clamped into
    the range first. Returns the bin-agreement fraction."""
    e = volume_bins(estimates, n_bins, vrange)
    t = volume_bins(targets, n_bins, vrange)
    if e.size != t.size or e.size == 0:
        raise LengthMismatch("estimates and targets differ in length")
    return float(np.mean(e == t))


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    mask = np.isfinite(v)
    return float(v[mask].mean()) if mask.any() else float("nan")


def position_accuracy_map(results, rows: int = 5, cols: int = 5):
    """results: iterable of ((row, col), correct). Returns (matrix, stats)
    where stats carries the center cell, corner mean and row/column means."""
    hits = np.zeros((rows, cols))
    counts = np.zeros((rows, cols))
    for (r, c), ok in results:
        hits[r, c] += bool(ok)
        counts[r, c] += 1
    acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    corners = [acc[0, 0], acc[0, -1], acc[-1, 0], acc[-1, -1]]
    stats = {
        "center": float(acc[rows // 2, cols // 2]),
        "corner_mean": _finite_mean(corners),
        "row_means": [_finite_mean(acc[r]) for r in range(rows)],
        "col_means": [_finite_mean(acc[:, c]) for c in range(cols)],
        "overall": float(hits.sum() / counts.sum()) if counts.sum() else 0.0,
    }
    return acc, stats


def curve_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson coefficient between two decay curves resampled to a common
    length; degenerate (constant) curves compare by equality."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = 512
    ra = np.interp(np.linspace(0, 1, n), np.linspace(0, 1, a.size), a)
    rb = np.interp(np.linspace(0, 1, n), np.linspace(0, 1, b.size), b)
    if ra.std() == 0.0 or rb.std() == 0.0:
        return 1.0 if np.array_equal(ra, rb) else 0.0
    return float(np.corrcoef(ra, rb)[0, 1])


def air_pool_correlation(pool_a, pool_b) -> float:
    """Mean pairwise Pearson correlation of Schroeder decay curves across
    two AIR pools (elements: Air objects or raw sample arrays)."""
    if not len(pool_a) or not len(pool_b):
        raise EmptyPool("AIR pools must be nonempty")

    def curve(x):
        samples = x.samples if hasattr(x, "samples") else np.asarray(x)
        return schroeder_curve(samples)

    curves_a = [curve(x) for x in pool_a]
    curves_b = [curve(x) for x in pool_b]
    vals = [curve_correlation(ca, cb) for ca in curves_a for cb in curves_b]
    return float(np.mean(vals))


def write_class_report_csv(path, per_class: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1"])
        for c, row in per_class.items():
            w.writerow([c, row["precision"], row["recall"], row["f1"]])


def write_grid_report_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "accuracy"])
        for r in range(matrix.shape[0]):
            for c in range(matrix.shape[1]):
                w.writerow([r, c, matrix[r, c]])


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))
