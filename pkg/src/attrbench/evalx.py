"""Overlap between heatmaps and a binary ground truth.

Each heatmap is taken in absolute value, smoothed at a ladder of Gaussian
widths and binarized at evenly spaced thresholds; every binary map is scored
against the truth with Dice. Threshold-free ROC and precision-recall areas are
computed per smoothing level.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .volume import BinaryMask, Volume3D, gaussian_smooth

log = logging.getLogger(__name__)

FWHM_LEVELS = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 16, 20, 24, 28, 32)
N_THRESHOLDS = 50


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    if a.dims != b.dims:
        raise ValueError(f"mask grids differ: {a.dims} vs {b.dims}")
    return _dice_arrays(a.data, b.data)


def _dice_arrays(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        log.info("Dice of two empty masks defined as 1.0")
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def thresholds_between(lo: float, hi: float, n: int = N_THRESHOLDS) -> np.ndarray:
    """``n`` evenly spaced values strictly inside (lo, hi)."""
    return np.linspace(lo, hi, n + 2)[1:-1]


def _labels_scores(h, truth):
    scores = np.asarray(getattr(h, "data", h), dtype=np.float64).ravel()
    labels = np.asarray(getattr(truth, "data", truth), dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("heatmap and truth have different sizes")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("truth needs at least one positive and one negative voxel")
    return scores, labels


def roc_auc(h, truth) -> float:
    """Mann-Whitney area under the ROC curve with midranks for ties."""
    scores, labels = _labels_scores(h, truth)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(h, truth):
    """False and true positive rates at every distinct score (descending)."""
    scores, labels = _labels_scores(h, truth)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(l)[last]
    fp = (last + 1) - tp
    return np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]], s[last]


def pr_curve(h, truth):
    """Precision and recall after each group of tied scores, by descending score."""
    scores, labels = _labels_scores(h, truth)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(l)[last]
    precision = tp / (last + 1)
    recall = tp / labels.sum()
    return precision, recall, s[last]


def pr_auc(h, truth) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    precision, recall, _ = pr_curve(h, truth)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class OverlapReport:
    """Dice over the smoothing-by-threshold grid plus per-smoothing AUCs."""

    method: str
    fwhm: list
    thresholds: list  # [n_fwhm][n_thr]
    dice: list  # [n_fwhm][n_thr]
    roc_auc: list
    pr_auc: list
    constant_rows: list = field(default_factory=list)

    @property
    def shape(self) -> tuple:
        return (len(self.dice), len(self.dice[0]) if self.dice else 0)

    def best(self) -> dict:
        """Grid maximum of Dice; ties go to the smallest FWHM, then the lowest threshold."""
        d = np.asarray(self.dice)
        best_row = d.max(axis=1)
        i = int(np.argmax(best_row))
        j = int(np.argmax(d[i]))
        return {"fwhm": self.fwhm[i], "threshold": self.thresholds[i][j], "dice": float(d[i, j])}

    def best_dice_by_fwhm(self) -> list:
        return [float(max(row)) for row in self.dice]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["best"] = self.best()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "OverlapReport":
        keys = ("method", "fwhm", "thresholds", "dice", "roc_auc", "pr_auc", "constant_rows")
        return cls(**{k: d[k] for k in keys if k in d})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "fwhm", "threshold", "dice"])
            for f, ts, ds in zip(self.fwhm, self.thresholds, self.dice):
                for t, v in zip(ts, ds):
                    w.writerow([self.method, f, repr(float(t)), repr(float(v))])


def dice_grid(heatmap, truth: BinaryMask, fwhm_levels=FWHM_LEVELS, n_thresholds: int = N_THRESHOLDS,
              method: str | None = None) -> OverlapReport:
    """Score ``|heatmap|`` against ``truth`` for every smoothing level and threshold."""
    vol = getattr(heatmap, "volume", heatmap)
    method = method or getattr(heatmap, "method", "heatmap")
    if vol.dims != truth.dims:
        raise ValueError(f"heatmap grid {vol.dims} differs from truth grid {truth.dims}")
    base = vol.like(np.abs(vol.data))
    rows_t, rows_d, rocs, prs, flagged = [], [], [], [], []
    for f in fwhm_levels:
        sm = gaussian_smooth(base, float(f)).data
        lo, hi = float(sm.min()), float(sm.max())
        if lo == hi:
            log.warning("%s: heatmap is constant at FWHM %s; scoring the full mask", method, f)
            flagged.append(f)
            ts = [lo] * n_thresholds
            full = _dice_arrays(np.ones(sm.shape, bool), truth.data)
            ds = [full] * n_thresholds
        else:
            ts = thresholds_between(lo, hi, n_thresholds).tolist()
            ds = [_dice_arrays(sm > t, truth.data) for t in ts]
        rows_t.append(ts)
        rows_d.append(ds)
        rocs.append(roc_auc(sm, truth))
        prs.append(pr_auc(sm, truth))
    return OverlapReport(method, list(fwhm_levels), rows_t, rows_d, rocs, prs, flagged)


def best_smoothing_table(reports) -> list[dict]:
    """Per method: the FWHM maximizing best-threshold Dice and the FWHM maximizing
    PR-AUC, with both metrics at both. Ties pick the smallest FWHM."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports")
    out = []
    for r in reports:
        best_d = r.best_dice_by_fwhm()
        order = np.argsort(r.fwhm, kind="mergesort")
        i_d = min(order, key=lambda k: (-best_d[k], r.fwhm[k]))
        i_p = min(order, key=lambda k: (-r.pr_auc[k], r.fwhm[k]))
        out.append({
            "method": r.method,
            "dice_fwhm": r.fwhm[i_d],
            "dice_at_dice_fwhm": best_d[i_d],
            "pr_auc_at_dice_fwhm": r.pr_auc[i_d],
            "pr_fwhm": r.fwhm[i_p],
            "dice_at_pr_fwhm": best_d[i_p],
            "pr_auc_at_pr_fwhm": r.pr_auc[i_p],
        })
    return out


def format_table(rows) -> str:
    lines = [f"{'method':<8}{'best Dice':>30}{'best PR-AUC':>32}"]
    for r in rows:
        lines.append(
            f"{r['method']:<8}"
            f"  s{r['dice_fwhm']:<3} dice={r['dice_at_dice_fwhm']:.3f} pr-auc={r['pr_auc_at_dice_fwhm']:.3f}"
            f"  s{r['pr_fwhm']:<3} dice={r['dice_at_pr_fwhm']:.3f} pr-auc={r['pr_auc_at_pr_fwhm']:.3f}"
        )
    return "\n".join(lines)


def write_curves(heatmap, truth: BinaryMask, fwhm: float, path_prefix) -> None:
    """ROC and PR samples at one smoothing level, as two CSV files."""
    vol = getattr(heatmap, "volume", heatmap)
    sm = gaussian_smooth(vol.like(np.abs(vol.data)), float(fwhm))
    fpr, tpr, _ = roc_curve(sm, truth)
    prec, rec, _ = pr_curve(sm, truth)
    with open(f"{path_prefix}_roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows(zip(fpr.tolist(), tpr.tolist()))
    with open(f"{path_prefix}_pr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision"])
        w.writerows(zip(rec.tolist(), prec.tolist()))
