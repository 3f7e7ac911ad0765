"""Segmentation evaluation: voxel-wise DSC / PPV and lesion-wise
LTPR / LFPR over 3D connected components.

Undefined ratios (empty denominators) return NaN and are excluded from
cohort aggregates; the count of excluded subjects is reported.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

CONNECTIVITIES = (6, 18, 26)

METRIC_NAMES = ("dsc", "ltpr", "lfpr", "ppv")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """voxel = 1 iff prob >= threshold."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def _check_binary(mask: np.ndarray, name: str):
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} is not binary; values {vals[:5]}")


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: shapes {pred.shape} vs {gt.shape}")
    _check_binary(pred, "pred")
    _check_binary(gt, "gt")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def dsc(counts: ConfusionCounts) -> float:
    den = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / den if den else math.nan


def ppv(counts: ConfusionCounts) -> float:
    den = counts.tp + counts.fp
    return counts.tp / den if den else math.nan


def _offsets(connectivity: int):
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}")
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                order = abs(dz) + abs(dy) + abs(dx)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dz, dy, dx))
    return offs


def connected_components(mask: np.ndarray, connectivity: int = 26
                         ) -> Tuple[np.ndarray, int]:
    """Label foreground components 1..n, seeded in z,y,x scan order."""
    mask = np.asarray(mask)
    _check_binary(mask, "mask")
    offs = _offsets(connectivity)
    labels = np.zeros(mask.shape, dtype=np.int32)
    shape = mask.shape
    fg = np.argwhere(mask)
    n = 0
    for seed in fg:
        sz, sy, sx = map(int, seed)
        if labels[sz, sy, sx]:
            continue
        n += 1
        labels[sz, sy, sx] = n
        queue = deque([(sz, sy, sx)])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in offs:
                nz, ny, nx = z + dz, y + dy, x + dx
                if (0 <= nz < shape[0] and 0 <= ny < shape[1]
                        and 0 <= nx < shape[2]
                        and mask[nz, ny, nx] and not labels[nz, ny, nx]):
                    labels[nz, ny, nx] = n
                    queue.append((nz, ny, nx))
    return labels, n


def lesion_rates(pred: np.ndarray, gt: np.ndarray,
                 connectivity: int = 26) -> Tuple[float, float]:
    """LTPR = detected gt lesions / gt lesions; LFPR = spurious pred
    components / pred components.  Detection means >= 1 overlapping voxel."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"lesion_rates: shapes {pred.shape} vs {gt.shape}")
    gt_labels, n_gt = connected_components(gt, connectivity)
    pr_labels, n_pr = connected_components(pred, connectivity)

    if n_gt:
        detected = len(np.unique(gt_labels[(gt_labels > 0) & (pred > 0)]))
        ltpr = detected / n_gt
    else:
        ltpr = math.nan
    if n_pr:
        touching = len(np.unique(pr_labels[(pr_labels > 0) & (gt > 0)]))
        lfpr = (n_pr - touching) / n_pr
    else:
        lfpr = math.nan
    return ltpr, lfpr


def evaluate_masks(pred: np.ndarray, gt: np.ndarray,
                   connectivity: int = 26) -> Dict[str, float]:
    counts = confusion(pred, gt)
    ltpr, lfpr = lesion_rates(pred, gt, connectivity)
    return {"dsc": dsc(counts), "ltpr": ltpr, "lfpr": lfpr, "ppv": ppv(counts)}


# -- cohort reporting --------------------------------------------------


@dataclass
class SubjectResult:
    subject_id: int
    site_id: int
    seen: bool
    metrics: Dict[str, float]


@dataclass
class MetricsReport:
    per_subject: List[SubjectResult] = field(default_factory=list)

    def add(self, subject_id: int, site_id: int, seen: bool,
            metrics: Dict[str, float]):
        self.per_subject.append(SubjectResult(subject_id, site_id, seen, metrics))

    @staticmethod
    def _aggregate(results: Iterable[SubjectResult]) -> Dict[str, float]:
        agg = {}
        results = list(results)
        for name in METRIC_NAMES:
            vals = [r.metrics[name] for r in results
                    if not math.isnan(r.metrics[name])]
            agg[name] = sum(vals) / len(vals) if vals else math.nan
            agg[f"{name}_excluded"] = len(results) - len(vals)
        return agg

    def aggregates(self) -> Dict[str, float]:
        return self._aggregate(self.per_subject)

    def seen_unseen(self) -> Dict[str, Dict[str, float]]:
        return {
            "seen": self._aggregate(r for r in self.per_subject if r.seen),
            "unseen": self._aggregate(r for r in self.per_subject if not r.seen),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "site_id", "seen"] + list(METRIC_NAMES))
            for r in sorted(self.per_subject, key=lambda r: r.subject_id):
                w.writerow([r.subject_id, r.site_id, int(r.seen)]
                           + [f"{r.metrics[m]:.6f}" for m in METRIC_NAMES])


def write_summary_csv(path, rows: Dict[str, Dict[str, float]]):
    """Method-comparison block: one row per variant, DSC/LTPR/LFPR/PPV columns."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method"] + [m.upper() for m in METRIC_NAMES])
        for method, agg in rows.items():
            w.writerow([method] + [f"{agg[m]:.6f}" for m in METRIC_NAMES])
