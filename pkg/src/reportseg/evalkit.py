"""Report-based organ-level detection metrics and mask-based DSC/NSD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class DetectionThresholds:
    voxel_count: int = 50
    confidence: float = 0.5

    def __post_init__(self):
        if self.voxel_count < 1:
            raise ValueError("voxel_count must be >= 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")

    @classmethod
    def scaled(cls, spacing: Sequence[float], voxel_count_1mm: int = 50, confidence: float = 0.5):
        """Keep the physical volume of a 1 mm isotropic voxel-count threshold."""
        n = int(round(voxel_count_1mm / float(np.prod(spacing))))
        return cls(max(n, 1), confidence)

    @classmethod
    def parse(cls, text: str) -> "DetectionThresholds":
        count, conf = text.split(",")
        return cls(int(count), float(conf))


def detect(prob: np.ndarray, organ_mask: np.ndarray, th: DetectionThresholds = DetectionThresholds()) -> bool:
    """True iff strictly more than ``voxel_count`` organ voxels exceed ``confidence``."""
    return int(np.count_nonzero(prob[organ_mask] > th.confidence)) > th.voxel_count


@dataclass(frozen=True)
class DetectionOutcome:
    scan_id: str
    organ: str
    predicted: bool
    truth: bool | None   # None = organ unlabeled by the report


@dataclass(frozen=True)
class OrganMetrics:
    organ: str
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def sensitivity(self) -> float:
        n = self.TP + self.FN
        return self.TP / n if n else math.nan

    @property
    def specificity(self) -> float:
        n = self.TN + self.FP
        return self.TN / n if n else math.nan

    @property
    def f1(self) -> float:
        n = 2 * self.TP + self.FP + self.FN
        return 2 * self.TP / n if n else math.nan


@dataclass(frozen=True)
class DetectionReport:
    per_organ: dict[str, OrganMetrics]
    sensitivity: float
    specificity: float
    f1: float


def _nanmean(xs: Iterable[float]) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return sum(xs) / len(xs) if xs else math.nan


def detection_metrics(outcomes: Iterable[DetectionOutcome]) -> DetectionReport:
    """Per-organ confusion counts and macro averages.

    Organs without labeled positives have undefined sensitivity and F1 and
    are left out of those macro averages.
    """
    outcomes = [o for o in outcomes if o.truth is not None]
    if not outcomes:
        raise ValueError("no labeled outcomes")
    counts: dict[str, list[int]] = {}
    for o in outcomes:
        c = counts.setdefault(o.organ, [0, 0, 0, 0])
        if o.truth and o.predicted:
            c[0] += 1
        elif not o.truth and o.predicted:
            c[1] += 1
        elif not o.truth:
            c[2] += 1
        else:
            c[3] += 1
    per = {k: OrganMetrics(k, *v) for k, v in sorted(counts.items())}
    with_pos = [m for m in per.values() if m.TP + m.FN > 0]
    return DetectionReport(
        per,
        _nanmean(m.sensitivity for m in with_pos),
        _nanmean(m.specificity for m in per.values()),
        _nanmean(m.f1 for m in with_pos),
    )


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbor outside the mask (volume edge counts as outside)."""
    padded = np.pad(mask, 1)
    inner = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    return (padded & ~inner)[1:-1, 1:-1, 1:-1]


def _dist_to(surf: np.ndarray, spacing) -> np.ndarray:
    return ndimage.distance_transform_edt(~surf, sampling=spacing)


@dataclass(frozen=True)
class OverlapScore:
    dsc: float
    nsd: float
    degenerate: bool = False


def dsc_nsd(pred_mask: np.ndarray, gt_mask: np.ndarray, nsd_tol_mm: float = 2.0,
            spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> OverlapScore:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask shapes differ")
    n_p, n_g = int(pred_mask.sum()), int(gt_mask.sum())
    if n_p == 0 and n_g == 0:
        return OverlapScore(1.0, 1.0, degenerate=True)
    dsc = 2.0 * int((pred_mask & gt_mask).sum()) / (n_p + n_g)
    if n_p == 0 or n_g == 0:
        return OverlapScore(dsc, 0.0)
    sp, sg = surface(pred_mask), surface(gt_mask)
    tol = nsd_tol_mm * (1 + 1e-9)
    close_p = int((_dist_to(sg, spacing)[sp] <= tol).sum())
    close_g = int((_dist_to(sp, spacing)[sg] <= tol).sum())
    nsd = (close_p + close_g) / (int(sp.sum()) + int(sg.sum()))
    return OverlapScore(dsc, nsd)


CSV_COLUMNS = ("organ", "TP", "FP", "TN", "FN", "sens", "spec", "f1", "dsc_mean", "nsd_mean")


def metrics_rows(report: DetectionReport, overlap: dict[str, list[OverlapScore]] | None = None) -> list[dict]:
    """Rows for the evaluation CSV, one per organ plus a ``macro`` row."""
    overlap = overlap or {}

    def fmt(x: float) -> str:
        return "" if math.isnan(x) else f"{x:.6f}"

    rows = []
    for organ, m in report.per_organ.items():
        scores = overlap.get(organ, [])
        rows.append({
            "organ": organ, "TP": m.TP, "FP": m.FP, "TN": m.TN, "FN": m.FN,
            "sens": fmt(m.sensitivity), "spec": fmt(m.specificity), "f1": fmt(m.f1),
            "dsc_mean": fmt(_nanmean(s.dsc for s in scores)),
            "nsd_mean": fmt(_nanmean(s.nsd for s in scores)),
        })
    tot = [sum(getattr(m, k) for m in report.per_organ.values()) for k in ("TP", "FP", "TN", "FN")]
    all_scores = [s for v in overlap.values() for s in v]
    rows.append({
        "organ": "macro", "TP": tot[0], "FP": tot[1], "TN": tot[2], "FN": tot[3],
        "sens": fmt(report.sensitivity), "spec": fmt(report.specificity), "f1": fmt(report.f1),
        "dsc_mean": fmt(_nanmean(s.dsc for s in all_scores)),
        "nsd_mean": fmt(_nanmean(s.nsd for s in all_scores)),
    })
    return rows
