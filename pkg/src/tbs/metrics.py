"""Segmentation evaluation statistics.

Class-wise mIoU accumulates intersections and unions across episodes before
dividing (dataset-style); per-episode averaging is available behind a flag.
FB-IoU is the mean of foreground and background IoU, each accumulated over
all episodes ignoring class. IoU of two empty masks is defined as 1.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import ShapeError


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"iou: shapes {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class EpisodeResult:
    """Intersection/union counts of one evaluated episode."""

    category: int
    fg_intersection: int
    fg_union: int
    bg_intersection: int
    bg_union: int
    aa_sf_qf: Optional[float] = None
    aa_sb_qb: Optional[float] = None
    aa_avg: Optional[float] = None


def episode_result(category: int, pred: np.ndarray, gt: np.ndarray,
                   **aa) -> EpisodeResult:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"episode_result: shapes {p.shape} vs {g.shape}")
    return EpisodeResult(
        category=category,
        fg_intersection=int(np.logical_and(p, g).sum()),
        fg_union=int(np.logical_or(p, g).sum()),
        bg_intersection=int(np.logical_and(~p, ~g).sum()),
        bg_union=int(np.logical_or(~p, ~g).sum()),
        **aa)


def _ratio(i: int, u: int) -> float:
    return 1.0 if u == 0 else i / u


def per_class_iou(results: Sequence[EpisodeResult],
                  classes: Sequence[int],
                  per_episode: bool = False) -> Dict[int, Optional[float]]:
    """Per-class IoU; accumulation convention by default."""
    out: Dict[int, Optional[float]] = {}
    for c in classes:
        bucket = [r for r in results if r.category == c]
        if not bucket:
            warnings.warn(f"class {c}: no episodes, IoU reported absent")
            out[c] = None
        elif per_episode:
            out[c] = float(np.mean([_ratio(r.fg_intersection, r.fg_union)
                                    for r in bucket]))
        else:
            out[c] = _ratio(sum(r.fg_intersection for r in bucket),
                            sum(r.fg_union for r in bucket))
    return out


def miou(results: Sequence[EpisodeResult], classes: Sequence[int],
         per_episode: bool = False) -> Optional[float]:
    """Mean of per-class IoUs over the given classes."""
    per_class = per_class_iou(results, classes, per_episode)
    present = [v for v in per_class.values() if v is not None]
    return float(np.mean(present)) if present else None


def fb_iou(results: Sequence[EpisodeResult]) -> float:
    """Mean of class-agnostic foreground and background IoU."""
    fg = _ratio(sum(r.fg_intersection for r in results),
                sum(r.fg_union for r in results))
    bg = _ratio(sum(r.bg_intersection for r in results),
                sum(r.bg_union for r in results))
    return (fg + bg) / 2.0


def _present_mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass
class FoldReport:
    fold_id: int
    per_class: Dict[int, Optional[float]]
    miou: Optional[float]
    fb_iou: float
    aa_sf_qf: Optional[float]
    aa_sb_qb: Optional[float]
    aa_avg: Optional[float]


@dataclass
class EvalReport:
    episode_count: int
    seed: int
    use_qs: bool
    use_ts: bool
    per_fold: Dict[int, FoldReport] = field(default_factory=dict)


def build_fold_report(fold_id: int, results: Sequence[EpisodeResult],
                      classes: Sequence[int],
                      per_episode: bool = False) -> FoldReport:
    return FoldReport(
        fold_id=fold_id,
        per_class=per_class_iou(results, classes, per_episode),
        miou=miou(results, classes, per_episode),
        fb_iou=fb_iou(results),
        aa_sf_qf=_present_mean([r.aa_sf_qf for r in results]),
        aa_sb_qb=_present_mean([r.aa_sb_qb for r in results]),
        aa_avg=_present_mean([r.aa_avg for r in results]),
    )


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def report_csv(report: EvalReport) -> str:
    """One row per (fold, class); fold-level stats repeat on each row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold", "class", "iou", "miou", "fb_iou",
                     "aa_sf_qf", "aa_sb_qb", "aa_avg"])
    for fold_id in sorted(report.per_fold):
        fr = report.per_fold[fold_id]
        for c in sorted(fr.per_class):
            writer.writerow([fold_id, c, _fmt(fr.per_class[c]), _fmt(fr.miou),
                             _fmt(fr.fb_iou), _fmt(fr.aa_sf_qf),
                             _fmt(fr.aa_sb_qb), _fmt(fr.aa_avg)])
    return buf.getvalue()


def report_summary(report: EvalReport) -> str:
    lines = [
        f"episodes per fold: {report.episode_count}",
        f"seed: {report.seed}",
        f"ablation: use_qs={report.use_qs} use_ts={report.use_ts}",
    ]
    for fold_id in sorted(report.per_fold):
        fr = report.per_fold[fold_id]
        per_class = "  ".join(f"c{c}={_fmt(v) or 'absent'}"
                              for c, v in sorted(fr.per_class.items()))
        lines.append(f"fold {fold_id}: miou={_fmt(fr.miou) or 'absent'} "
                     f"fb_iou={_fmt(fr.fb_iou)}  [{per_class}]")
        lines.append(f"  aa: sf_qf={_fmt(fr.aa_sf_qf) or 'absent'} "
                     f"sb_qb={_fmt(fr.aa_sb_qb) or 'absent'} "
                     f"avg={_fmt(fr.aa_avg) or 'absent'}")
    return "\n".join(lines) + "\n"
