"""COCO-style average precision with greedy score-ordered matching."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..boxes import BoxParams, iou

IOU_50 = (0.5,)
IOU_50_95 = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class DetectionRecord:
    stream_id: str
    segment: int
    box: BoxParams
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        return {"stream_id": self.stream_id, "segment": self.segment,
                "box": self.box.as_list(), "label": self.label, "score": self.score}

    @classmethod
    def from_json(cls, d: dict) -> "DetectionRecord":
        return cls(str(d["stream_id"]), int(d["segment"]), BoxParams.from_list(d["box"]),
                   str(d["label"]), float(d["score"]))


@dataclass(frozen=True)
class GTRecord:
    stream_id: str
    segment: int
    box: BoxParams
    label: str

    def to_json(self) -> dict:
        return {"stream_id": self.stream_id, "segment": self.segment,
                "box": self.box.as_list(), "label": self.label}

    @classmethod
    def from_json(cls, d: dict) -> "GTRecord":
        return cls(str(d["stream_id"]), int(d["segment"]), BoxParams.from_list(d["box"]),
                   str(d["label"]))


@dataclass
class MapReport:
    ap50: dict[str, float] = field(default_factory=dict)
    ap50_95: dict[str, float] = field(default_factory=dict)
    map_50: float = 0.0
    map_50_95: float = 0.0
    splits: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at this recall or beyond
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(sampled))


def _match(dets: list[DetectionRecord], gts: list[GTRecord], thr: float) -> np.ndarray:
    """TP indicator for ``dets`` (already score-sorted) against one class's GT."""
    by_image: dict[tuple[str, int], list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[(g.stream_id, g.segment)].append(j)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=np.int64)
    for i, d in enumerate(dets):
        best, best_j = thr, -1
        for j in by_image.get((d.stream_id, d.segment), ()):
            if taken[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = 1
    return tp


def eval_map(dets: Iterable[DetectionRecord], gts: Iterable[GTRecord],
             iou_thresholds: Sequence[float] = IOU_50_95,
             classes: dict[str, str] | None = None) -> MapReport:
    """Per-class AP, mAP at IoU 0.5 and averaged over ``iou_thresholds``.

    ``classes`` maps label -> split ("base"/"novel"); when given, unknown
    labels are rejected and split aggregates are reported.  Classes without
    ground truth have no AP and are left out of every mean.
    """
    dets = list(dets)
    gts = list(gts)
    if classes is not None:
        for rec in dets + gts:
            if rec.label not in classes:
                raise ValueError(f"unknown class {rec.label!r}")
    gt_by_cls: dict[str, list[GTRecord]] = defaultdict(list)
    det_by_cls: dict[str, list[DetectionRecord]] = defaultdict(list)
    for g in gts:
        gt_by_cls[g.label].append(g)
    for d in dets:
        det_by_cls[d.label].append(d)

    report = MapReport()
    for cls in sorted(set(gt_by_cls) | set(det_by_cls)):
        report.counts[cls] = {"detections": len(det_by_cls.get(cls, ())),
                              "ground_truth": len(gt_by_cls.get(cls, ()))}
    thresholds = [float(t) for t in iou_thresholds]
    for cls in sorted(gt_by_cls):
        ranked = sorted(det_by_cls[cls], key=lambda d: -d.score)  # stable on ties
        per_thr = [average_precision(_match(ranked, gt_by_cls[cls], t), len(gt_by_cls[cls]))
                   for t in thresholds]
        report.ap50[cls] = average_precision(_match(ranked, gt_by_cls[cls], 0.5),
                                             len(gt_by_cls[cls]))
        report.ap50_95[cls] = float(np.mean(per_thr))
    if report.ap50:
        report.map_50 = float(np.mean(list(report.ap50.values())))
        report.map_50_95 = float(np.mean(list(report.ap50_95.values())))
    if classes is not None:
        for split in ("base", "novel"):
            members = [c for c in report.ap50 if classes[c] == split]
            if members:
                report.splits[split] = {
                    "map_50": float(np.mean([report.ap50[c] for c in members])),
                    "map_50_95": float(np.mean([report.ap50_95[c] for c in members])),
                    "classes": len(members)}
    return report
