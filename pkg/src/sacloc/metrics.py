"""Temporal IoU matching, interpolated AP, mAP and the pooled two-sample t-test."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .errors import ContractError

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
AP_MODES = ("eq7_literal", "standard")


@dataclass(frozen=True)
class Segment:
    """Closed frame interval ``[start, end]`` with a class label and score."""

    start: int
    end: int
    label: int
    score: float = 1.0
    video_id: str = ""

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ContractError(f"invalid segment bounds [{self.start}, {self.end}]")

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "start": int(self.start), "end": int(self.end),
                "label": int(self.label), "score": float(self.score)}

    @classmethod
    def from_json(cls, obj: dict, video_id: str | None = None) -> "Segment":
        return cls(int(obj["start"]), int(obj["end"]), int(obj["label"]),
                   float(obj.get("score", 1.0)),
                   str(obj.get("video_id", "")) if video_id is None else video_id)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    ap_mode: str = "eq7_literal"

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        if not self.iou_thresholds or any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ContractError(f"IoU thresholds must lie in (0, 1], got {self.iou_thresholds}")
        if self.ap_mode not in AP_MODES:
            raise ContractError(f"unknown ap_mode {self.ap_mode!r}; expected one of {AP_MODES}")


def temporal_iou(a: Segment, b: Segment) -> float:
    # frames are unit cells, so [start, end] covers [start, end + 1) on the line
    inter = min(a.end, b.end) + 1 - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


def _ranking_key(seg: Segment):
    return (-seg.score, seg.start, seg.video_id)


def rank_detections(dets: Iterable[Segment]) -> list[Segment]:
    """Descending score; ties by earlier start, then lower video id."""
    return sorted(dets, key=_ranking_key)


def match_detections(dets: Sequence[Segment], gts: Sequence[Segment], iou_threshold: float) -> list[bool]:
    """Greedy one-to-one matching in the given (score-descending) order.

    Each detection claims the unmatched ground truth of the same class and
    video with the highest IoU, provided it reaches ``iou_threshold``.
    """
    pool = defaultdict(list)
    for i, g in enumerate(gts):
        pool[(g.video_id, g.label)].append(i)
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for i in pool.get((d.video_id, d.label), ()):
            if used[i]:
                continue
            iou = temporal_iou(d, gts[i])
            if iou > best_iou:
                best, best_iou = i, iou
        if best >= 0 and best_iou >= iou_threshold:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def interpolated_ap(flags: Sequence[bool], n_ground_truth: int | None = None,
                    mode: str = "eq7_literal") -> float:
    """Interpolated average precision of a ranked list of correctness flags.

    ``eq7_literal`` averages ``max_{i >= n} p_i`` over every prediction.
    ``standard`` averages the interpolated precision at each correct
    detection and divides by the number of ground truths instead.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    hits = np.cumsum(flags)
    precision = hits / np.arange(1, flags.size + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    if mode == "eq7_literal":
        return float(interp.mean())
    if mode == "standard":
        n_gt = int(hits[-1]) if n_ground_truth is None else n_ground_truth
        if n_gt <= 0:
            return 0.0
        return float(interp[flags].sum() / n_gt)
    raise ContractError(f"unknown ap mode {mode!r}")


def mean_ap(per_class_ap: Sequence[float]) -> float:
    if len(per_class_ap) < 1:
        raise ContractError("mean_ap needs at least one class")
    return float(np.mean(per_class_ap))


def evaluate_map(dets: Sequence[Segment], gts: Sequence[Segment], classes: Sequence[int],
                 iou_threshold: float, mode: str = "eq7_literal") -> tuple[float, dict]:
    """mAP at one threshold plus per-class AP; classes without detections score 0."""
    per_class = {}
    for c in classes:
        cd = rank_detections(d for d in dets if d.label == c)
        cg = [g for g in gts if g.label == c]
        flags = match_detections(cd, cg, iou_threshold)
        per_class[c] = interpolated_ap(flags, len(cg), mode)
    return mean_ap([per_class[c] for c in classes]), per_class


# ----------------------------------------------------------------------
# significance

@dataclass
class TTestReport:
    mean1: float
    mean2: float
    n1: int
    n2: int
    pooled_sd: float
    t: float
    p: float
    dof: int
    degenerate_variance: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        extra = out.pop("extra")
        out.update(extra)
        return out


def student_t_sf2(t: float, dof: int) -> float:
    """Two-tailed p-value of Student's t via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return float(min(1.0, max(0.0, betainc(dof / 2.0, 0.5, x))))


def students_t(group1: Sequence[float], group2: Sequence[float]) -> TTestReport:
    g1 = np.asarray(group1, dtype=np.float64)
    g2 = np.asarray(group2, dtype=np.float64)
    n1, n2 = g1.size, g2.size
    if n1 < 2 or n2 < 2:
        raise ContractError(f"t-test needs at least two scores per group, got {n1} and {n2}")
    m1, m2 = float(g1.mean()), float(g2.mean())
    dof = n1 + n2 - 2
    pooled = math.sqrt(((n1 - 1) * g1.var(ddof=1) + (n2 - 1) * g2.var(ddof=1)) / dof)
    if pooled == 0.0:
        if m1 == m2:
            return TTestReport(m1, m2, n1, n2, 0.0, 0.0, 1.0, dof)
        return TTestReport(m1, m2, n1, n2, 0.0, math.copysign(math.inf, m1 - m2), 0.0, dof,
                           degenerate_variance=True)
    t = (m1 - m2) / (pooled * math.sqrt(1.0 / n1 + 1.0 / n2))
    return TTestReport(m1, m2, n1, n2, pooled, t, student_t_sf2(t, dof), dof)
