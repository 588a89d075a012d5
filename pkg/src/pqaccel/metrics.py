"""Detection evaluation: IOU matching, precision/recall/mAP and an error taxonomy.

Error categories:

    A  object found but not labelled in the ground truth (manual tag on a D)
    B  mislocalized: best same-class IOU in [low_iou, iou_thr]
    C  duplicate: IOU > iou_thr with an already-matched ground-truth box
    D  ghost: IOU < low_iou with every ground-truth box
    E  missed because of occlusion (manual tag on an F)
    F  ground-truth box never matched
    G  wrong class (IOU > iou_thr with a box of another class, or partial
       overlap only with other-class boxes); mirrored objects are tagged manually
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError, ValidationError

log = logging.getLogger(__name__)

CATEGORIES = ("A", "B", "C", "D", "E", "F", "G")
AUTO_CATEGORIES = ("B", "C", "D", "F", "G")
CATEGORY_NAMES = {
    "A": "located but not labelled",
    "B": "bounding box not in place",
    "C": "duplicate overlapping box",
    "D": "non-existent object located",
    "E": "not located due to occlusion",
    "F": "not located at all",
    "G": "wrong class / mirrored",
}


@dataclass(frozen=True)
class Box:
    label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box {self}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


@dataclass
class PredOutcome:
    index: int
    label: str
    confidence: float | None
    tp: bool
    gt_index: int          # matched GT for a TP, best-overlap GT otherwise (-1 if none)
    best_iou: float        # best IOU over all GT boxes
    category: str = "TP"   # "TP" or one of B, C, D, G


@dataclass
class MatchResult:
    image_id: str
    preds: list[Box]
    gts: list[Box]
    outcomes: list[PredOutcome]
    gt_match: list[int]    # index of the matching prediction per GT, -1 if unmatched

    @property
    def tp(self) -> int:
        return sum(o.tp for o in self.outcomes)

    @property
    def fp(self) -> int:
        return len(self.outcomes) - self.tp

    @property
    def fn(self) -> int:
        return sum(m < 0 for m in self.gt_match)

    @property
    def unmatched_gts(self) -> list[int]:
        return [i for i, m in enumerate(self.gt_match) if m < 0]

    @property
    def unmatched_preds(self) -> list[int]:
        return [o.index for o in self.outcomes if not o.tp]


def _conf(b: Box) -> float:
    return 1.0 if b.confidence is None else b.confidence


def match_detections(preds, gts, iou_thr: float = 0.5, low_iou: float = 0.1,
                     image_id: str = "") -> MatchResult:
    """Greedy matching of predictions to ground truth in descending confidence.

    A prediction is a true positive when some unmatched GT of the same class has
    IOU > ``iou_thr``; the highest-IOU such GT (lowest index on ties) is taken.
    Equal confidences keep input order. Every other prediction is a false
    positive and gets an automatic error category.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValidationError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    preds, gts = list(preds), list(gts)
    order = sorted(range(len(preds)), key=lambda i: -_conf(preds[i]))
    gt_match = [-1] * len(gts)
    outcomes: dict[int, PredOutcome] = {}
    for i in order:
        p = preds[i]
        ious = [iou(p, g) for g in gts]
        best_any = max(ious, default=0.0)
        best_gt = max(range(len(gts)), key=lambda j: (ious[j], -j)) if gts else -1
        same = [j for j, g in enumerate(gts) if g.label == p.label]
        free = [j for j in same if gt_match[j] < 0 and ious[j] > iou_thr]
        if free:
            j = max(free, key=lambda j: (ious[j], -j))
            gt_match[j] = i
            outcomes[i] = PredOutcome(i, p.label, p.confidence, True, j, best_any)
            continue
        best_same = max((ious[j] for j in same), default=0.0)
        if any(ious[j] > iou_thr for j in same):
            cat = "C"
        elif any(ious[j] > iou_thr for j, g in enumerate(gts) if g.label != p.label):
            cat = "G"
        elif best_same >= low_iou:
            cat = "B"
        elif best_any < low_iou:
            cat = "D"
        else:
            cat = "G"
        outcomes[i] = PredOutcome(i, p.label, p.confidence, False, best_gt, best_any, cat)
    return MatchResult(image_id, preds, gts, [outcomes[i] for i in range(len(preds))], gt_match)


# --------------------------------------------------------------------------- precision / recall / mAP

@dataclass
class MetricsSummary:
    precision: float
    recall: float
    ap: dict[str, float]
    mAP: float
    tp: int
    fp: int
    n_gt: int
    precision_defined: bool = True
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"precision": round(self.precision, 4), "recall": round(self.recall, 4),
                "mAP": round(self.mAP, 4), "ap": {k: round(v, 4) for k, v in sorted(self.ap.items())},
                "tp": self.tp, "fp": self.fp, "n_gt": self.n_gt,
                "precision_defined": self.precision_defined, "warnings": list(self.warnings)}


def average_precision(tp_flags, n_gt: int) -> float:
    """All-point interpolated AP of a ranked list of TP/FP flags."""
    if n_gt <= 0:
        raise ValidationError("average precision needs at least one ground-truth instance")
    tp = fp = 0
    precisions, recalls = [], []
    for flag in tp_flags:
        tp += bool(flag)
        fp += not flag
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    # interpolated precision: best precision at any equal or higher recall
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recalls, precisions):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def precision_recall_map(results, classes=None) -> MetricsSummary:
    """Overall precision/recall plus per-class AP and their unweighted mean.

    Predictions of one class are ranked by confidence across all images; ties
    keep input order (image order, then prediction order). Classes without any
    ground truth have undefined AP and are left out of the mAP with a warning.
    With no predictions at all, precision is reported as 1 with
    ``precision_defined`` cleared.
    """
    results = list(results)
    if classes is None:
        found = set()
        for r in results:
            found.update(b.label for b in r.gts)
            found.update(b.label for b in r.preds)
        classes = sorted(found)
    warnings = []
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    n_gt = sum(len(r.gts) for r in results)

    ranked: dict[str, list] = {c: [] for c in classes}
    gt_count = {c: 0 for c in classes}
    seq = 0
    for r in results:
        for g in r.gts:
            if g.label in gt_count:
                gt_count[g.label] += 1
        for o in r.outcomes:
            if o.label in ranked:
                if o.confidence is None:
                    raise ValidationError(f"prediction {o.index} in image {r.image_id!r} has no confidence")
                ranked[o.label].append((-o.confidence, seq, o.tp))
                seq += 1

    ap = {}
    for c in classes:
        if gt_count[c] == 0:
            warnings.append(f"class {c!r} has no ground-truth instances; AP undefined, excluded from mAP")
            continue
        flags = [t for _, _, t in sorted(ranked[c])]
        ap[c] = average_precision(flags, gt_count[c])
    for w in warnings:
        log.warning(w)

    defined = tp + fp > 0
    if not defined:
        warnings.append("no predictions: precision undefined, reported as 1")
    return MetricsSummary(
        precision=tp / (tp + fp) if defined else 1.0,
        recall=tp / n_gt if n_gt else 0.0,
        ap=ap,
        mAP=sum(ap.values()) / len(ap) if ap else 0.0,
        tp=tp, fp=fp, n_gt=n_gt,
        precision_defined=defined,
        warnings=warnings,
    )


# --------------------------------------------------------------------------- error taxonomy

@dataclass(frozen=True)
class ManualTag:
    image_id: str
    target: str      # "pred", "gt" or "scene"
    index: int
    category: str    # A/E for boxes; clear/messy for scenes


@dataclass
class ErrorBreakdown:
    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})
    manual: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})
    scenes: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def source(self, category: str) -> str:
        m, c = self.manual[category], self.counts[category]
        if m == 0:
            return "auto"
        return "manual" if m == c else "auto+manual"

    @property
    def found_share(self) -> float:
        """Share of errors where the object was in fact found (A + B + C)."""
        total = self.total
        return 0.0 if total == 0 else (self.counts["A"] + self.counts["B"] + self.counts["C"]) / total

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "sources": {c: self.source(c) for c in CATEGORIES},
                "total": self.total, "found_share": round(self.found_share, 4),
                "scenes": {s: dict(v) for s, v in sorted(self.scenes.items())}}


def classify_errors(results, manual_tags=()) -> ErrorBreakdown:
    """Tally every non-TP outcome into the seven categories.

    Manual tags may turn a D prediction into A, an F ground-truth box into E,
    and label an image's scene as ``clear`` or ``messy``. Tagging anything else
    (including any true positive) is a validation error.
    """
    results = list(results)
    by_id = {r.image_id: r for r in results}
    box_tags: dict[tuple[str, str, int], str] = {}
    scene_of: dict[str, str] = {}
    for t in manual_tags:
        if t.image_id not in by_id:
            raise ValidationError(f"tag refers to unknown image {t.image_id!r}")
        r = by_id[t.image_id]
        if t.target == "scene":
            if t.category not in ("clear", "messy"):
                raise ValidationError(f"scene tag must be clear or messy, got {t.category!r}")
            scene_of[t.image_id] = t.category
            continue
        if t.target == "pred":
            if not 0 <= t.index < len(r.outcomes):
                raise ValidationError(f"{t.image_id}: no prediction {t.index}")
            o = r.outcomes[t.index]
            if o.tp:
                raise ValidationError(f"{t.image_id}: prediction {t.index} is a true positive and cannot be tagged")
            if t.category != "A" or o.category != "D":
                raise ValidationError(f"{t.image_id}: prediction {t.index} is {o.category}; "
                                      f"only D predictions can be re-tagged, and only as A")
        elif t.target == "gt":
            if not 0 <= t.index < len(r.gts):
                raise ValidationError(f"{t.image_id}: no ground-truth box {t.index}")
            if r.gt_match[t.index] >= 0:
                raise ValidationError(f"{t.image_id}: ground-truth box {t.index} was detected and cannot be tagged")
            if t.category != "E":
                raise ValidationError(f"{t.image_id}: missed ground-truth boxes can only be re-tagged as E")
        else:
            raise ValidationError(f"unknown tag target {t.target!r}")
        box_tags[(t.image_id, t.target, t.index)] = t.category

    out = ErrorBreakdown()

    def _bump(image_id, cat, manual):
        out.counts[cat] += 1
        if manual:
            out.manual[cat] += 1
        scene = scene_of.get(image_id)
        if scene is not None:
            out.scenes.setdefault(scene, {c: 0 for c in CATEGORIES})[cat] += 1

    for r in results:
        for o in r.outcomes:
            if o.tp:
                continue
            tag = box_tags.get((r.image_id, "pred", o.index))
            _bump(r.image_id, tag or o.category, tag is not None)
        for j in r.unmatched_gts:
            tag = box_tags.get((r.image_id, "gt", j))
            _bump(r.image_id, tag or "F", tag is not None)
    return out


# --------------------------------------------------------------------------- text formats

def parse_box_line(line: str, where: str = "") -> Box:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise DataError(f"{where}: expected 'class x_min y_min x_max y_max [confidence]', got {line!r}")
    try:
        coords = [float(v) for v in parts[1:5]]
        conf = float(parts[5]) if len(parts) == 6 else None
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None
    return Box(parts[0], *coords, confidence=conf)


def read_boxes(path) -> list[Box]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip() and not line.lstrip().startswith("#"):
                boxes.append(parse_box_line(line, f"{path}:{lineno}"))
    return boxes


def write_boxes(path, boxes) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            row = f"{b.label} {b.x_min:g} {b.y_min:g} {b.x_max:g} {b.y_max:g}"
            if b.confidence is not None:
                row += f" {b.confidence:g}"
            fh.write(row + "\n")


def read_box_dir(directory) -> dict[str, list[Box]]:
    """``{image_id: boxes}`` for every ``*.txt`` file in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {p.stem: read_boxes(p) for p in sorted(directory.glob("*.txt"))}


def read_tags(path) -> list[ManualTag]:
    """Sidecar tag file: ``image_id pred|gt index category`` or ``image_id scene - clear|messy``."""
    tags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'image_id pred_or_gt index category'")
            image_id, target, index, category = parts
            idx = -1 if target == "scene" else int(index)
            tags.append(ManualTag(image_id, target, idx, category))
    return tags


def evaluate_dirs(pred_dir, gt_dir, tags_path=None, iou_thr: float = 0.5, low_iou: float = 0.1):
    """Match every ground-truth file against its prediction file (missing = no predictions)."""
    gts = read_box_dir(gt_dir)
    preds = read_box_dir(pred_dir)
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise DataError(f"predictions for images without ground truth: {extra}")
    results = [match_detections(preds.get(k, []), gts[k], iou_thr, low_iou, image_id=k) for k in sorted(gts)]
    if tags_path and not os.path.exists(tags_path):
        raise DataError(f"tag file {tags_path} not found")
    tags = read_tags(tags_path) if tags_path else []
    return results, precision_recall_map(results), classify_errors(results, tags)
