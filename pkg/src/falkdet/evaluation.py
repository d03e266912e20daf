"""Detection inference, non-maximum suppression and PASCAL VOC 2007 mAP."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .bbox import apply_deltas_array
from .errors import InputError
from .falkon import falkon_predict
from .regions import Box, DetectionDataset, GroundTruth, iou, iou_matrix

if TYPE_CHECKING:
    from .bootstrap import ClassifierEnsemble

DEFAULT_NMS_IOU = 0.3
DEFAULT_SCORE_THRESH = 0.0
DEFAULT_MATCH_IOU = 0.5
RECALL_LEVELS = [k / 10 for k in range(11)]


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    confidence: float

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise InputError("detection confidence must be finite")


def nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Processing order: confidence descending, then smaller area, then input order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return np.lexsort((np.arange(len(scores)), area, -np.asarray(scores, dtype=np.float64)))


def nms_indices(boxes, scores, iou_thresh: float = DEFAULT_NMS_IOU) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in processing order."""
    if not 0 <= iou_thresh <= 1:
        raise InputError(f"NMS threshold must be in [0, 1], got {iou_thresh}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = nms_order(boxes, scores)
    kept: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    ov = iou_matrix(boxes, boxes) if len(order) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed |= ov[i] > iou_thresh
    return np.asarray(kept, dtype=np.int64)


def nms(detections: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy non-maximum suppression within one class of one image."""
    if not detections:
        if not 0 <= iou_thresh <= 1:
            raise InputError(f"NMS threshold must be in [0, 1], got {iou_thresh}")
        return []
    boxes = np.array([d.box.as_array() for d in detections])
    scores = np.array([d.confidence for d in detections])
    return [detections[i] for i in nms_indices(boxes, scores, iou_thresh)]


def detect(ensemble: "ClassifierEnsemble", dataset: DetectionDataset,
           score_thresh: float = DEFAULT_SCORE_THRESH, nms_iou: float = DEFAULT_NMS_IOU,
           bounds: tuple[float, float] | None = None) -> list[Detection]:
    """Score every proposal with every class model, refine boxes, then NMS per class and image.

    Confidences are the raw classifier scores.
    """
    dim = ensemble.dim
    if dim is not None and dim != dataset.d:
        raise InputError(f"dimension mismatch: ensemble expects d={dim}, dataset has d={dataset.d}")
    counts = [im.num_proposals for im in dataset.images]
    if not sum(counts):
        return []
    rows = np.concatenate([im.proposal_rows for im in dataset.images])
    boxes = np.concatenate([im.proposal_boxes for im in dataset.images])
    feats = dataset.features[rows]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    out: list[Detection] = []
    for c, (model, reg) in enumerate(zip(ensemble.models, ensemble.regressors)):
        if model is None:
            continue
        scores = falkon_predict(model, feats)
        refined = boxes
        if reg is not None:
            refined = apply_deltas_array(boxes, reg.predict(feats), bounds)
        for k, im in enumerate(dataset.images):
            lo, hi = offsets[k], offsets[k + 1]
            sel = lo + np.flatnonzero(scores[lo:hi] > score_thresh)
            b = refined[sel]
            valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) & np.all(np.isfinite(b), axis=1)
            sel, b = sel[valid], b[valid]
            for i in nms_indices(b, scores[sel], nms_iou):
                out.append(Detection(im.image_id, c, Box(*map(float, b[i])), float(scores[sel[i]])))
    return out


@dataclass
class ClassAP:
    ap: float | None
    recall: np.ndarray
    precision: np.ndarray
    tp: int
    fp: int
    num_gt: int


def match_detections(detections: Sequence[Detection], ground_truths: Sequence[GroundTruth],
                     match_iou: float = DEFAULT_MATCH_IOU) -> np.ndarray:
    """TP flags in descending-confidence order (stable for ties).

    Each detection is compared with the ground truth of its image that it
    overlaps most; it is a true positive when that overlap reaches
    ``match_iou`` and the ground truth has not been claimed by a
    higher-ranked detection.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    by_image: dict[str, list[GroundTruth]] = {}
    for g in ground_truths:
        by_image.setdefault(g.image_id, []).append(g)
    claimed = {k: [False] * len(v) for k, v in by_image.items()}
    flags = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        gts = by_image.get(det.image_id, [])
        if not gts:
            continue
        ovs = [iou(det.box, g.box) for g in gts]
        j = int(np.argmax(ovs))
        if ovs[j] >= match_iou and not claimed[det.image_id][j]:
            claimed[det.image_id][j] = True
            flags[rank] = True
    return flags


def class_average_precision(detections: Sequence[Detection], ground_truths: Sequence[GroundTruth],
                            match_iou: float = DEFAULT_MATCH_IOU) -> ClassAP:
    flags = match_detections(detections, ground_truths, match_iou)
    npos = len(ground_truths)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    n_tp, n_fp = int(tp[-1]) if len(tp) else 0, int(fp[-1]) if len(fp) else 0
    if npos == 0:
        return ClassAP(None, np.zeros(0), np.zeros(0), n_tp, n_fp, 0)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for t in RECALL_LEVELS:
        mask = recall >= t
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ClassAP(ap / len(RECALL_LEVELS), recall, precision, n_tp, n_fp, npos)


def voc07_ap(detections: Sequence[Detection], ground_truths: Sequence[GroundTruth],
             match_iou: float = DEFAULT_MATCH_IOU) -> float | None:
    """11-point interpolated average precision; ``None`` when there is no ground truth."""
    return class_average_precision(detections, ground_truths, match_iou).ap


@dataclass
class APReport:
    per_class: list[ClassAP]
    mAP: float
    class_names: list[str] = field(default_factory=list)

    @property
    def ap(self) -> list[float | None]:
        return [c.ap for c in self.per_class]


def evaluate_map(detections: Sequence[Detection], dataset: DetectionDataset,
                 match_iou: float = DEFAULT_MATCH_IOU) -> APReport:
    """Per-class VOC07 AP and their mean over classes that have ground truth.

    With no ground truth at all the mean is reported as 0.
    """
    known = {im.image_id for im in dataset.images}
    per_class = []
    for c in range(dataset.num_classes):
        gts = [g for im in dataset.images for g in im.ground_truths() if g.class_id == c]
        dets = [d for d in detections if d.class_id == c]
        for d in dets:
            if d.image_id not in known:
                raise InputError(f"detection refers to unknown image {d.image_id!r}")
        per_class.append(class_average_precision(dets, gts, match_iou))
    aps = [c.ap for c in per_class if c.ap is not None]
    return APReport(per_class, float(np.mean(aps)) if aps else 0.0, list(dataset.class_names))


def write_detections(detections: Sequence[Detection], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "class_id", "x1", "y1", "x2", "y2", "confidence"])
        for d in detections:
            w.writerow([d.image_id, d.class_id, repr(d.box.x1), repr(d.box.y1),
                        repr(d.box.x2), repr(d.box.y2), repr(d.confidence)])


def read_detections(path) -> list[Detection]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [Detection(r[0], int(r[1]), Box(*map(float, r[2:6])), float(r[6])) for r in reader]


def write_report(report: APReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "ap", "tp", "fp", "num_gt"])
        for name, c in zip(report.class_names, report.per_class):
            w.writerow([name, "" if c.ap is None else f"{c.ap:.6f}", c.tp, c.fp, c.num_gt])
        w.writerow(["mAP", f"{report.mAP:.6f}"])
