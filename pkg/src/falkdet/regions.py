"""Region proposals, ground truth, IoU labeling and the on-disk dataset format.

Dataset directory layout::

    meta.txt         d=<int> / classes=<comma separated names> / images=<int>
    proposals.csv    image_id,x1,y1,x2,y2,feat_row
    groundtruth.csv  image_id,class_id,x1,y1,x2,y2,feat_row   (feat_row -1 if absent)
    features.bin     little-endian float32, row-major, d values per row

Image order is the order of first appearance in ``proposals.csv`` followed
by images that only appear in ``groundtruth.csv``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import IngestionError, InputError

PROPOSALS_HEADER = ["image_id", "x1", "y1", "x2", "y2", "feat_row"]
GROUNDTRUTH_HEADER = ["image_id", "class_id", "x1", "y1", "x2", "y2", "feat_row"]

DEFAULT_TAU_POS = 0.6
DEFAULT_TAU_NEG = 0.3


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"box coordinates must be finite: {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"box must have positive width and height: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box
    feat_row: int = -1


@dataclass(frozen=True, eq=False)
class RegionProposal:
    image_id: str
    box: Box
    feat_row: int
    feature: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class LabeledRegion:
    proposal: RegionProposal
    class_id: int | None  # None for negatives
    matched_gt: GroundTruth | None = None

    def __post_init__(self):
        if (self.class_id is None) != (self.matched_gt is None):
            raise InputError("a region is positive iff it has a matched ground truth")

    @property
    def is_positive(self) -> bool:
        return self.class_id is not None


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    proposal_boxes: np.ndarray      # (k, 4) float64
    proposal_rows: np.ndarray       # (k,) int64
    gt_boxes: np.ndarray            # (g, 4) float64
    gt_classes: np.ndarray          # (g,) int64
    gt_rows: np.ndarray             # (g,) int64, -1 when absent

    @property
    def num_proposals(self) -> int:
        return self.proposal_boxes.shape[0]

    def ground_truths(self) -> list[GroundTruth]:
        return [GroundTruth(self.image_id, int(c), Box(*map(float, b)), int(r))
                for b, c, r in zip(self.gt_boxes, self.gt_classes, self.gt_rows)]

    def proposals(self, features: np.ndarray) -> list[RegionProposal]:
        return [RegionProposal(self.image_id, Box(*map(float, b)), int(r), features[r])
                for b, r in zip(self.proposal_boxes, self.proposal_rows)]

    def same_as(self, other: "ImageRecord") -> bool:
        return (self.image_id == other.image_id
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("proposal_boxes", "proposal_rows", "gt_boxes",
                                  "gt_classes", "gt_rows")))


def make_image(image_id: str, proposal_boxes=(), proposal_rows=(), gt_boxes=(),
               gt_classes=(), gt_rows=()) -> ImageRecord:
    return ImageRecord(
        image_id=str(image_id),
        proposal_boxes=np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4),
        proposal_rows=np.asarray(proposal_rows, dtype=np.int64).ravel(),
        gt_boxes=np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
        gt_classes=np.asarray(gt_classes, dtype=np.int64).ravel(),
        gt_rows=np.asarray(gt_rows, dtype=np.int64).ravel(),
    )


@dataclass(eq=False)
class DetectionDataset:
    d: int
    class_names: list[str]
    images: list[ImageRecord]
    features: np.ndarray            # (rows, d) float32
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32).reshape(-1, self.d)
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_proposals(self) -> int:
        return sum(im.num_proposals for im in self.images)

    def validate(self) -> None:
        rows = self.features.shape[0]
        seen = set()
        for im in self.images:
            if im.image_id in seen:
                raise InputError(f"duplicate image id {im.image_id!r}")
            seen.add(im.image_id)
            if im.proposal_rows.size and (im.proposal_rows.min() < 0 or im.proposal_rows.max() >= rows):
                raise InputError(f"image {im.image_id}: proposal feature row out of range")
            if im.gt_rows.size and (im.gt_rows.min() < -1 or im.gt_rows.max() >= rows):
                raise InputError(f"image {im.image_id}: ground-truth feature row out of range")
            if im.gt_classes.size and (im.gt_classes.min() < 0 or im.gt_classes.max() >= self.num_classes):
                raise InputError(f"image {im.image_id}: class id outside 0..{self.num_classes - 1}")
            for boxes in (im.proposal_boxes, im.gt_boxes):
                if boxes.size and not (np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])):
                    raise InputError(f"image {im.image_id}: box with non-positive width or height")

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DetectionDataset":
        """Dataset restricted to the given images; features are shared."""
        return DetectionDataset(self.d, list(self.class_names), [self.images[i] for i in indices],
                                self.features, split or self.split)

    def __eq__(self, other):
        if not isinstance(other, DetectionDataset):
            return NotImplemented
        return (self.d == other.d and self.class_names == other.class_names
                and self.split == other.split
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
                and len(self.images) == len(other.images)
                and all(a.same_as(b) for a, b in zip(self.images, other.images)))


# -- overlap -------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(k, 4)`` and ``(g, 4)`` corner-format box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


# -- labeling ------------------------------------------------------------------

def _check_thresholds(tau_pos, tau_neg):
    if not (0 <= tau_neg < tau_pos <= 1):
        raise InputError(f"need 0 <= tau_neg < tau_pos <= 1, got tau_neg={tau_neg}, tau_pos={tau_pos}")


class ImageLabels(NamedTuple):
    rows: np.ndarray        # feature row per retained region
    boxes: np.ndarray       # (r, 4)
    labels: np.ndarray      # class id, -1 for negatives
    matched: np.ndarray     # index of matched ground truth, -1 for negatives
    source: np.ndarray      # proposal index, -1 for injected ground truths


def label_image(image: ImageRecord, tau_pos: float = DEFAULT_TAU_POS,
                tau_neg: float = DEFAULT_TAU_NEG) -> ImageLabels:
    """Array form of :func:`assign_labels` for a single image.

    Ground truths whose feature row is not already used by a proposal are
    appended as positives after the retained proposals.
    """
    _check_thresholds(tau_pos, tau_neg)
    props, gts = image.proposal_boxes, image.gt_boxes
    k = props.shape[0]
    labels = np.full(k, -2, dtype=np.int64)    # -2 = discarded
    matched = np.full(k, -1, dtype=np.int64)
    if gts.shape[0] == 0:
        labels[:] = -1
    elif k:
        ov = iou_matrix(props, gts)
        labels[ov.max(axis=1) < tau_neg] = -1
        best_score = np.full(k, -np.inf)
        for c in np.unique(image.gt_classes):
            cols = np.flatnonzero(image.gt_classes == c)
            sub = ov[:, cols]
            arg = sub.argmax(axis=1)
            best = sub[np.arange(k), arg]
            # a proposal overlapping two classes goes to the better match
            take = (best >= tau_pos) & (best > best_score)
            labels[take] = c
            matched[take] = cols[arg[take]]
            best_score[take] = best[take]
    source = np.flatnonzero(labels != -2)
    rows = image.proposal_rows[source]
    boxes = image.proposal_boxes[source]
    labels, matched = labels[source], matched[source]
    used = set(image.proposal_rows.tolist())
    extra = [g for g in range(gts.shape[0]) if image.gt_rows[g] >= 0 and image.gt_rows[g] not in used]
    if extra:
        extra = np.asarray(extra)
        rows = np.concatenate([rows, image.gt_rows[extra]])
        boxes = np.concatenate([boxes, gts[extra]])
        labels = np.concatenate([labels, image.gt_classes[extra]])
        matched = np.concatenate([matched, extra])
        source = np.concatenate([source, np.full(len(extra), -1)])
    return ImageLabels(rows, boxes, labels, matched, source)


def assign_labels(proposals: Sequence[RegionProposal], ground_truths: Sequence[GroundTruth],
                  tau_pos: float = DEFAULT_TAU_POS, tau_neg: float = DEFAULT_TAU_NEG,
                  features: np.ndarray | None = None) -> list[LabeledRegion]:
    """Label proposals of one image as positive, negative or discarded.

    A proposal is positive for class ``c`` when its best IoU with a class-``c``
    ground truth is at least ``tau_pos``; negative when its IoU with every
    ground truth is below ``tau_neg``; otherwise it is dropped.  Ground truths
    carrying a feature row that no proposal uses are injected as positives
    (``features`` must then be supplied to attach their feature vectors).
    """
    _check_thresholds(tau_pos, tau_neg)
    image_ids = {p.image_id for p in proposals} | {g.image_id for g in ground_truths}
    if len(image_ids) > 1:
        raise InputError(f"assign_labels works on one image at a time, got {sorted(image_ids)}")
    image = make_image(
        next(iter(image_ids), ""),
        [p.box.as_array() for p in proposals], [p.feat_row for p in proposals],
        [g.box.as_array() for g in ground_truths], [g.class_id for g in ground_truths],
        [g.feat_row for g in ground_truths])
    lab = label_image(image, tau_pos, tau_neg)
    out = []
    for row, label, m, src in zip(lab.rows, lab.labels, lab.matched, lab.source):
        if src >= 0:
            prop = proposals[src]
        else:
            gt = ground_truths[m]
            feat = features[row] if features is not None else None
            prop = RegionProposal(image.image_id, gt.box, int(row), feat)
        if label >= 0:
            out.append(LabeledRegion(prop, int(label), ground_truths[m]))
        else:
            out.append(LabeledRegion(prop, None, None))
    return out


# -- file format -----------------------------------------------------------------

def save_dataset(dataset: DetectionDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in dataset.class_names:
        if not name or "," in name or "\n" in name:
            raise InputError(f"class name {name!r} cannot be stored in meta.txt")
    gt_only_seen = False
    for im in dataset.images:
        if im.num_proposals == 0 and im.gt_boxes.shape[0] == 0:
            raise InputError(f"image {im.image_id!r} has no proposals and no ground truth; "
                             "it cannot be represented in the directory format")
        if "," in im.image_id or "\n" in im.image_id or not im.image_id:
            raise InputError(f"image id {im.image_id!r} cannot be stored in CSV")
        if im.num_proposals == 0:
            gt_only_seen = True
        elif gt_only_seen:
            raise InputError("images without proposals must come after all images with proposals")
    with open(directory / "meta.txt", "w", encoding="utf-8") as fh:
        fh.write(f"d={dataset.d}\nclasses={','.join(dataset.class_names)}\nimages={len(dataset.images)}\n")
    with open(directory / "proposals.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROPOSALS_HEADER)
        for im in dataset.images:
            for box, row in zip(im.proposal_boxes, im.proposal_rows):
                w.writerow([im.image_id, *(repr(float(v)) for v in box), int(row)])
    with open(directory / "groundtruth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUNDTRUTH_HEADER)
        for im in dataset.images:
            for box, cls, row in zip(im.gt_boxes, im.gt_classes, im.gt_rows):
                w.writerow([im.image_id, int(cls), *(repr(float(v)) for v in box), int(row)])
    np.ascontiguousarray(dataset.features, dtype="<f4").tofile(directory / "features.bin")


def _read_meta(path: Path) -> tuple[int, list[str], int]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc.strerror})") from exc
    keys = ["d", "classes", "images"]
    values = {}
    for lineno, key in enumerate(keys, start=1):
        if len(lines) < lineno or not lines[lineno - 1].startswith(key + "="):
            raise IngestionError(f"{path}:{lineno}: expected '{key}=...'")
        values[key] = lines[lineno - 1][len(key) + 1:]
    try:
        d = int(values["d"])
        n_images = int(values["images"])
    except ValueError as exc:
        raise IngestionError(f"{path}: d and images must be integers") from exc
    if d < 1 or n_images < 0:
        raise IngestionError(f"{path}: invalid d={d} or images={n_images}")
    classes = values["classes"].split(",") if values["classes"] else []
    return d, classes, n_images


def _read_csv(path: Path, header: list[str]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise IngestionError(f"{path}:1: expected header {','.join(header)}, found {first}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            yield lineno, row


def load_dataset(directory, split: str = "train") -> DetectionDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: dataset directory does not exist")
    for name in ("meta.txt", "proposals.csv", "groundtruth.csv", "features.bin"):
        if not (directory / name).is_file():
            raise IngestionError(f"{directory / name}: missing dataset file")
    d, classes, n_images = _read_meta(directory / "meta.txt")

    feat_path = directory / "features.bin"
    nbytes = feat_path.stat().st_size
    if nbytes % (4 * d):
        raise IngestionError(f"{feat_path}: size {nbytes} is not a multiple of 4*d = {4 * d} "
                             f"(offset {nbytes - nbytes % (4 * d)})")
    n_rows = nbytes // (4 * d)
    features = np.fromfile(feat_path, dtype="<f4").reshape(n_rows, d).astype(np.float32)

    order: list[str] = []
    props: dict[str, tuple[list, list]] = {}
    gts: dict[str, tuple[list, list, list]] = {}

    def parse_box(path, lineno, vals):
        try:
            box = [float(v) for v in vals]
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: malformed coordinate") from exc
        if not all(math.isfinite(v) for v in box) or box[2] <= box[0] or box[3] <= box[1]:
            raise IngestionError(f"{path}:{lineno}: invalid box {box}")
        return box

    def parse_row(path, lineno, val, allow_missing):
        try:
            r = int(val)
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: malformed feat_row {val!r}") from exc
        if not (0 <= r < n_rows or (allow_missing and r == -1)):
            raise IngestionError(f"{path}:{lineno}: feat_row {r} out of range 0..{n_rows - 1}")
        return r

    path = directory / "proposals.csv"
    for lineno, row in _read_csv(path, PROPOSALS_HEADER):
        image_id = row[0]
        if image_id not in props:
            props[image_id] = ([], [])
            order.append(image_id)
        props[image_id][0].append(parse_box(path, lineno, row[1:5]))
        props[image_id][1].append(parse_row(path, lineno, row[5], False))

    path = directory / "groundtruth.csv"
    for lineno, row in _read_csv(path, GROUNDTRUTH_HEADER):
        image_id = row[0]
        try:
            cls = int(row[1])
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: malformed class_id {row[1]!r}") from exc
        if not 0 <= cls < len(classes):
            raise IngestionError(f"{path}:{lineno}: class_id {cls} outside 0..{len(classes) - 1}")
        if image_id not in gts:
            gts[image_id] = ([], [], [])
            if image_id not in props:
                order.append(image_id)
        gts[image_id][0].append(parse_box(path, lineno, row[2:6]))
        gts[image_id][1].append(cls)
        gts[image_id][2].append(parse_row(path, lineno, row[6], True))

    if len(order) != n_images:
        raise IngestionError(f"{directory / 'meta.txt'}:3: images={n_images} but the CSV files "
                             f"reference {len(order)} distinct images")
    images = []
    for image_id in order:
        pb, pr = props.get(image_id, ([], []))
        gb, gc, gr = gts.get(image_id, ([], [], []))
        images.append(make_image(image_id, pb, pr, gb, gc, gr))
    return DetectionDataset(d=d, class_names=classes, images=images, features=features, split=split)


def split_images(n_images: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic by-image split; returns ``(kept, held_out)`` sorted indices."""
    if not 0 < fraction < 1:
        raise InputError(f"split fraction must be in (0, 1), got {fraction}")
    if n_images < 2:
        raise InputError("need at least two images to split")
    n_out = min(n_images - 1, max(1, int(round(fraction * n_images))))
    perm = np.random.default_rng(seed).permutation(n_images)
    return np.sort(perm[n_out:]), np.sort(perm[:n_out])
