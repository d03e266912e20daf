"""Synthetic detection datasets with controllable imbalance and hard negatives.

Geometry of the feature space (``sigma`` = ``cluster_sigma``):

* class prototypes ``mu_c = margin / sqrt(2) * u_c`` on orthonormal axes, so
  any two prototypes are exactly ``margin`` apart;
* positives of class ``c`` are ``mu_c + sigma * z``;
* plain background is ``c_bg + background_scale * sigma * z`` where ``c_bg``
  lies ``background_offset * margin`` along a further orthogonal axis;
* hard negatives are ``mu_c + r v`` with ``v`` a random unit vector and
  ``r`` uniform in ``[margin, 2 margin]``.

Prototypes depend on the seed only, so train and test splits generated with
the same seed share them while drawing independent images.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .bbox import targets_array
from .errors import ConfigError
from .regions import DetectionDataset, iou_matrix, make_image

MIN_CELL_PIXELS = 8.0


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 5
    dim: int = 64
    images: int = 20
    positives_per_class: int = 1      # ground-truth objects per class per image
    jitter_per_gt: int = 2            # extra proposals with IoU >= jitter_min_iou
    ambiguous_per_gt: int = 0         # proposals with IoU in [0.35, 0.55]
    imbalance: float = 100.0          # background proposals per positive proposal
    negatives_per_image: int | None = None   # overrides imbalance when set
    margin: float = 10.0
    cluster_sigma: float = 1.0
    background_scale: float = 3.0
    background_offset: float = 3.0
    hard_fraction: float = 0.0
    image_size: float = 1000.0
    jitter_min_iou: float = 0.7
    delta_signal: float = 0.0         # planted box-delta component in positive features
    class_names: tuple[str, ...] | None = None

    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{c}" for c in range(self.num_classes)]

    def positives_per_image(self) -> int:
        return self.num_classes * self.positives_per_class * (1 + self.jitter_per_gt)

    def background_per_image(self) -> int:
        if self.negatives_per_image is not None:
            return self.negatives_per_image
        return int(round(self.imbalance * self.positives_per_image()))

    def validate(self) -> None:
        if self.num_classes < 1 or self.dim < 1 or self.images < 0:
            raise ConfigError("num_classes and dim must be >= 1, images >= 0")
        extra_axes = 4 if self.delta_signal else 0
        if self.num_classes + 1 + extra_axes > self.dim:
            raise ConfigError(
                f"dim={self.dim} too small for {self.num_classes} orthogonal prototypes, "
                f"a background axis and {extra_axes} delta axes")
        if min(self.positives_per_class, self.jitter_per_gt, self.ambiguous_per_gt) < 0:
            raise ConfigError("per-image counts must be >= 0")
        if self.negatives_per_image is not None and self.negatives_per_image < 0:
            raise ConfigError("negatives_per_image must be >= 0")
        if self.imbalance < 0 or not 0 <= self.hard_fraction <= 1:
            raise ConfigError("imbalance must be >= 0 and hard_fraction in [0, 1]")
        if self.margin <= 0 or self.cluster_sigma <= 0 or self.background_scale <= 0:
            raise ConfigError("margin, cluster_sigma and background_scale must be positive")
        if not 0 < self.jitter_min_iou < 1:
            raise ConfigError("jitter_min_iou must be in (0, 1)")
        if len(self.names()) != self.num_classes:
            raise ConfigError("class_names must have num_classes entries")
        cells = self.num_classes * self.positives_per_class + self.background_per_image()
        grid = math.ceil(math.sqrt(cells)) if cells else 1
        if self.image_size / grid < MIN_CELL_PIXELS:
            raise ConfigError(
                f"infeasible layout: {cells} boxes per image need a {grid}x{grid} grid, "
                f"cells would be {self.image_size / grid:.2f} px < {MIN_CELL_PIXELS} px")


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode("utf-8"))


def feature_axes(config: SyntheticConfig, seed: int) -> np.ndarray:
    """Orthonormal axes (columns): prototypes, background, then delta axes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    k = config.num_classes + 1 + (4 if config.delta_signal else 0)
    q, _ = np.linalg.qr(rng.standard_normal((config.dim, k)))
    return q


def prototypes(config: SyntheticConfig, seed: int) -> np.ndarray:
    axes = feature_axes(config, seed)
    return (config.margin / math.sqrt(2.0)) * axes[:, :config.num_classes].T


def _jitter_box(rng, gt: np.ndarray, min_iou: float) -> np.ndarray:
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    cx, cy = (gt[0] + gt[2]) / 2, (gt[1] + gt[3]) / 2
    for _ in range(100):
        dx, dy = rng.uniform(-0.1, 0.1, 2)
        sw, sh = np.exp(rng.uniform(-0.1, 0.1, 2))
        nw, nh = w * sw, h * sh
        ncx, ncy = cx + dx * w, cy + dy * h
        box = np.array([ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2])
        if iou_matrix(box, gt)[0, 0] >= min_iou:
            return box
    return gt.copy()


def _ambiguous_box(rng, gt: np.ndarray) -> np.ndarray:
    target = rng.uniform(0.35, 0.55)
    shift = (1 - target) / (1 + target) * (gt[2] - gt[0])
    shift *= rng.choice([-1.0, 1.0])
    return gt + np.array([shift, 0.0, shift, 0.0])


def generate_synthetic(config: SyntheticConfig, seed: int, split: str = "train") -> DetectionDataset:
    """Build a synthetic :class:`DetectionDataset`; deterministic in ``(config, seed, split)``."""
    config.validate()
    axes = feature_axes(config, seed)
    C, d = config.num_classes, config.dim
    mu = prototypes(config, seed)
    bg_center = config.background_offset * config.margin * axes[:, C]
    delta_axes = axes[:, C + 1:C + 5] if config.delta_signal else None
    sigma = config.cluster_sigma
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, _split_code(split)]))

    n_obj = C * config.positives_per_class
    n_bg = config.background_per_image()
    grid = max(1, math.ceil(math.sqrt(n_obj + n_bg)))
    cell = config.image_size / grid

    features: list[np.ndarray] = []
    n_rows = 0
    images = []
    for i in range(config.images):
        image_id = f"{split}{i:06d}"
        cells = rng.permutation(grid * grid)[:n_obj + n_bg]
        origins = np.stack([(cells % grid) * cell, (cells // grid) * cell], axis=1)
        obj_classes = np.repeat(np.arange(C), config.positives_per_class)

        prop_boxes, prop_rows = [], []
        gt_boxes, gt_rows = [], []
        feats = []

        for j, c in enumerate(obj_classes):
            ox, oy = origins[j]
            w, h = rng.uniform(0.3, 0.45, 2) * cell
            cx = ox + cell / 2 + rng.uniform(-0.02, 0.02) * cell
            cy = oy + cell / 2 + rng.uniform(-0.02, 0.02) * cell
            gt = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            boxes = [gt] + [_jitter_box(rng, gt, config.jitter_min_iou)
                            for _ in range(config.jitter_per_gt)]
            boxes = np.array(boxes)
            pos = mu[c] + sigma * rng.standard_normal((len(boxes), d))
            if delta_axes is not None:
                pos += config.delta_signal * targets_array(boxes, gt) @ delta_axes.T
            amb = [_ambiguous_box(rng, gt) for _ in range(config.ambiguous_per_gt)]
            if amb:
                mix = rng.uniform(0.3, 0.7, (len(amb), 1))
                amb_feat = (mix * mu[c] + (1 - mix) * bg_center
                            + sigma * rng.standard_normal((len(amb), d)))
                boxes = np.concatenate([boxes, np.array(amb)])
                pos = np.concatenate([pos, amb_feat])
            rows = n_rows + len(feats) + np.arange(len(boxes))
            feats.extend(pos)
            gt_boxes.append(gt)
            gt_rows.append(rows[0])
            prop_boxes.extend(boxes)
            prop_rows.extend(rows)

        if n_bg:
            n_hard = int(rng.binomial(n_bg, config.hard_fraction)) if config.hard_fraction else 0
            bg = bg_center + config.background_scale * sigma * rng.standard_normal((n_bg, d))
            if n_hard:
                which = rng.permutation(n_bg)[:n_hard]
                cls = rng.integers(0, C, n_hard)
                v = rng.standard_normal((n_hard, d))
                v /= np.linalg.norm(v, axis=1, keepdims=True)
                r = rng.uniform(1.0, 2.0, (n_hard, 1)) * config.margin
                bg[which] = mu[cls] + r * v
            sizes = rng.uniform(0.3, 0.9, (n_bg, 2)) * cell
            offs = rng.uniform(0, 1, (n_bg, 2)) * (cell - sizes)
            xy1 = origins[n_obj:] + offs
            bg_boxes = np.concatenate([xy1, xy1 + sizes], axis=1)
            rows = n_rows + len(feats) + np.arange(n_bg)
            feats.extend(bg)
            prop_boxes.extend(bg_boxes)
            prop_rows.extend(rows)

        n_rows += len(feats)
        if feats:
            features.append(np.asarray(feats, dtype=np.float32))
        images.append(make_image(image_id, prop_boxes, prop_rows, gt_boxes, obj_classes, gt_rows))

    feat = np.concatenate(features) if features else np.zeros((0, d), dtype=np.float32)
    return DetectionDataset(d=d, class_names=config.names(), images=images, features=feat, split=split)
