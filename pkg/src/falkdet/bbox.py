"""Bounding-box refinement with linear regularized least squares.

Targets use the center/size parametrization

    tx = (Gx - Px) / Pw,  ty = (Gy - Py) / Ph,  tw = log(Gw / Pw),  th = log(Gh / Ph)

and one :class:`RlsModel` per class maps a feature vector to the four deltas.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import IngestionError, InputError, NumericalError
from .regions import Box

RLS_MAGIC = b"RLSB"
DEFAULT_RIDGE = 100.0


@dataclass(frozen=True)
class BoxDeltas:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th])


def _center_size(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def targets_array(proposals, gts) -> np.ndarray:
    """Vectorized :func:`compute_targets` over ``(k, 4)`` box arrays."""
    px, py, pw, ph = _center_size(np.asarray(proposals, dtype=np.float64))
    gx, gy, gw, gh = _center_size(np.asarray(gts, dtype=np.float64))
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def apply_deltas_array(boxes, deltas, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Vectorized :func:`apply_deltas`; ``bounds`` is ``(width, height)`` of the image."""
    boxes = np.asarray(boxes, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    px, py, pw, ph = _center_size(boxes)
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * np.exp(deltas[..., 2])
    h = ph * np.exp(deltas[..., 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if bounds is not None:
        out[..., 0::2] = np.clip(out[..., 0::2], 0.0, bounds[0])
        out[..., 1::2] = np.clip(out[..., 1::2], 0.0, bounds[1])
    return out


def compute_targets(proposal: Box, gt: Box) -> BoxDeltas:
    return BoxDeltas(*map(float, targets_array(proposal.as_array(), gt.as_array())))


def apply_deltas(box: Box, deltas: BoxDeltas, bounds: tuple[float, float] | None = None) -> Box:
    out = apply_deltas_array(box.as_array(), deltas.as_array(), bounds)
    return Box(*map(float, out))


@dataclass(eq=False)
class RlsModel:
    weights: np.ndarray     # (d, 4)
    bias: np.ndarray        # (4,)
    ridge: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, 4)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NumericalError("regression weights are not finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def predict(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.dim:
            raise InputError(f"dimension mismatch: features have d={features.shape[1]}, "
                             f"regressor expects d={self.dim}")
        return features @ self.weights + self.bias

    def __eq__(self, other):
        if not isinstance(other, RlsModel):
            return NotImplemented
        return (self.ridge == other.ridge and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.bias, other.bias))


def rls_train(features, targets, ridge: float = DEFAULT_RIDGE) -> RlsModel:
    """Solve ``(X^T X + ridge I) W = X^T T`` with ``X`` augmented by a ones column."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    T = np.asarray([t.as_array() if isinstance(t, BoxDeltas) else t for t in targets],
                   dtype=np.float64).reshape(-1, 4)
    if X.shape[0] < 1 or X.shape[0] != T.shape[0]:
        raise InputError(f"need matching, nonempty features and targets: {X.shape[0]} vs {T.shape[0]}")
    if not ridge > 0:
        raise InputError(f"ridge must be positive, got {ridge!r}")
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    G = Xa.T @ Xa
    G[np.diag_indices_from(G)] += ridge
    try:
        W = scipy.linalg.solve(G, Xa.T @ T, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise NumericalError("ridge normal equations are singular") from exc
    return RlsModel(weights=W[:-1], bias=W[-1], ridge=float(ridge))


_HEAD = struct.Struct("<4sId")


def rls_to_bytes(model: RlsModel) -> bytes:
    return (_HEAD.pack(RLS_MAGIC, model.dim, model.ridge)
            + np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
            + np.ascontiguousarray(model.bias, dtype="<f8").tobytes())


def rls_from_bytes(data: bytes, source: str = "<bytes>") -> RlsModel:
    if len(data) < _HEAD.size:
        raise IngestionError(f"{source}: truncated regressor header")
    magic, d, ridge = _HEAD.unpack_from(data)
    if magic != RLS_MAGIC:
        raise IngestionError(f"{source}: bad magic {magic!r} at offset 0, expected {RLS_MAGIC!r}")
    expected = _HEAD.size + 8 * (4 * d + 4)
    if len(data) != expected:
        raise IngestionError(f"{source}: expected {expected} bytes for d={d}, found {len(data)}")
    W = np.frombuffer(data, dtype="<f8", count=4 * d, offset=_HEAD.size).reshape(d, 4)
    b = np.frombuffer(data, dtype="<f8", count=4, offset=_HEAD.size + 32 * d)
    return RlsModel(weights=W.copy(), bias=b.copy(), ridge=ridge)


def save_rls(model: RlsModel, path) -> None:
    Path(path).write_bytes(rls_to_bytes(model))


def load_rls(path) -> RlsModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read regressor file ({exc.strerror})") from exc
    return rls_from_bytes(data, str(path))
