"""Box, quadrangle and polygon arithmetic shared by every other module.

All coordinates are image pixels, x rightwards, y downwards. "Clockwise"
vertex order means clockwise as drawn on screen, which is positive shoelace
area in this coordinate system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

# exp(dw), exp(dh) are clamped so a decoded box can grow by at most this factor
MAX_DELTA_SCALE = 1000.0 / 16.0
_LOG_MAX_SCALE = math.log(MAX_DELTA_SCALE)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle with x1 < x2, y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite rect coordinate: {v}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise GeometryError(f"degenerate rect: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def corners(self) -> np.ndarray:
        """Corner points TL, TR, BR, BL (clockwise on screen)."""
        return np.array(
            [
                [self.x1, self.y1],
                [self.x2, self.y1],
                [self.x2, self.y2],
                [self.x1, self.y2],
            ],
            dtype=np.float64,
        )

    def clipped(self, img_w: float, img_h: float) -> "Rect":
        return Rect(
            min(max(self.x1, 0.0), img_w - 1e-3),
            min(max(self.y1, 0.0), img_h - 1e-3),
            max(min(self.x2, img_w), 1e-3),
            max(min(self.y2, img_h), 1e-3),
        )


def _canonicalize(vertices: np.ndarray) -> np.ndarray:
    """Order vertices clockwise starting from the one with smallest x+y."""
    v = np.asarray(vertices, dtype=np.float64)
    # shoelace; positive means clockwise on screen (y down)
    x, y = v[:, 0], v[:, 1]
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)
    if area2 < 0:
        v = v[::-1]
    start = int(np.argmin(v[:, 0] + v[:, 1]))
    return np.roll(v, -start, axis=0)


def _check_simple(vertices: np.ndarray, what: str) -> None:
    poly = ShapelyPolygon(vertices)
    if not poly.is_valid or poly.area <= 0:
        raise GeometryError(f"SELF_INTERSECTING or degenerate {what}: {vertices.tolist()}")


class Quadrangle:
    """Simple quadrangle, vertices kept in canonical clockwise order."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != (4, 2):
            raise GeometryError(f"quadrangle needs 4 vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite quadrangle vertex")
        v = _canonicalize(v)
        _check_simple(v, "quadrangle")
        self.vertices = v

    @classmethod
    def from_rect(cls, rect: Rect) -> "Quadrangle":
        return cls(rect.corners())

    def enclosing_rect(self) -> Rect:
        v = self.vertices
        return Rect(v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def __repr__(self):
        return f"Quadrangle({self.vertices.tolist()})"


class Polygon6:
    """Simple 6-vertex polygon formed by joining two quadrangles."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != (6, 2):
            raise GeometryError(f"polygon6 needs 6 vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite polygon vertex")
        v = _canonicalize(v)
        _check_simple(v, "polygon")
        self.vertices = v

    def enclosing_rect(self) -> Rect:
        v = self.vertices
        return Rect(v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def __repr__(self):
        return f"Polygon6({self.vertices.tolist()})"


@dataclass(frozen=True)
class BoxDelta:
    """Center shifts in box-size units plus log-space size shifts."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        for v in (self.dx, self.dy, self.dw, self.dh):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite delta: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def iou_rect(a: Rect, b: Rect) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_rect_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N,4) / (M,4) arrays of x1,y1,x2,y2 boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def iou_polygon(a, b) -> float:
    """Area-ratio IoU between two simple polygons (exact clipping)."""
    va = a.vertices if hasattr(a, "vertices") else np.asarray(a, dtype=np.float64)
    vb = b.vertices if hasattr(b, "vertices") else np.asarray(b, dtype=np.float64)
    pa, pb = ShapelyPolygon(va), ShapelyPolygon(vb)
    if not pa.is_valid or not pb.is_valid:
        raise GeometryError("SELF_INTERSECTING polygon input to iou_polygon")
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms_array(
    boxes: np.ndarray, scores: np.ndarray, iou_thr: float, max_keep: int | None = None
) -> list[int]:
    """Greedy NMS on (N,4) x1y1x2y2 boxes; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise GeometryError("boxes and scores length mismatch")
    if not np.all(np.isfinite(scores)):
        raise GeometryError("non-finite score in nms")
    n = boxes.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    kept: list[int] = []
    for i in order:
        if kept:
            kb = boxes[kept]
            ix = np.minimum(kb[:, 2], boxes[i, 2]) - np.maximum(kb[:, 0], boxes[i, 0])
            iy = np.minimum(kb[:, 3], boxes[i, 3]) - np.maximum(kb[:, 1], boxes[i, 1])
            inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
            iou = inter / (areas[kept] + areas[i] - inter)
            if np.any(iou > iou_thr):
                continue
        kept.append(int(i))
        if max_keep is not None and len(kept) >= max_keep:
            break
    return kept


def nms(boxes: list[Rect], scores, iou_thr: float) -> list[int]:
    """Greedy NMS by descending score; ties broken by lower index.

    Returns kept indices sorted by descending score.
    """
    if len(boxes) == 0:
        return []
    arr = np.stack([b.as_array() for b in boxes])
    return nms_array(arr, np.asarray(scores, dtype=np.float64), iou_thr)


def encode_delta(anchor: Rect, gt: Rect) -> BoxDelta:
    acx, acy = anchor.center
    gcx, gcy = gt.center
    return BoxDelta(
        (gcx - acx) / anchor.width,
        (gcy - acy) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    )


def apply_delta(box: Rect, d: BoxDelta) -> Rect:
    cx, cy = box.center
    cx += d.dx * box.width
    cy += d.dy * box.height
    w = box.width * math.exp(min(d.dw, _LOG_MAX_SCALE))
    h = box.height * math.exp(min(d.dh, _LOG_MAX_SCALE))
    return Rect(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def apply_delta_array(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized apply_delta over (N,4) boxes and (N,4) deltas."""
    boxes = np.asarray(boxes, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w + deltas[:, 0] * w
    cy = boxes[:, 1] + 0.5 * h + deltas[:, 1] * h
    nw = w * np.exp(np.minimum(deltas[:, 2], _LOG_MAX_SCALE))
    nh = h * np.exp(np.minimum(deltas[:, 3], _LOG_MAX_SCALE))
    return np.stack([cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh], axis=1)


def rotate_points(points: np.ndarray, angle_deg: float, center) -> np.ndarray:
    """Rotate points about center; positive angle is clockwise on screen."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    p = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return p @ rot.T + np.asarray(center, dtype=np.float64)
