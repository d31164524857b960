"""Attention-driven box refinement: character centroids from attention grids,
orientation fitting, rotated quadrangles and 6-point polygons."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polygon6, Quadrangle, Rect, rotate_points

ALPHA_THRESHOLD = 0.2


class NoCharactersError(ValueError):
    pass


@dataclass
class CharacterAnchor:
    x: float
    y: float
    confidence: float  # max attention weight of the step
    step: int


def _grid_to_image(i: float, j: float, shape: tuple[int, int], rect: Rect) -> tuple[float, float]:
    h, w = shape
    x = rect.x1 + (j + 0.5) / w * rect.width
    y = rect.y1 + (i + 0.5) / h * rect.height
    return x, y


def character_centroids(trace, rect: Rect) -> list[CharacterAnchor]:
    """Weighted mean of surviving attention cells per decode step, mapped to
    image coordinates. Steps whose every weight is below threshold are skipped."""
    anchors = []
    for step_idx, step in enumerate(trace.steps):
        alpha = np.asarray(step.alpha.detach().cpu().numpy() if hasattr(step.alpha, "detach") else step.alpha,
                           dtype=np.float64)
        keep = alpha >= ALPHA_THRESHOLD
        if not keep.any():
            continue
        w = np.where(keep, alpha, 0.0)
        w = w / w.sum()
        h_g, w_g = alpha.shape
        ii, jj = np.meshgrid(np.arange(h_g), np.arange(w_g), indexing="ij")
        ci = float((w * ii).sum())
        cj = float((w * jj).sum())
        x, y = _grid_to_image(ci, cj, alpha.shape, rect)
        anchors.append(CharacterAnchor(x=x, y=y, confidence=float(alpha.max()), step=step_idx))
    if not anchors:
        raise NoCharactersError("NO_CHARACTERS: every decode step fell below the attention threshold")
    return anchors


def fit_orientation(points: list[CharacterAnchor]) -> float:
    """Confidence-weighted least-squares slope angle in degrees, in (-90, 90).

    Positive angle means the baseline descends to the right on screen.
    Degenerate inputs (fewer than 2 points, or no x spread) give 0.
    """
    if len(points) < 2:
        return 0.0
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    ws = np.array([p.confidence for p in points], dtype=np.float64)
    ws = ws / ws.sum()
    xbar = float((ws * xs).sum())
    ybar = float((ws * ys).sum())
    sxx = float((ws * (xs - xbar) ** 2).sum())
    if sxx < 1e-12:
        return 0.0
    sxy = float((ws * (xs - xbar) * (ys - ybar)).sum())
    return math.degrees(math.atan(sxy / sxx))


def rotate_box(rect: Rect, angle_deg: float) -> Quadrangle:
    """Rotate the rectangle about its center by the fitted angle."""
    return Quadrangle(rotate_points(rect.corners(), angle_deg, rect.center))


def quad_angle(quad: Quadrangle) -> float:
    """Angle of the top edge of a canonical quadrangle, degrees in (-90, 90]."""
    v = quad.vertices
    dx, dy = v[1, 0] - v[0, 0], v[1, 1] - v[0, 1]
    if abs(dx) < 1e-12:
        return 90.0
    return math.degrees(math.atan(dy / dx))


def fit_polygon(trace, rect: Rect) -> Polygon6 | Quadrangle:
    """Fit two rotated sub-boxes to the front and rear halves of the character
    layout and join them into a 6-vertex polygon.

    Falls back to the single rotated quadrangle when fewer than 4 character
    anchors survive thresholding.
    """
    anchors = character_centroids(trace, rect)
    if len(anchors) < 4:
        return rotate_box(rect, fit_orientation(anchors))
    ordered = sorted(anchors, key=lambda a: (a.x, a.step))
    mid = len(ordered) // 2
    front, rear = ordered[:mid], ordered[mid:]

    def half_corners(half: list[CharacterAnchor]) -> np.ndarray:
        """Rotated sub-box corners in fixed TL, TR, BR, BL order."""
        angle = fit_orientation(half)
        xs = [a.x for a in half]
        sub = Rect(min(xs), rect.y1, max(max(xs), min(xs) + 1e-3), rect.y2)
        return rotate_points(sub.corners(), angle, sub.center)

    fv = half_corners(front)
    rv = half_corners(rear)
    junction_top = 0.5 * (fv[1] + rv[0])
    junction_bot = 0.5 * (fv[2] + rv[3])
    vertices = np.stack([fv[0], junction_top, rv[1], rv[2], junction_bot, fv[3]])
    try:
        return Polygon6(vertices)
    except Exception:
        # degenerate join (extreme half angles); fall back to one quadrangle
        return rotate_box(rect, fit_orientation(anchors))


def synthetic_trace(
    angle_deg: float,
    n_steps: int = 8,
    grid_w: int = 30,
    grid_h: int = 4,
    arc: bool = False,
    width: float = 300.0,
):
    """Build an attention trace whose centroids lie exactly on a line (or V-arc)
    at the requested slope angle, together with a rect sized so every attention
    weight survives the 0.2 threshold.

    Returns (trace, rect). The deterministic input surface of the refine-demo.
    """

    @dataclass
    class _Step:
        alpha: np.ndarray

    @dataclass
    class _Trace:
        steps: list

    slope = math.tan(math.radians(angle_deg))
    xspan = width * (1.0 - 1.0 / grid_w)  # distance between outermost column centers
    # vertical extent so the needed row offsets stay within one cell band
    yspan = abs(slope) * xspan
    cell_h = max(10.0, yspan / 0.58)
    rect = Rect(0.0, 0.0, width, cell_h * grid_h)
    cx, cy = rect.center
    cols = np.linspace(0, grid_w - 1, n_steps)
    cols = np.round(cols).astype(int)
    steps = []
    for j in cols:
        x = rect.x1 + (j + 0.5) / grid_w * rect.width
        dx = x - cx
        dy = slope * (abs(dx) if arc else dx)
        y = cy + dy
        gi = (y - rect.y1) / cell_h - 0.5  # continuous row coordinate
        i0 = int(math.floor(gi))
        w1 = gi - i0
        alpha = np.zeros((grid_h, grid_w))
        if w1 < 1e-9:
            alpha[i0, j] = 1.0
        else:
            alpha[i0, j] = 1.0 - w1
            alpha[i0 + 1, j] = w1
        steps.append(_Step(alpha=alpha))
    return _Trace(steps=steps), rect


def half_angles(trace, rect: Rect) -> tuple[float, float]:
    """Front/rear half orientation angles using the same split as fit_polygon."""
    anchors = character_centroids(trace, rect)
    ordered = sorted(anchors, key=lambda a: (a.x, a.step))
    mid = len(ordered) // 2
    return fit_orientation(ordered[:mid]), fit_orientation(ordered[mid:])
