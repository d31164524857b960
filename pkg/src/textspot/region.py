"""Aspect-ratio-aware RoI feature extraction from the pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .geometry import Rect
from .pyramid import STRIDES, FeaturePyramid

ROI_HEIGHT = 4
ROI_W_MAX = 30
SAMPLES_PER_BIN = 2  # 2x2 sample points per output cell, averaged


class EmptyRoiError(ValueError):
    pass


@dataclass
class RegionFeature:
    """Bilinear-pooled feature grid of shape (D, H, W') for one proposal."""

    grid: torch.Tensor
    rect: Rect
    level: str

    @property
    def width(self) -> int:
        return self.grid.shape[-1]

    @property
    def height(self) -> int:
        return self.grid.shape[-2]


def roi_output_width(h: float, w: float, w_max: int = ROI_W_MAX) -> tuple[int, int]:
    """Pooled grid size (H, W') for a box of pixel size h x w.

    Width scales with aspect ratio, clamped to [H, w_max]; round half up.
    """
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid roi size {h}x{w}")
    wp = 3.0 * ROI_HEIGHT * w / h
    wp = max(float(ROI_HEIGHT), min(float(w_max), wp))
    return ROI_HEIGHT, int(math.floor(wp + 0.5))


def assign_pyramid_level(rect: Rect) -> str:
    """Scale-based level assignment over P2..P5."""
    k = math.floor(4 + math.log2(math.sqrt(rect.width * rect.height) / 224.0))
    k = min(5, max(2, k))
    return f"P{k}"


def _bilinear_sample(feat: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample (C,H,W) feature map at continuous points; pixel centers at idx+0.5.

    ys, xs: same shape S; returns (C, *S). Border values are clamped.
    """
    c, h, w = feat.shape
    py = ys - 0.5
    px = xs - 0.5
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = (py - y0).to(feat.dtype)
    wx = (px - x0).to(feat.dtype)
    y0 = y0.long()
    x0 = x0.long()
    y0c = y0.clamp(0, h - 1)
    y1c = (y0 + 1).clamp(0, h - 1)
    x0c = x0.clamp(0, w - 1)
    x1c = (x0 + 1).clamp(0, w - 1)
    flat = feat.reshape(c, -1)

    def gather(yi, xi):
        return flat[:, (yi * w + xi).reshape(-1)].reshape(c, *yi.shape)

    v00 = gather(y0c, x0c)
    v01 = gather(y0c, x1c)
    v10 = gather(y1c, x0c)
    v11 = gather(y1c, x1c)
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def roi_align(
    feat: torch.Tensor, rect: Rect, stride: int, out_h: int, out_w: int
) -> torch.Tensor:
    """RoI-Align with a fixed 2x2 sampling pattern per output cell.

    feat: (C, H, W) feature grid at the given stride. Returns (C, out_h, out_w),
    differentiable w.r.t. feat.
    """
    x1, y1 = rect.x1 / stride, rect.y1 / stride
    x2, y2 = rect.x2 / stride, rect.y2 / stride
    if x2 - x1 < 1e-6 or y2 - y1 < 1e-6:
        raise EmptyRoiError(f"EMPTY_ROI: rect {rect} collapses at stride {stride}")
    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    s = SAMPLES_PER_BIN
    dev = feat.device
    offs = (torch.arange(s, dtype=torch.float64, device=dev) + 0.5) / s
    # sample grid: for cell (i,j), points y1 + (i + off)*bin_h, x1 + (j + off)*bin_w
    iy = torch.arange(out_h, dtype=torch.float64, device=dev)
    ix = torch.arange(out_w, dtype=torch.float64, device=dev)
    sy = y1 + (iy[:, None] + offs[None, :]) * bin_h  # (out_h, s)
    sx = x1 + (ix[:, None] + offs[None, :]) * bin_w  # (out_w, s)
    ys_grid = sy[:, None, :, None].expand(out_h, out_w, s, s)
    xs_grid = sx[None, :, None, :].expand(out_h, out_w, s, s)
    vals = _bilinear_sample(feat, ys_grid, xs_grid)  # (C, out_h, out_w, s, s)
    return vals.mean(dim=(-2, -1))


def extract_region(
    pyramid: FeaturePyramid,
    rect: Rect,
    mode: str = "varying",
    fixed_hw: tuple[int, int] = (7, 7),
    w_max: int = ROI_W_MAX,
) -> RegionFeature:
    """Pool the assigned pyramid level into an H x W' grid for this rect."""
    level = assign_pyramid_level(rect)
    if mode == "varying":
        out_h, out_w = roi_output_width(rect.height, rect.width, w_max=w_max)
    else:
        out_h, out_w = fixed_hw
    feat = pyramid.levels[level]
    grid = roi_align(feat, rect, STRIDES[level], out_h, out_w)
    return RegionFeature(grid=grid, rect=rect, level=level)
