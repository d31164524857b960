"""Multi-level feature pyramid: small strided-conv backbone plus top-down pathway.

Five levels P2..P6 with strides 4/8/16/32/64 and a uniform channel depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVELS = ("P2", "P3", "P4", "P5", "P6")
STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32, "P6": 64}
PAD_MULTIPLE = 64
MIN_SIDE = 64


class ImageTooSmallError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Feature grids per level, each (C, H_l, W_l), plus padded image size."""

    levels: dict[str, torch.Tensor]
    image_h: int  # padded height
    image_w: int  # padded width

    def stride(self, level: str) -> int:
        return STRIDES[level]

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: (v.shape[-2], v.shape[-1]) for k, v in self.levels.items()}


def pad_image(image: torch.Tensor) -> torch.Tensor:
    """Zero-pad (C,H,W) bottom/right to a multiple of 64; reject tiny images."""
    h, w = image.shape[-2], image.shape[-1]
    if min(h, w) < MIN_SIDE:
        raise ImageTooSmallError(f"IMAGE_TOO_SMALL: {h}x{w}, need shorter side >= {MIN_SIDE}")
    ph = (PAD_MULTIPLE - h % PAD_MULTIPLE) % PAD_MULTIPLE
    pw = (PAD_MULTIPLE - w % PAD_MULTIPLE) % PAD_MULTIPLE
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph))
    return image


class PyramidBackbone(nn.Module):
    """Bottom-up strided convs, lateral 1x1 projections, top-down add, 3x3 smoothing."""

    def __init__(self, out_dim: int = 256):
        super().__init__()
        self.out_dim = out_dim
        widths = [max(8, out_dim // 8), max(8, out_dim // 4), max(8, out_dim // 2), out_dim, out_dim]
        stages = []
        in_ch = 3
        for w in widths:
            # group norm keeps activations content-dependent at depth without
            # batch-statistics nondeterminism
            groups = max(1, w // 8)
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, w, 3, stride=2, padding=1),
                    nn.GroupNorm(groups, w),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, stride=1, padding=1),
                    nn.GroupNorm(groups, w),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = w
        self.stages = nn.ModuleList(stages)
        # laterals / smoothing for C2..C5 only; conv1 stays out of the pyramid
        self.laterals = nn.ModuleList(nn.Conv2d(w, out_dim, 1) for w in widths[1:])
        self.smooth = nn.ModuleList(nn.Conv2d(out_dim, out_dim, 3, padding=1) for _ in widths[1:])

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """image: (C,H,W) or (1,C,H,W); returns the five-level pyramid."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        image = pad_image(image)
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        c2, c3, c4, c5 = feats[1:]
        p5 = self.laterals[3](c5)
        p4 = self.laterals[2](c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest")
        p3 = self.laterals[1](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p2 = self.laterals[0](c2) + F.interpolate(p3, size=c2.shape[-2:], mode="nearest")
        p2 = self.smooth[0](p2)
        p3 = self.smooth[1](p3)
        p4 = self.smooth[2](p4)
        p5 = self.smooth[3](p5)
        p6 = F.max_pool2d(p5, kernel_size=1, stride=2)
        levels = {
            "P2": p2[0],
            "P3": p3[0],
            "P4": p4[0],
            "P5": p5[0],
            "P6": p6[0],
        }
        return FeaturePyramid(levels=levels, image_h=image.shape[-2], image_w=image.shape[-1])
