"""Text proposal network: anchors over the pyramid, target assignment, proposal selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .geometry import Rect, apply_delta_array, iou_rect_matrix, nms_array
from .pyramid import LEVELS, STRIDES, FeaturePyramid

ANCHOR_SIZES = {"P2": 16, "P3": 32, "P4": 64, "P5": 128, "P6": 256}
ASPECT_RATIOS = (0.125, 0.25, 0.5, 1.0)  # height / width
NUM_RATIOS = len(ASPECT_RATIOS)

# TPN target assignment (anchor vs ground-truth IoU)
POS_IOU = 0.7
NEG_IOU = 0.3
SAMPLE_SIZE = 256
MAX_POSITIVES = 128

PRE_NMS_TOP_N = 1000
PROPOSAL_NMS_THR = 0.7
MIN_PROPOSAL_SIDE = 2.0


@dataclass
class Proposal:
    rect: Rect
    textness: float
    level: str


@dataclass
class AnchorSet:
    """All anchors for one pyramid geometry, as (N,4) x1y1x2y2 plus level slices."""

    boxes: np.ndarray
    level_of: np.ndarray  # int index into LEVELS per anchor
    level_slices: dict[str, slice] = field(default_factory=dict)

    def __len__(self):
        return self.boxes.shape[0]


def anchor_shapes() -> list[tuple[str, float, float]]:
    """The 20 (level, width, height) anchor shapes."""
    out = []
    for level in LEVELS:
        size = ANCHOR_SIZES[level]
        for ratio in ASPECT_RATIOS:
            w = size / np.sqrt(ratio)
            h = size * np.sqrt(ratio)
            out.append((level, w, h))
    return out


def generate_anchors(pyramid_shapes: dict[str, tuple[int, int]]) -> AnchorSet:
    """One anchor per (cell, ratio) per level, centered on cell centers."""
    boxes = []
    level_of = []
    slices = {}
    offset = 0
    for li, level in enumerate(LEVELS):
        hl, wl = pyramid_shapes[level]
        stride = STRIDES[level]
        size = ANCHOR_SIZES[level]
        cx = (np.arange(wl) + 0.5) * stride
        cy = (np.arange(hl) + 0.5) * stride
        cxg, cyg = np.meshgrid(cx, cy)  # (hl, wl)
        for ratio in ASPECT_RATIOS:
            w = size / np.sqrt(ratio)
            h = size * np.sqrt(ratio)
            b = np.stack(
                [cxg - w / 2, cyg - h / 2, cxg + w / 2, cyg + h / 2], axis=-1
            ).reshape(-1, 4)
            boxes.append(b)
        n = hl * wl * NUM_RATIOS
        level_of.append(np.full(n, li, dtype=np.int64))
        slices[level] = slice(offset, offset + n)
        offset += n
    return AnchorSet(
        boxes=np.concatenate(boxes, axis=0),
        level_of=np.concatenate(level_of),
        level_slices=slices,
    )


@dataclass
class AnchorTargets:
    """Sampled training targets: indices into the anchor set."""

    indices: np.ndarray  # sampled anchor indices
    labels: np.ndarray  # 1 positive / 0 negative, aligned with indices
    deltas: np.ndarray  # (n,4), valid rows only where label==1


def assign_anchor_targets(
    anchors: AnchorSet,
    gts: list[Rect],
    rng: np.random.Generator,
    ignore: list[Rect] | None = None,
    sample_size: int = SAMPLE_SIZE,
    max_positives: int = MAX_POSITIVES,
) -> AnchorTargets:
    """Label anchors against ground truth and sample a fixed-size minibatch.

    Positive: IoU > 0.7 with some gt, or the best anchor of each gt (fallback).
    Negative: max IoU < 0.3. Anchors in between, or overlapping ignore
    regions, are never sampled.
    """
    n = len(anchors)
    boxes = anchors.boxes
    if gts:
        gt_arr = np.stack([g.as_array() for g in gts])
        iou = iou_rect_matrix(boxes, gt_arr)  # (n, g)
        max_iou = iou.max(axis=1)
        argmax_gt = iou.argmax(axis=1)
        pos_mask = max_iou > POS_IOU
        # fallback: best anchor per gt is positive even below the threshold
        for g in range(len(gts)):
            best = int(iou[:, g].argmax())
            if iou[best, g] > 0:
                pos_mask[best] = True
                argmax_gt[best] = g
        neg_mask = (max_iou < NEG_IOU) & ~pos_mask
    else:
        max_iou = np.zeros(n)
        argmax_gt = np.zeros(n, dtype=np.int64)
        pos_mask = np.zeros(n, dtype=bool)
        neg_mask = np.ones(n, dtype=bool)
    if ignore:
        ig_arr = np.stack([g.as_array() for g in ignore])
        ig_iou = iou_rect_matrix(boxes, ig_arr).max(axis=1)
        blocked = ig_iou > NEG_IOU
        neg_mask &= ~blocked
        pos_mask &= ~blocked

    pos_idx = np.flatnonzero(pos_mask)
    if len(pos_idx) > max_positives:
        pos_idx = rng.choice(pos_idx, size=max_positives, replace=False)
    neg_idx = np.flatnonzero(neg_mask)
    n_neg = min(len(neg_idx), sample_size - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)

    indices = np.concatenate([pos_idx, neg_idx])
    labels = np.concatenate([np.ones(len(pos_idx), dtype=np.int64), np.zeros(len(neg_idx), dtype=np.int64)])
    deltas = np.zeros((len(indices), 4))
    for row, ai in enumerate(pos_idx):
        a = boxes[ai]
        g = gts[argmax_gt[ai]]
        aw, ah = a[2] - a[0], a[3] - a[1]
        acx, acy = a[0] + aw / 2, a[1] + ah / 2
        gcx, gcy = g.center
        deltas[row] = [
            (gcx - acx) / aw,
            (gcy - acy) / ah,
            np.log(g.width / aw),
            np.log(g.height / ah),
        ]
    return AnchorTargets(indices=indices, labels=labels, deltas=deltas)


class ProposalHead(nn.Module):
    """3x3 conv plus sibling 1x1 convs, shared across pyramid levels."""

    def __init__(self, feature_dim: int = 256):
        super().__init__()
        self.conv = nn.Conv2d(feature_dim, feature_dim, 3, padding=1)
        self.relu = nn.ReLU(inplace=True)
        self.cls = nn.Conv2d(feature_dim, NUM_RATIOS * 2, 1)
        self.reg = nn.Conv2d(feature_dim, NUM_RATIOS * 4, 1)

    def forward(self, pyramid: FeaturePyramid) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        """Per level: ((A*2,H,W) logits, (A*4,H,W) deltas)."""
        out = {}
        for level in LEVELS:
            x = self.relu(self.conv(pyramid.levels[level].unsqueeze(0)))
            out[level] = (self.cls(x)[0], self.reg(x)[0])
        return out

    def flat_outputs(self, pyramid: FeaturePyramid) -> tuple[torch.Tensor, torch.Tensor]:
        """Flatten head outputs in the anchor ordering of generate_anchors.

        Returns logits (N,2) and deltas (N,4).
        """
        per_level = self.forward(pyramid)
        logits, deltas = [], []
        for level in LEVELS:
            cls_map, reg_map = per_level[level]
            h, w = cls_map.shape[-2:]
            # anchor order: ratio-major then row-major cells
            lg = cls_map.reshape(NUM_RATIOS, 2, h, w).permute(0, 2, 3, 1).reshape(-1, 2)
            dl = reg_map.reshape(NUM_RATIOS, 4, h, w).permute(0, 2, 3, 1).reshape(-1, 4)
            logits.append(lg)
            deltas.append(dl)
        return torch.cat(logits, dim=0), torch.cat(deltas, dim=0)


def propose(
    head: ProposalHead,
    pyramid: FeaturePyramid,
    k: int,
    pre_nms_top_n: int = PRE_NMS_TOP_N,
    nms_thr: float = PROPOSAL_NMS_THR,
) -> list[Proposal]:
    """Decode head outputs into top-k proposals after per-level filtering and NMS."""
    anchors = generate_anchors(pyramid.shapes())
    with torch.no_grad():
        logits, deltas = head.flat_outputs(pyramid)
        textness = torch.softmax(logits, dim=1)[:, 1].double().numpy()
        deltas = deltas.double().numpy()

    img_w, img_h = pyramid.image_w, pyramid.image_h
    cand_boxes = []
    cand_scores = []
    cand_levels = []
    for li, level in enumerate(LEVELS):
        sl = anchors.level_slices[level]
        idx = np.arange(sl.start, sl.stop)
        scores_l = textness[idx]
        if len(idx) > pre_nms_top_n:
            # stable: ties broken by lower cell index
            order = np.lexsort((idx, -scores_l))[:pre_nms_top_n]
            idx = idx[order]
            scores_l = scores_l[order]
        decoded = apply_delta_array(anchors.boxes[idx], deltas[idx])
        decoded[:, 0] = np.clip(decoded[:, 0], 0, img_w - 1e-3)
        decoded[:, 1] = np.clip(decoded[:, 1], 0, img_h - 1e-3)
        decoded[:, 2] = np.clip(decoded[:, 2], 1e-3, img_w)
        decoded[:, 3] = np.clip(decoded[:, 3], 1e-3, img_h)
        keep = (
            (decoded[:, 2] - decoded[:, 0] >= MIN_PROPOSAL_SIDE)
            & (decoded[:, 3] - decoded[:, 1] >= MIN_PROPOSAL_SIDE)
        )
        cand_boxes.append(decoded[keep])
        cand_scores.append(scores_l[keep])
        cand_levels.append(np.full(int(keep.sum()), li, dtype=np.int64))

    boxes = np.concatenate(cand_boxes, axis=0)
    scores = np.concatenate(cand_scores)
    levels = np.concatenate(cand_levels)
    kept = nms_array(boxes, scores, nms_thr, max_keep=k)
    return [
        Proposal(rect=Rect(*boxes[i]), textness=float(scores[i]), level=LEVELS[levels[i]])
        for i in kept
    ]
