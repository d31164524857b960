"""Text detection network: holistic encoding of region features, classification,
box regression, and online hard negative mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import Rect, iou_rect_matrix

# proposal-vs-gt labeling thresholds at this stage
TDN_POS_IOU = 0.6
TDN_NEG_IOU = 0.4
MINE_MAX_TOTAL = 512
MINE_MAX_POSITIVES = 256
HARD_FRACTION = 0.7


def column_sequence(grid: torch.Tensor) -> torch.Tensor:
    """Flatten each column of a (D,H,W') grid into a (W', D*H) sequence."""
    d, h, w = grid.shape
    return grid.permute(2, 0, 1).reshape(w, d * h)


def pad_sequences(seqs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (W,F) sequences into (N, W_max, F) plus lengths."""
    lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.int64)
    wmax = int(lengths.max())
    n, f = len(seqs), seqs[0].shape[1]
    out = seqs[0].new_zeros((n, wmax, f))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


class DetectionHead(nn.Module):
    """Recurrent (or pooled) holistic encoder followed by FC trunk and
    sibling classification / regression layers."""

    def __init__(
        self,
        feature_dim: int = 256,
        roi_h: int = 4,
        hidden: int = 1024,
        fc_dim: int = 1024,
        encoder: str = "recurrent",
    ):
        super().__init__()
        self.encoder = encoder
        in_dim = feature_dim * roi_h
        if encoder == "recurrent":
            self.rnn = nn.LSTM(in_dim, hidden, num_layers=1, batch_first=True)
            enc_dim = hidden
        elif encoder == "avgpool":
            enc_dim = in_dim
        elif encoder == "avgpool_fc":
            self.pool_fc = nn.Linear(in_dim, hidden)
            enc_dim = hidden
        else:
            raise ValueError(f"unknown encoder mode {encoder!r}")
        self.fc1 = nn.Linear(enc_dim, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.relu = nn.ReLU(inplace=True)
        self.cls = nn.Linear(fc_dim, 2)
        self.reg = nn.Linear(fc_dim, 4)

    def encode(self, grids: list[torch.Tensor]) -> torch.Tensor:
        """Fixed-size holistic vector per region feature grid."""
        seqs = [column_sequence(g) for g in grids]
        padded, lengths = pad_sequences(seqs)
        if self.encoder == "recurrent":
            packed = nn.utils.rnn.pack_padded_sequence(
                padded, lengths, batch_first=True, enforce_sorted=False
            )
            _, (h_n, _) = self.rnn(packed)
            return h_n[-1]
        mask = (
            torch.arange(padded.shape[1])[None, :] < lengths[:, None]
        ).to(padded.dtype)
        pooled = (padded * mask.unsqueeze(-1)).sum(dim=1) / lengths[:, None].to(padded.dtype)
        if self.encoder == "avgpool_fc":
            return self.pool_fc(pooled)
        return pooled

    def forward(self, grids: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (N,2) text/non-text logits and (N,4) box deltas."""
        x = self.encode(grids)
        x = self.relu(self.fc1(x))
        x = self.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


@dataclass
class LabeledProposal:
    """A proposal labeled against ground truth for second-stage training."""

    rect: Rect
    is_positive: bool
    gt_index: int  # -1 for negatives
    delta: np.ndarray  # regression target, zeros for negatives


def label_proposals(
    rects: list[Rect], gts: list[Rect], ignore_mask: list[bool] | None = None
) -> list[LabeledProposal | None]:
    """Label proposals positive/negative by IoU; the in-between band and
    ignore-region overlaps yield None (excluded from training)."""
    if ignore_mask is None:
        ignore_mask = [False] * len(gts)
    live = [i for i, m in enumerate(ignore_mask) if not m]
    out: list[LabeledProposal | None] = []
    if not rects:
        return out
    boxes = np.stack([r.as_array() for r in rects])
    if gts:
        gt_arr = np.stack([g.as_array() for g in gts])
        iou = iou_rect_matrix(boxes, gt_arr)
    else:
        iou = np.zeros((len(rects), 0))
    for i, rect in enumerate(rects):
        live_iou = iou[i, live] if live else np.zeros(0)
        best = float(live_iou.max()) if live_iou.size else 0.0
        ignored_overlap = any(iou[i, j] > TDN_NEG_IOU for j, m in enumerate(ignore_mask) if m)
        if best > TDN_POS_IOU:
            g = live[int(live_iou.argmax())]
            gt = gts[g]
            w, h = rect.width, rect.height
            cx, cy = rect.center
            gcx, gcy = gt.center
            delta = np.array(
                [
                    (gcx - cx) / w,
                    (gcy - cy) / h,
                    np.log(gt.width / w),
                    np.log(gt.height / h),
                ]
            )
            out.append(LabeledProposal(rect, True, g, delta))
        elif best < TDN_NEG_IOU and not ignored_overlap:
            out.append(LabeledProposal(rect, False, -1, np.zeros(4)))
        else:
            out.append(None)
    return out


def mine_hard_negatives(
    scored: list[tuple[object, float, bool]],
    rng: np.random.Generator,
    max_total: int = MINE_MAX_TOTAL,
    max_positives: int = MINE_MAX_POSITIVES,
) -> list[int]:
    """Re-sample labeled proposals to a 1:3 pos:neg ratio.

    scored: (proposal, textness, is_positive) triples. Of the negative budget,
    70% are the highest-textness false positives and 30% uniform random from
    the rest. Returns indices into `scored`, positives first.
    """
    pos_idx = [i for i, (_, _, p) in enumerate(scored) if p]
    neg_idx = [i for i, (_, _, p) in enumerate(scored) if not p]
    if len(pos_idx) > max_positives:
        pos_idx = list(rng.choice(pos_idx, size=max_positives, replace=False))
    n_pos = len(pos_idx)
    if n_pos > 0:
        neg_budget = min(3 * n_pos, len(neg_idx), max_total - n_pos)
    else:
        neg_budget = min(max_total, len(neg_idx))
    if n_pos + neg_budget > max_total:
        n_pos = max_total - neg_budget
        pos_idx = pos_idx[:n_pos]

    n_hard = int(round(HARD_FRACTION * neg_budget))
    n_rand = neg_budget - n_hard
    by_score = sorted(neg_idx, key=lambda i: (-scored[i][1], i))
    hard = by_score[:n_hard]
    rest = by_score[n_hard:]
    if n_rand > 0 and rest:
        randpick = sorted(rng.choice(len(rest), size=min(n_rand, len(rest)), replace=False))
        rand = [rest[j] for j in randpick]
    else:
        rand = []
    return pos_idx + hard + rand
