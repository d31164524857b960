"""Scoring harness: IoU plus transcription matching, don't-care handling,
Word-Spotting and End-to-End protocols, lexicons, P/R/F and AP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alphabet import normalize_for_match
from .geometry import iou_polygon, iou_rect_matrix

IOU_MATCH_THR = 0.5
MIN_SCORED_LENGTH = 4  # ground truths shorter than this are ignored


class LexiconRequiredError(ValueError):
    pass


@dataclass
class Lexicon:
    words: list[str]
    scope: str = "strong"  # strong | weak | generic

    def __post_init__(self):
        seen = set()
        folded = []
        for w in self.words:
            lw = w.lower()
            if lw not in seen:
                seen.add(lw)
                folded.append(lw)
        self.words = folded

    def __contains__(self, word: str) -> bool:
        return word.lower() in set(self.words)


def edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_filter(
    pred_text: str,
    lexicon: Lexicon | None,
    reject_misses: bool,
    slack_base: int = 1,
    slack_per_chars: int = 8,
) -> str | None:
    """Snap a predicted word to the lexicon.

    Exact (case-insensitive) hits pass through; near misses within the edit
    distance budget are corrected; the rest are rejected (word spotting) or
    kept raw (end-to-end without lexicon constraint).
    """
    if lexicon is None or not lexicon.words:
        return None if reject_misses and lexicon is not None else pred_text
    low = pred_text.lower()
    wordset = set(lexicon.words)
    if low in wordset:
        return low
    budget = slack_base + len(low) // slack_per_chars
    best, best_d = None, budget + 1
    for w in lexicon.words:
        d = edit_distance(low, w)
        if d < best_d:
            best, best_d = w, d
    if best is not None and best_d <= budget:
        return best
    return None if reject_misses else pred_text


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)  # (pred, gt)
    verdicts: list[str] = field(default_factory=list)  # per prediction: tp | fp | ignored

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _shape_iou(pred_coords: np.ndarray, gt_coords: np.ndarray, kind: str) -> float:
    if kind == "rect":
        pb = np.array(
            [[pred_coords[:, 0].min(), pred_coords[:, 1].min(),
              pred_coords[:, 0].max(), pred_coords[:, 1].max()]]
        )
        gb = np.array(
            [[gt_coords[:, 0].min(), gt_coords[:, 1].min(),
              gt_coords[:, 0].max(), gt_coords[:, 1].max()]]
        )
        return float(iou_rect_matrix(pb, gb)[0, 0])
    return iou_polygon(pred_coords, gt_coords)


@dataclass
class GroundTruth:
    coords: np.ndarray  # (K,2) polygon vertices (rect corners allowed)
    text: str
    dont_care: bool = False


@dataclass
class Prediction:
    coords: np.ndarray
    text: str
    confidence: float


def match_instances(
    preds: list[Prediction],
    gts: list[GroundTruth],
    geometry_kind: str = "rect",
    protocol: str = "end_to_end",
    lexicon: Lexicon | None = None,
) -> MatchResult:
    """Greedy confidence-ordered matching under the IoU>0.5 + text criterion.

    Ignored ground truths (don't-care, too short, or absent from the word
    spotting lexicon) absorb overlapping predictions without scoring them.
    """
    if protocol not in ("end_to_end", "word_spotting"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == "word_spotting" and (lexicon is None or not lexicon.words):
        raise LexiconRequiredError("LEXICON_REQUIRED for word spotting")

    gt_norm = [normalize_for_match(g.text) for g in gts]
    ignored = []
    for g, norm in zip(gts, gt_norm):
        ig = g.dont_care or len(norm) < MIN_SCORED_LENGTH
        if protocol == "word_spotting" and lexicon is not None and not ig:
            ig = norm not in lexicon
        ignored.append(ig)

    result = MatchResult()
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    gt_taken = [False] * len(gts)
    verdicts = [""] * len(preds)
    for pi in order:
        pred = preds[pi]
        text = pred.text
        if lexicon is not None:
            filtered = lexicon_filter(text, lexicon, reject_misses=(protocol == "word_spotting"))
            if filtered is None:
                verdicts[pi] = "ignored"
                continue
            text = filtered
        pnorm = normalize_for_match(text)
        best_gt, best_iou = -1, IOU_MATCH_THR
        overlaps_ignored = False
        for gi, gt in enumerate(gts):
            iou = _shape_iou(pred.coords, gt.coords, geometry_kind)
            if iou > IOU_MATCH_THR and ignored[gi]:
                overlaps_ignored = True
            if gt_taken[gi] or ignored[gi]:
                continue
            if iou > best_iou and pnorm == gt_norm[gi]:
                best_gt, best_iou = gi, iou
        if best_gt >= 0:
            gt_taken[best_gt] = True
            result.tp += 1
            result.matched_pairs.append((pi, best_gt))
            verdicts[pi] = "tp"
        elif overlaps_ignored:
            verdicts[pi] = "ignored"
        else:
            result.fp += 1
            verdicts[pi] = "fp"
    result.fn = sum(1 for gi in range(len(gts)) if not ignored[gi] and not gt_taken[gi])
    result.verdicts = verdicts
    return result


def f_measure(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, F); zero divisions yield 0."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("negative count")
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def harmonic_mean(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def average_precision(
    image_preds: list[list[Prediction]],
    image_gts: list[list[GroundTruth]],
    geometry_kind: str = "rect",
    protocol: str = "end_to_end",
    lexicon: Lexicon | None = None,
) -> float:
    """Trapezoidal area under the precision-recall curve swept over confidence."""
    rows = []  # (confidence, is_tp)
    total_gt = 0
    for preds, gts in zip(image_preds, image_gts):
        res = match_instances(preds, gts, geometry_kind, protocol, lexicon)
        norm = [normalize_for_match(g.text) for g in gts]
        for g, nm in zip(gts, norm):
            ig = g.dont_care or len(nm) < MIN_SCORED_LENGTH
            if protocol == "word_spotting" and lexicon is not None and not ig:
                ig = nm not in lexicon
            if not ig:
                total_gt += 1
        for pi, verdict in enumerate(res.verdicts):
            if verdict == "ignored":
                continue
            rows.append((preds[pi].confidence, verdict == "tp"))
    if total_gt == 0 or not rows:
        return 0.0
    rows.sort(key=lambda t: -t[0])
    tps = np.cumsum([1 if is_tp else 0 for _, is_tp in rows])
    fps = np.cumsum([0 if is_tp else 1 for _, is_tp in rows])
    recall = tps / total_gt
    precision = tps / np.maximum(tps + fps, 1)
    # trapezoid over recall, starting from (0, first precision)
    r_pts = np.concatenate([[0.0], recall])
    p_pts = np.concatenate([[precision[0] if len(precision) else 0.0], precision])
    return float(np.trapezoid(p_pts, r_pts))
