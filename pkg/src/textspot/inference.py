"""Test-time pipeline: multi-scale forward passes, thresholding, refinement,
and a cross-scale NMS merge."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

from . import alphabet, refine as refine_mod
from .config import Config
from .data import image_to_tensor
from .geometry import Polygon6, Quadrangle, Rect, apply_delta_array, nms_array
from .model import TextSpotter
from .proposals import propose
from .recognition import AttentionTrace, recognition_score
from .region import extract_region


@dataclass
class SpottedWord:
    shape: Quadrangle | Polygon6
    text: str
    textness: float
    rec_score: float
    scale: int
    trace: AttentionTrace | None = None

    @property
    def rect(self) -> Rect:
        return self.shape.enclosing_rect()


def _scale_factor(h: int, w: int, shorter: int, max_side: int) -> float:
    f = shorter / min(h, w)
    return min(f, max_side / max(h, w))


def _spot_single_scale(
    model: TextSpotter, image: np.ndarray, scale: int, config: Config
) -> list[SpottedWord]:
    h, w = image.shape[:2]
    f = _scale_factor(h, w, scale, config["infer.max_side"])
    resized = cv2.resize(image, (max(64, int(round(w * f))), max(64, int(round(h * f)))),
                         interpolation=cv2.INTER_LINEAR)
    fx = resized.shape[1] / w
    fy = resized.shape[0] / h
    img = image_to_tensor(resized, next(model.parameters()).dtype)
    with torch.no_grad():
        pyramid = model.backbone(img)
        props = propose(model.tpn, pyramid, config["infer.topk"])
        if not props:
            return []
        grids = [
            extract_region(pyramid, p.rect, **model.roi_kwargs()).grid for p in props
        ]
        det_logits, det_deltas = model.tdn(grids)
        textness = torch.softmax(det_logits, dim=1)[:, 1].cpu().numpy()
        deltas = det_deltas.cpu().numpy()

    keep = textness > config["infer.textness_thr"]
    if not keep.any():
        return []
    boxes = np.stack([p.rect.as_array() for p in props])[keep]
    refined = apply_delta_array(boxes, deltas[keep])
    refined[:, 0] = np.clip(refined[:, 0], 0, pyramid.image_w - 1e-3)
    refined[:, 1] = np.clip(refined[:, 1], 0, pyramid.image_h - 1e-3)
    refined[:, 2] = np.clip(refined[:, 2], 1e-3, pyramid.image_w)
    refined[:, 3] = np.clip(refined[:, 3], 1e-3, pyramid.image_h)
    kept_scores = textness[keep]

    out: list[SpottedWord] = []
    single_extraction = config["infer.single_extraction"]
    refine_mode = config["refine.mode"]
    for i in range(refined.shape[0]):
        if refined[i, 2] - refined[i, 0] < 2 or refined[i, 3] - refined[i, 1] < 2:
            continue
        rect = Rect(*refined[i])
        with torch.no_grad():
            if single_extraction:
                src_idx = int(np.flatnonzero(keep)[i])
                grid = grids[src_idx]
                rec_rect = props[src_idx].rect
            else:
                grid = extract_region(pyramid, rect, **model.roi_kwargs()).grid
                rec_rect = rect
            symbols, probs, trace = model.trn.decode_greedy(grid)
        if not symbols:
            continue
        score = recognition_score(probs)
        if score <= config["infer.rec_thr"]:
            continue
        text = alphabet.detokenize(symbols)
        if refine_mode == "off":
            shape = Quadrangle.from_rect(rect)
        else:
            try:
                if refine_mode == "quad":
                    anchors = refine_mod.character_centroids(trace, rec_rect)
                    angle = refine_mod.fit_orientation(anchors)
                    shape = refine_mod.rotate_box(rect, angle)
                else:
                    shape = refine_mod.fit_polygon(trace, rec_rect)
            except refine_mod.NoCharactersError:
                shape = Quadrangle.from_rect(rect)
        # map back to original image coordinates
        verts = shape.vertices / np.array([fx, fy])
        shape = Quadrangle(verts) if verts.shape[0] == 4 else Polygon6(verts)
        out.append(
            SpottedWord(
                shape=shape,
                text=text,
                textness=float(kept_scores[i]),
                rec_score=score,
                scale=scale,
                trace=trace,
            )
        )
    return out


def spot(
    model: TextSpotter, image: np.ndarray, config: Config | None = None
) -> list[SpottedWord]:
    """Full multi-scale spotting: propose, detect, recognize, refine, merge."""
    config = config or model.config
    model.eval()
    pooled: list[SpottedWord] = []
    for scale in config["infer.scales"]:
        pooled.extend(_spot_single_scale(model, image, scale, config))
    if not pooled:
        return []
    boxes = np.stack([sw.rect.as_array() for sw in pooled])
    scores = np.array([sw.textness for sw in pooled])
    kept = nms_array(boxes, scores, config["infer.nms_thr"])
    return [pooled[i] for i in kept]


def format_prediction_line(sw: SpottedWord) -> str:
    coords = ",".join(f"{v:.2f}" for v in sw.shape.vertices.reshape(-1))
    return f"{coords},{sw.text},{sw.textness:.4f},{sw.rec_score:.4f}"


def parse_prediction_line(line: str) -> tuple[np.ndarray, str, float, float]:
    parts = line.strip().split(",")
    if len(parts) == 11:
        n = 8
    elif len(parts) == 15:
        n = 12
    else:
        raise ValueError(f"bad prediction line: {line!r}")
    coords = np.array([float(v) for v in parts[:n]]).reshape(-1, 2)
    text = parts[n]
    textness = float(parts[n + 1])
    rec_score = float(parts[n + 2])
    return coords, text, textness, rec_score
