"""Deterministic synthetic scene-text generator.

Words from an embedded bitmap font are composited onto simple backgrounds
with controllable rotation and curvature. The manifest records the
axis-aligned enclosure, the transcription, and (for verification only)
the true rotation angle of each word.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_rect_matrix
from .synthfont import GLYPH_H, GLYPH_W, glyph, word_bitmap

# covers every digit, letter and several punctuation marks
DEFAULT_VOCAB = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog",
    "pack", "my", "box", "with", "five", "dozen", "liquor", "jugs",
    "vex", "zeal", "01", "23", "45", "67", "89", "no1", "2go", "4x4",
    "hi!", "ok?", "a-b", "end.", "it's", "up:", "so,", "zig", "zag",
    "wavy", "kite", "quad", "jab", "fizz",
]

MAX_WORD_RETRIES = 60
OVERLAP_IOU_LIMIT = 0.05


class PlacementError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    image_size: tuple[int, int] = (256, 256)  # (h, w)
    word_count: tuple[int, int] = (1, 3)
    scale_range: tuple[int, int] = (3, 5)  # integer glyph pixel scale
    rotation_range: tuple[float, float] = (0.0, 0.0)  # degrees, clockwise-positive
    curved: bool = False
    arc_radius_range: tuple[float, float] = (120.0, 260.0)
    background: str = "flat"  # flat | gradient | noise
    vocab: list[str] = field(default_factory=lambda: list(DEFAULT_VOCAB))
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range
        if lo < -45 or hi > 45 or lo > hi:
            raise ValueError(f"rotation range must lie in [-45, 45]: {self.rotation_range}")
        if self.background not in ("flat", "gradient", "noise"):
            raise ValueError(f"unknown background mode {self.background!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kw = dict(d)
        for key in ("image_size", "word_count", "scale_range", "rotation_range", "arc_radius_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class SynthWord:
    bbox: tuple[float, float, float, float]
    text: str
    true_angle: float
    ignore: bool = False


@dataclass
class SynthSample:
    image: np.ndarray  # (H, W, 3) uint8
    words: list[SynthWord]


def _render_background(rng: np.random.Generator, h: int, w: int, mode: str) -> np.ndarray:
    base = rng.integers(160, 240)
    if mode == "flat":
        img = np.full((h, w), base, dtype=np.float64)
    elif mode == "gradient":
        lo = base - rng.integers(20, 60)
        gy = np.linspace(0, 1, h)[:, None]
        gx = np.linspace(0, 1, w)[None, :]
        t = rng.random()
        img = lo + (base - lo) * (t * gy + (1 - t) * gx)
    else:  # noise
        img = base + rng.normal(0, 8, size=(h, w))
    return np.clip(img, 0, 255)


def _rotated_mask(bitmap: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate a boolean bitmap by inverse mapping (hole-free)."""
    if abs(angle_deg) < 1e-9:
        return bitmap.copy()
    h, w = bitmap.shape
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    # rotated extent
    nw = int(math.ceil(abs(w * c) + abs(h * s))) + 1
    nh = int(math.ceil(abs(w * s) + abs(h * c))) + 1
    ncx, ncy = (nw - 1) / 2.0, (nh - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(nh), np.arange(nw), indexing="ij")
    dx = xx - ncx
    dy = yy - ncy
    # inverse rotation (by -angle) back into source coordinates
    sx = np.rint(c * dx + s * dy + cx).astype(np.int64)
    sy = np.rint(-s * dx + c * dy + cy).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.zeros((nh, nw), dtype=bool)
    out[ok] = bitmap[sy[ok], sx[ok]]
    return out


def _curved_mask(word: str, scale: int, radius: float, base_angle: float) -> np.ndarray:
    """Render glyphs tangent to a circular arc, then trim to content."""
    adv = (GLYPH_W + 1) * scale
    n = len(word)
    total_arc = adv * n
    span = max(total_arc, 1)
    canvas = np.zeros((int(4 * radius) + 200, span * 2 + 200), dtype=bool)
    ch_, cw_ = canvas.shape
    center_x = cw_ / 2.0
    center_y = 100 + radius  # circle center below the text
    arc_span = total_arc / radius
    for k, ch in enumerate(word):
        phi = -arc_span / 2 + (k + 0.5) * (adv / radius)
        gx = center_x + radius * math.sin(phi)
        gy = center_y - radius * math.cos(phi)
        tangent = math.degrees(phi) + base_angle
        g = glyph(ch)
        if scale > 1:
            g = np.kron(g, np.ones((scale, scale), dtype=bool))
        gm = _rotated_mask(g, tangent)
        gh, gw = gm.shape
        y0 = int(round(gy - gh / 2))
        x0 = int(round(gx - gw / 2))
        canvas[y0 : y0 + gh, x0 : x0 + gw] |= gm
    ys, xs = np.nonzero(canvas)
    return canvas[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def render_sample(spec: SynthSpec, index: int) -> SynthSample:
    """Deterministic in (spec, index): same inputs give identical pixels."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    img = _render_background(rng, h, w, spec.background)
    words: list[SynthWord] = []
    placed_boxes: list[list[float]] = []
    n_words = int(rng.integers(spec.word_count[0], spec.word_count[1] + 1))
    for _ in range(n_words):
        placed = False
        for _attempt in range(MAX_WORD_RETRIES):
            text = spec.vocab[int(rng.integers(len(spec.vocab)))]
            scale = int(rng.integers(spec.scale_range[0], spec.scale_range[1] + 1))
            angle = float(rng.uniform(*spec.rotation_range))
            if spec.curved:
                radius = float(rng.uniform(*spec.arc_radius_range))
                mask = _curved_mask(text, scale, radius, angle)
            else:
                mask = _rotated_mask(word_bitmap(text, scale), angle)
            mh, mw = mask.shape
            if mh >= h - 2 or mw >= w - 2:
                continue
            x0 = int(rng.integers(1, w - mw))
            y0 = int(rng.integers(1, h - mh))
            ys, xs = np.nonzero(mask)
            bbox = [x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1]
            if placed_boxes:
                ious = iou_rect_matrix(np.array([bbox], dtype=np.float64), np.array(placed_boxes))
                if ious.max() >= OVERLAP_IOU_LIMIT:
                    continue
            fg = float(rng.integers(0, 70))
            img[y0 : y0 + mh, x0 : x0 + mw][mask] = fg
            placed_boxes.append([float(v) for v in bbox])
            words.append(
                SynthWord(bbox=tuple(float(v) for v in bbox), text=text, true_angle=angle)
            )
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"PLACEMENT_FAILED: could not place word {len(words)+1}/{n_words} "
                f"after {MAX_WORD_RETRIES} retries"
            )
    rgb = np.repeat(np.rint(img).astype(np.uint8)[:, :, None], 3, axis=2)
    return SynthSample(image=rgb, words=words)


def write_dataset(spec: SynthSpec, out_dir: str, n: int) -> str:
    """Render n samples to out_dir/images plus a JSONL manifest. Returns manifest path."""
    import cv2

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as f:
        for i in range(n):
            sample = render_sample(spec, i)
            rel = os.path.join("images", f"{i:05d}.png")
            cv2.imwrite(os.path.join(out_dir, rel), sample.image[:, :, ::-1])
            record = {
                "image": rel,
                "words": [
                    {
                        "bbox": list(word.bbox),
                        "text": word.text,
                        "ignore": word.ignore,
                        "true_angle": word.true_angle,
                    }
                    for word in sample.words
                ],
            }
            f.write(json.dumps(record) + "\n")
    return manifest_path


def read_manifest(path: str) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
