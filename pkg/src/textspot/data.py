"""Training sample containers and manifest loading."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import Rect
from .synth import read_manifest


@dataclass
class WordInstance:
    bbox: np.ndarray  # x1,y1,x2,y2 float64
    text: str
    ignore: bool = False
    true_angle: float | None = None

    def rect(self) -> Rect:
        return Rect(*self.bbox)


@dataclass
class TrainSample:
    image: np.ndarray  # (H,W,3) uint8
    words: list[WordInstance]
    provenance: str = "synthetic"
    path: str = ""

    def live_words(self) -> list[WordInstance]:
        return [w for w in self.words if not w.ignore]


@dataclass
class Dataset:
    samples: list[TrainSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def load_dataset(manifest_path: str, provenance: str = "synthetic") -> Dataset:
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec in read_manifest(manifest_path):
        img_path = os.path.join(root, rec["image"])
        img = cv2.imread(img_path, cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(f"cannot read image {img_path}")
        words = [
            WordInstance(
                bbox=np.array(wr["bbox"], dtype=np.float64),
                text=wr["text"],
                ignore=bool(wr.get("ignore", False)),
                true_angle=wr.get("true_angle"),
            )
            for wr in rec["words"]
        ]
        samples.append(
            TrainSample(image=img[:, :, ::-1].copy(), words=words, provenance=provenance, path=img_path)
        )
    return Dataset(samples=samples)


def image_to_tensor(image: np.ndarray, dtype=None):
    import torch

    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    t = t.to(dtype or torch.float32) / 255.0 - 0.5
    return t
