"""Joint optimization: proposal and detection/recognition losses, augmentation,
and the approximate-joint training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from . import alphabet
from .config import Config
from .data import TrainSample, WordInstance, image_to_tensor
from .detection import label_proposals, mine_hard_negatives
from .geometry import Rect
from .model import TextSpotter
from .proposals import assign_anchor_targets, generate_anchors, propose
from .region import extract_region


class NanLossError(RuntimeError):
    pass


@dataclass
class LossReport:
    l_tpn_cls: float = 0.0
    l_tpn_reg: float = 0.0
    l_det_cls: float = 0.0
    l_det_reg: float = 0.0
    l_rec: float = 0.0

    @property
    def total(self) -> float:
        return self.l_tpn_cls + self.l_tpn_reg + self.l_det_cls + self.l_det_reg + self.l_rec

    def check_finite(self):
        vals = (self.l_tpn_cls, self.l_tpn_reg, self.l_det_cls, self.l_det_reg, self.l_rec)
        if not all(math.isfinite(v) for v in vals):
            raise NanLossError(f"NAN_LOSS: {self}")

    def add(self, other: "LossReport", weight: float = 1.0):
        self.l_tpn_cls += weight * other.l_tpn_cls
        self.l_tpn_reg += weight * other.l_tpn_reg
        self.l_det_cls += weight * other.l_det_cls
        self.l_det_reg += weight * other.l_det_reg
        self.l_rec += weight * other.l_rec


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row smooth-L1 summed over the 4 delta coordinates, transition at 1."""
    diff = (pred - target).abs()
    return torch.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5).sum(dim=-1)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary logistic loss via 2-way cross entropy, per element."""
    return F.cross_entropy(logits, labels, reduction="none")


def tpn_loss(
    logits: torch.Tensor,
    pred_deltas: torch.Tensor,
    labels: torch.Tensor,
    target_deltas: torch.Tensor,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Normalized classification term over the sample plus regression over positives."""
    n = logits.shape[0]
    cls = classification_loss(logits, labels).sum() / max(n, 1)
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos > 0:
        reg = smooth_l1(pred_deltas[pos], target_deltas[pos]).sum() / n_pos
    else:
        reg = logits.sum() * 0.0
    return cls + reg, {"cls": float(cls.detach()), "reg": float(reg.detach())}


def drn_loss(
    det_logits: torch.Tensor,
    det_deltas: torch.Tensor,
    labels: torch.Tensor,
    target_deltas: torch.Tensor,
    rec_losses: torch.Tensor | None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Detection classification/regression plus recognition term of the joint loss.

    rec_losses: per-positive-word summed cross entropy (may be None/empty when
    no positives carry recognition targets).
    """
    n = det_logits.shape[0]
    cls = classification_loss(det_logits, labels).sum() / max(n, 1)
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos > 0:
        reg = smooth_l1(det_deltas[pos], target_deltas[pos]).sum() / n_pos
    else:
        reg = det_logits.sum() * 0.0
    if rec_losses is not None and rec_losses.numel() > 0:
        rec = rec_losses.sum() / rec_losses.numel()
    else:
        rec = det_logits.sum() * 0.0
    return cls + reg + rec, {"cls": float(cls.detach()), "reg": float(reg.detach()), "rec": float(rec.detach())}


# ---------------------------------------------------------------------------
# augmentation

HEIGHT_RESCALE_P = 0.5
ROTATE_P = 0.4
ROTATE_RANGE = 10.0
CROP_P = 0.5
CROP_FRACTION = 0.9
IGNORE_LOST_AREA = 0.5


def _resize(sample: TrainSample, fx: float, fy: float) -> TrainSample:
    h, w = sample.image.shape[:2]
    nw, nh = max(1, int(round(w * fx))), max(1, int(round(h * fy)))
    img = cv2.resize(sample.image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    words = []
    for word in sample.words:
        b = word.bbox * np.array([fx, fy, fx, fy])
        words.append(WordInstance(b, word.text, word.ignore, word.true_angle))
    return TrainSample(img, words, sample.provenance, sample.path)


def _clip_words(words: list[WordInstance], w: int, h: int) -> list[WordInstance]:
    out = []
    for word in words:
        b = word.bbox
        area = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
        c = np.array(
            [max(b[0], 0), max(b[1], 0), min(b[2], float(w)), min(b[3], float(h))]
        )
        if c[2] - c[0] < 2 or c[3] - c[1] < 2:
            continue
        clipped_area = (c[2] - c[0]) * (c[3] - c[1])
        ignore = word.ignore or (area > 0 and clipped_area / area < IGNORE_LOST_AREA)
        out.append(WordInstance(c, word.text, ignore, word.true_angle))
    return out


def augment(sample: TrainSample, rng: np.random.Generator, config: Config) -> TrainSample:
    """Multi-scale resize, optional height rescale, rotation, and crop.

    All word boxes are transformed consistently; words losing more than half
    their area become ignore regions.
    """
    scales = config["train.scales"]
    max_side = config["train.max_side"]
    h, w = sample.image.shape[:2]
    target = float(scales[int(rng.integers(len(scales)))])
    f = target / min(h, w)
    f = min(f, max_side / max(h, w))
    out = _resize(sample, f, f)

    if not config["train.augment"]:
        return out

    if rng.random() < HEIGHT_RESCALE_P:
        ratio = float(rng.uniform(0.8, 1.2))
        out = _resize(out, 1.0, ratio)

    if rng.random() < ROTATE_P:
        angle = float(rng.uniform(-ROTATE_RANGE, ROTATE_RANGE))
        hh, ww = out.image.shape[:2]
        m = cv2.getRotationMatrix2D((ww / 2, hh / 2), -angle, 1.0)  # cv2 is ccw-positive
        img = cv2.warpAffine(out.image, m, (ww, hh), flags=cv2.INTER_LINEAR, borderValue=(127, 127, 127))
        words = []
        for word in out.words:
            b = word.bbox
            corners = np.array(
                [[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]]]
            )
            rot = corners @ m[:, :2].T + m[:, 2]
            nb = np.array([rot[:, 0].min(), rot[:, 1].min(), rot[:, 0].max(), rot[:, 1].max()])
            ta = None if word.true_angle is None else word.true_angle + angle
            words.append(WordInstance(nb, word.text, word.ignore, ta))
        out = TrainSample(img, _clip_words(words, ww, hh), out.provenance, out.path)

    if rng.random() < CROP_P:
        hh, ww = out.image.shape[:2]
        ch, cw = int(round(hh * CROP_FRACTION)), int(round(ww * CROP_FRACTION))
        y0 = int(rng.integers(0, hh - ch + 1))
        x0 = int(rng.integers(0, ww - cw + 1))
        img = out.image[y0 : y0 + ch, x0 : x0 + cw]
        words = []
        for word in out.words:
            b = word.bbox - np.array([x0, y0, x0, y0], dtype=np.float64)
            words.append(WordInstance(b, word.text, word.ignore, word.true_angle))
        words = _clip_words(words, cw, ch)
        img = cv2.resize(img, (ww, hh), interpolation=cv2.INTER_LINEAR)
        fx, fy = ww / cw, hh / ch
        words = [
            WordInstance(w2.bbox * np.array([fx, fy, fx, fy]), w2.text, w2.ignore, w2.true_angle)
            for w2 in words
        ]
        out = TrainSample(img, words, out.provenance, out.path)

    return out


# ---------------------------------------------------------------------------
# attention guidance


def attention_guide(
    image: np.ndarray, rect: Rect, n_chars: int, grid_h: int, grid_w: int
) -> np.ndarray:
    """Per-character target attention centroids, (n_chars, 2) as (row, col) in
    grid coordinates.

    Derived only from the word box, the label length, and the image itself:
    characters are assumed roughly uniformly spaced across the box, and within
    each character's column band the target sits at the ink centroid (pixels
    darker than the patch median), so the targets follow slanted baselines.
    """
    h, w = image.shape[:2]
    x1 = int(np.clip(math.floor(rect.x1), 0, w - 1))
    y1 = int(np.clip(math.floor(rect.y1), 0, h - 1))
    x2 = int(np.clip(math.ceil(rect.x2), x1 + 1, w))
    y2 = int(np.clip(math.ceil(rect.y2), y1 + 1, h))
    patch = image[y1:y2, x1:x2]
    gray = patch.mean(axis=2) if patch.ndim == 3 else patch.astype(np.float64)
    ink = np.clip(float(np.median(gray)) - gray, 0.0, None)
    ph, pw = ink.shape
    ys = np.arange(ph) + 0.5
    xs = np.arange(pw) + 0.5
    targets = np.zeros((n_chars, 2))
    for t in range(n_chars):
        c0 = int(math.floor(t / n_chars * pw))
        c1 = max(c0 + 1, int(math.ceil((t + 1) / n_chars * pw)))
        band = ink[:, c0:c1]
        mass = band.sum()
        if mass > 0:
            yc = float((band.sum(axis=1) * ys).sum() / mass)
            xc = float((band.sum(axis=0) * xs[c0:c1]).sum() / mass)
        else:
            yc, xc = ph / 2.0, (c0 + c1) / 2.0
        targets[t] = (yc / ph * grid_h, xc / pw * grid_w)
    return targets


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainState:
    iteration: int = 0
    loss_rows: list[dict] = field(default_factory=list)


def learning_rate(config: Config, iteration: int) -> float:
    lr = config["train.lr"] * config["train.decay_rate"] ** (iteration // config["train.decay_every"])
    return max(lr, config["train.min_lr"])


class Trainer:
    """Single-writer training loop implementing approximate joint optimization:
    no gradients flow through proposal box coordinates."""

    def __init__(self, model: TextSpotter, config: Config | None = None):
        self.model = model
        self.config = config or model.config
        self.rng = np.random.default_rng(self.config["seed"])
        torch.manual_seed(self.config["seed"])
        self.optimizer = torch.optim.SGD(
            model.parameters(),
            lr=self.config["train.lr"],
            momentum=self.config["train.momentum"],
            weight_decay=self.config["train.weight_decay"],
        )
        self.state = TrainState()

    def _sample_losses(self, sample: TrainSample) -> tuple[torch.Tensor, LossReport]:
        cfg = self.config
        model = self.model
        img = image_to_tensor(sample.image, next(model.parameters()).dtype)
        pyramid = model.backbone(img)

        gt_rects = [w.rect() for w in sample.live_words()]
        ignore_rects = [w.rect() for w in sample.words if w.ignore]
        anchors = generate_anchors(pyramid.shapes())
        targets = assign_anchor_targets(anchors, gt_rects, self.rng, ignore=ignore_rects)
        logits, deltas = model.tpn.flat_outputs(pyramid)
        idx = torch.from_numpy(targets.indices)
        labels = torch.from_numpy(targets.labels)
        tgt_deltas = torch.from_numpy(targets.deltas).to(logits.dtype)
        l_tpn, tpn_parts = tpn_loss(logits[idx], deltas[idx], labels, tgt_deltas)

        # second stage: proposals are detached boxes (approximate joint training)
        props = propose(model.tpn, pyramid, cfg["train.num_proposals"])
        rects = [p.rect for p in props]
        scores = [p.textness for p in props]
        if cfg["train.add_gt_proposals"]:
            for r in gt_rects:
                rects.append(r.clipped(pyramid.image_w, pyramid.image_h))
                scores.append(1.0)
        labeled = label_proposals(
            rects,
            gt_rects + ignore_rects,
            [False] * len(gt_rects) + [True] * len(ignore_rects),
        )
        keep = [(i, lp) for i, lp in enumerate(labeled) if lp is not None]
        if not keep:
            report = LossReport(l_tpn_cls=tpn_parts["cls"], l_tpn_reg=tpn_parts["reg"])
            return l_tpn, report

        grids = [
            extract_region(pyramid, lp.rect, **model.roi_kwargs()).grid for _, lp in keep
        ]
        with torch.no_grad():
            pre_logits, _ = model.tdn([g.detach() for g in grids])
            textness = torch.softmax(pre_logits, dim=1)[:, 1].cpu().numpy()
        scored = [
            (lp, float(textness[row]), lp.is_positive) for row, (_, lp) in enumerate(keep)
        ]
        mined = mine_hard_negatives(scored, self.rng, max_total=cfg["train.mine_total"])

        mined_grids = [grids[m] for m in mined]
        det_logits, det_deltas = model.tdn(mined_grids)
        det_labels = torch.tensor([1 if scored[m][2] else 0 for m in mined], dtype=torch.int64)
        det_targets = torch.stack(
            [torch.from_numpy(scored[m][0].delta) for m in mined]
        ).to(det_logits.dtype)

        # recognition on positive proposals with usable targets
        words = sample.live_words()
        rec_grids, rec_targets, rec_rects = [], [], []
        t_cap = cfg["train.tmax"] - 1
        for row, m in enumerate(mined):
            lp = scored[m][0]
            if not lp.is_positive:
                continue
            text = words[lp.gt_index].text
            tokens = alphabet.tokenize(text)
            if len(tokens) > t_cap + 1:
                continue
            rec_grids.append(mined_grids[row])
            rec_targets.append(tokens)
            rec_rects.append(lp.rect)
            if len(rec_grids) >= cfg["train.max_rec_words"]:
                break
        rec_losses = None
        if rec_grids and cfg["train.joint"]:
            p_drop = cfg["train.holistic_dropout"]
            keep = None
            if p_drop > 0:
                keep = [bool(self.rng.random() >= p_drop) for _ in rec_grids]
            gw = cfg["train.attn_guide"]
            guides = None
            if gw > 0:
                guides = [
                    attention_guide(sample.image, r, len(t) - 1, g.shape[1], g.shape[2])
                    for r, t, g in zip(rec_rects, rec_targets, rec_grids)
                ]
            rec_losses = model.trn.recognition_loss(
                rec_grids,
                rec_targets,
                keep,
                attn_guide=guides,
                guide_weight=gw,
                guide_sigma=cfg["train.attn_guide_sigma"],
            )
        l_drn, drn_parts = drn_loss(det_logits, det_deltas, det_labels, det_targets, rec_losses)

        report = LossReport(
            l_tpn_cls=tpn_parts["cls"],
            l_tpn_reg=tpn_parts["reg"],
            l_det_cls=drn_parts["cls"],
            l_det_reg=drn_parts["reg"],
            l_rec=drn_parts["rec"],
        )
        return l_tpn + l_drn, report

    def train_step(self, batch: list[TrainSample]) -> LossReport:
        cfg = self.config
        lr = learning_rate(cfg, self.state.iteration)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        report = LossReport()
        total = None
        for sample in batch:
            aug = augment(sample, self.rng, cfg)
            loss, rep = self._sample_losses(aug)
            report.add(rep, 1.0 / len(batch))
            total = loss if total is None else total + loss
        total = total / len(batch)
        report.check_finite()
        total.backward()
        self.optimizer.step()
        self.state.iteration += 1
        self.state.loss_rows.append(
            {
                "iteration": self.state.iteration,
                "lr": lr,
                "l_tpn_cls": report.l_tpn_cls,
                "l_tpn_reg": report.l_tpn_reg,
                "l_det_cls": report.l_det_cls,
                "l_det_reg": report.l_det_reg,
                "l_rec": report.l_rec,
                "total": report.total,
            }
        )
        return report

    def next_batch(self, samples: list[TrainSample]) -> list[TrainSample]:
        n = self.config["train.batch_size"]
        idx = self.rng.choice(len(samples), size=min(n, len(samples)), replace=len(samples) < n)
        return [copy.deepcopy(samples[i]) for i in idx]
