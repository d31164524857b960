"""End-to-end acceptance gate: formula fidelity, oracle equivalence, and
desk-scale learnability of the full spotting pipeline.

The learnability fixtures train three small models (joint, detection-only plus
separate recognizer, fixed-size RoI) on a 25-image synthetic set; they dominate
the suite's runtime. TEXTSPOT_ACCEPT_ITERS overrides the training budget for
quick smoke runs (the full-budget assertions only apply at the default).
"""

import math
import os
import time

import numpy as np
import pytest
import torch
from scipy import stats

from textspot import alphabet
from textspot.config import Config
from textspot.data import load_dataset
from textspot.detection import mine_hard_negatives
from textspot.evaluate import GroundTruth, Prediction, f_measure, match_instances
from textspot.geometry import Quadrangle
from textspot.inference import spot
from textspot.model import TextSpotter
from textspot.proposals import anchor_shapes, generate_anchors
from textspot.pyramid import LEVELS, STRIDES
from textspot.recognition import RecognitionHead
from textspot.refine import (
    character_centroids,
    fit_orientation,
    half_angles,
    quad_angle,
    synthetic_trace,
)
from textspot.region import roi_output_width
from textspot.synth import SynthSpec, write_dataset
from textspot.training import Trainer, attention_guide, drn_loss, tpn_loss

ACCEPT_ITERS = int(os.environ.get("TEXTSPOT_ACCEPT_ITERS", "5000"))
FULL_BUDGET = ACCEPT_ITERS >= 5000


# ---------------------------------------------------------------------------
# 1. formula fidelity


def test_criterion_1_output_width_exhaustive():
    start = time.monotonic()
    for h in range(8, 513):
        for w in range(8, 513):
            expect = int(math.floor(min(30.0, max(4.0, 12.0 * w / h)) + 0.5))
            got = roi_output_width(h, w)
            assert got == (4, expect), (h, w, got, expect)
    assert time.monotonic() - start < 5.0


# ---------------------------------------------------------------------------
# 2. anchor design


def test_criterion_2_anchor_set():
    shapes = anchor_shapes()
    assert len(shapes) == 20
    ratios = sorted({h / w for _, w, h in shapes})
    for got, want in zip(ratios, (0.125, 0.25, 0.5, 1.0)):
        assert abs(got - want) <= 1e-9
    pyramid_shapes = {lv: (256 // STRIDES[lv], 256 // STRIDES[lv]) for lv in LEVELS}
    anchors = generate_anchors(pyramid_shapes)
    # one anchor per (cell, ratio) across P2..P6: 4*(64^2+32^2+16^2+8^2+4^2)
    assert len(anchors) == 21_824
    b = anchors.boxes
    hw = np.stack([(b[:, 3] - b[:, 1]), (b[:, 2] - b[:, 0])], axis=1)
    anchor_ratios = np.unique(np.round(hw[:, 0] / hw[:, 1], 9))
    assert anchor_ratios.tolist() == [0.125, 0.25, 0.5, 1.0]


# ---------------------------------------------------------------------------
# 3. attention correctness


def test_criterion_3_attention_and_gradients():
    start = time.monotonic()
    torch.manual_seed(0)
    head = RecognitionHead(feature_dim=6, hidden=10, attn_dim=8).double()
    rng = np.random.default_rng(0)
    for i in range(100):
        wp = int(rng.integers(4, 31))
        g = torch.Generator().manual_seed(i)
        grid = torch.rand(6, 4, wp, generator=g, dtype=torch.float64)
        values, mask = head._flatten_values([grid])
        h_t = torch.rand(1, 10, generator=g, dtype=torch.float64)
        with torch.no_grad():
            alpha, _ = head.attend(values, h_t, mask)
        assert abs(float(alpha.sum()) - 1.0) <= 1e-6
        if i < 5:
            # scalar recomputation of the attention equation
            wv = head.w_v.weight.detach().numpy()
            bv = head.w_v.bias.detach().numpy()
            wh = head.w_h.weight.detach().numpy()
            we = head.w_e.weight.detach().numpy()[0]
            v = values[0].numpy()
            hvec = h_t[0].numpy()
            scores = np.array([we @ np.tanh(wv @ vi + bv + wh @ hvec) for vi in v])
            ex = np.exp(scores - scores.max())
            assert np.allclose(alpha[0].numpy(), ex / ex.sum(), atol=1e-9)

    grids = [torch.rand(6, 4, 9, dtype=torch.float64), torch.rand(6, 4, 14, dtype=torch.float64)]
    targets = [alphabet.tokenize("hi"), alphabet.tokenize("cat")]

    def loss_fn():
        return head.recognition_loss(grids, targets).sum()

    head.zero_grad()
    loss_fn().backward()
    eps = 1e-6
    prng = np.random.default_rng(1)
    for p in (head.w_v.weight, head.w_h.weight, head.w_e.weight, head.w_o.weight):
        flat, gflat = p.data.view(-1), p.grad.view(-1)
        for idx in prng.choice(flat.numel(), size=4, replace=False):
            idx = int(idx)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = gflat[idx].item()
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd), abs(an))
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 4. loss oracles


def test_criterion_4_loss_oracles():
    def sl1(d):
        return 0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5

    def ce(pair, label):
        z = np.asarray(pair, dtype=np.float64)
        return float(-z[label] + np.log(np.exp(z).sum()))

    logits = torch.tensor([[1.5, -0.5], [0.0, 0.0], [-2.0, 2.0]], dtype=torch.float64)
    # regression rows exercise both branches and the |d| = 1 boundary
    pred = torch.tensor(
        [[1.0, -1.0, 0.5, -2.0], [0.0] * 4, [0.25, 1.0, -1.5, 0.0]], dtype=torch.float64
    )
    labels = torch.tensor([1, 0, 1])
    tgt = torch.zeros(3, 4, dtype=torch.float64)
    loss, parts = tpn_loss(logits, pred, labels, tgt)
    cls_o = (ce([1.5, -0.5], 1) + ce([0.0, 0.0], 0) + ce([-2.0, 2.0], 1)) / 3
    reg_o = (
        sum(sl1(v) for v in (1.0, -1.0, 0.5, -2.0)) + sum(sl1(v) for v in (0.25, 1.0, -1.5, 0.0))
    ) / 2
    assert parts["cls"] == pytest.approx(cls_o, abs=1e-9)
    assert parts["reg"] == pytest.approx(reg_o, abs=1e-9)
    assert float(loss) == pytest.approx(cls_o + reg_o, abs=1e-9)

    rec = torch.tensor([3.0, 5.0, 10.0], dtype=torch.float64)
    loss2, parts2 = drn_loss(logits, pred, labels, tgt, rec)
    assert parts2["rec"] == pytest.approx(6.0, abs=1e-12)
    assert float(loss2) == pytest.approx(cls_o + reg_o + 6.0, abs=1e-9)

    # degenerate branch: no recognition words
    loss3, parts3 = drn_loss(logits, pred, labels, tgt, None)
    assert parts3["rec"] == 0.0
    assert float(loss3) == pytest.approx(cls_o + reg_o, abs=1e-9)
    _, parts4 = drn_loss(logits, pred, labels, tgt, torch.zeros(0, dtype=torch.float64))
    assert parts4["rec"] == 0.0

    # no positives at all: regression term vanishes, classification survives
    neg_labels = torch.zeros(3, dtype=torch.int64)
    loss5, parts5 = tpn_loss(logits, pred, neg_labels, tgt)
    cls5 = (ce([1.5, -0.5], 0) + ce([0.0, 0.0], 0) + ce([-2.0, 2.0], 0)) / 3
    assert parts5["reg"] == 0.0
    assert float(loss5) == pytest.approx(cls5, abs=1e-9)


# ---------------------------------------------------------------------------
# 5. mining contract


def test_criterion_5_mining_ratio_and_split():
    n_pos, n_neg = 10, 110
    scores = np.linspace(1.0, 0.0, n_neg)
    scored = [(None, 0.9, True)] * n_pos + [(None, float(s), False) for s in scores]
    n_hard = round(0.7 * 30)
    counts = np.zeros(n_neg)
    for run in range(1000):
        rng = np.random.default_rng(run)
        idx = mine_hard_negatives(scored, rng)
        pos = [i for i in idx if scored[i][2]]
        neg = [i for i in idx if not scored[i][2]]
        assert len(pos) == n_pos and len(neg) == 3 * n_pos  # exact 1:3
        assert len(set(idx)) == len(idx)
        for i in neg:
            counts[i - n_pos] += 1
    assert np.all(counts[:n_hard] == 1000)  # 70% hard: deterministic top scores
    cold = counts[n_hard:]
    expected = 1000 * (30 - n_hard) / (n_neg - n_hard)
    chi2 = float(((cold - expected) ** 2 / expected).sum())
    p = 1 - stats.chi2.cdf(chi2, df=len(cold) - 1)
    assert p > 0.01


# ---------------------------------------------------------------------------
# 6. refinement geometry


def test_criterion_6_line_angle_recovery():
    for angle in (-30, -15, -5, 0, 5, 15, 30):
        trace, rect = synthetic_trace(angle)
        fitted = fit_orientation(character_centroids(trace, rect))
        assert abs(fitted - angle) < 1.0, (angle, fitted)


def test_criterion_6_arc_half_angles():
    for angle in (10, 15, 20):
        trace, rect = synthetic_trace(angle, arc=True)
        front, rear = half_angles(trace, rect)
        assert front < 0 < rear
        # independent per-half weighted least squares
        anchors = character_centroids(trace, rect)
        ordered = sorted(anchors, key=lambda a: (a.x, a.step))
        mid = len(ordered) // 2
        for half, reported in zip((ordered[:mid], ordered[mid:]), (front, rear)):
            xs = np.array([a.x for a in half])
            ys = np.array([a.y for a in half])
            ws = np.array([a.confidence for a in half])
            m = np.polyfit(xs, ys, 1, w=np.sqrt(ws))[0]
            assert abs(reported - math.degrees(math.atan(m))) <= 1e-6


# ---------------------------------------------------------------------------
# 7 & 8. desk-scale learnability and ablation orderings


def desk_config(**over):
    cfg = Config()
    presets = {
        "seed": 0,
        "model.feature_dim": 64,
        "model.tdn_hidden": 256,
        "model.tdn_fc": 256,
        "model.trn_hidden": 64,
        "model.attn_dim": 64,
        "train.scales": "256",
        "train.max_side": 512,
        "train.augment": True,
        "train.attn_guide": 2.0,
        "train.attn_guide_sigma": 0.6,
        "train.num_proposals": 64,
        "train.mine_total": 64,
        "train.max_rec_words": 8,
        "train.batch_size": 2,
        "train.iterations": ACCEPT_ITERS,
        "train.decay_every": 1000,
        "train.min_lr": 1e-4,
        "infer.scales": "256",
        "infer.max_side": 512,
        "infer.topk": 100,
        "infer.nms_thr": 0.35,
    }
    presets.update(over)
    for k, v in presets.items():
        cfg.set(k, v)
    return cfg


def random_vocab(seed, n):
    """Long distinct random strings: memorizing whole words is useless, so the
    recognizer must read characters, and the many steps per word give the
    refinement line fit enough points to average out grid quantization."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz0123456789"
    out = set()
    while len(out) < n:
        k = int(rng.integers(6, 10))
        out.add("".join(letters[i] for i in rng.integers(0, 36, size=k)))
    return sorted(out)


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    # val uses a disjoint vocabulary so that validation F strictly measures
    # reading generalization rather than recall of memorized train strings
    root = tmp_path_factory.mktemp("overfit")
    train_m = write_dataset(
        SynthSpec(
            seed=100, rotation_range=(-15, 15), word_count=(2, 3), vocab=random_vocab(3, 60)
        ),
        str(root / "train"),
        25,
    )
    val_m = write_dataset(
        SynthSpec(
            seed=200, rotation_range=(-15, 15), word_count=(2, 3), vocab=random_vocab(7, 60)
        ),
        str(root / "val"),
        25,
    )
    return load_dataset(train_m), load_dataset(val_m)


def run_training(cfg, dataset):
    torch.manual_seed(cfg["seed"])
    model = TextSpotter(cfg)
    trainer = Trainer(model, cfg)
    while trainer.state.iteration < cfg["train.iterations"]:
        trainer.train_step(trainer.next_batch(dataset.samples))
    model.eval()
    return model


def train_recognizer_separately(model, cfg, dataset, iterations):
    """Second stage of the non-joint ablation: recognition head alone on
    ground-truth boxes, detector untouched."""
    from textspot.data import image_to_tensor
    from textspot.region import extract_region

    opt = torch.optim.SGD(model.trn.parameters(), lr=cfg["train.lr"], momentum=0.9)
    rng = np.random.default_rng(cfg["seed"] + 1)
    model.train()
    for _ in range(iterations):
        sample = dataset.samples[int(rng.integers(len(dataset.samples)))]
        img = image_to_tensor(sample.image, torch.float32)
        with torch.no_grad():
            pyramid = model.backbone(img)
        grids, targets, rects = [], [], []
        for word in sample.live_words():
            rect = word.rect().clipped(pyramid.image_w, pyramid.image_h)
            grids.append(extract_region(pyramid, rect, **model.roi_kwargs()).grid.detach())
            targets.append(alphabet.tokenize(word.text))
            rects.append(rect)
        if not grids:
            continue
        guides = [
            attention_guide(sample.image, r, len(t) - 1, g.shape[1], g.shape[2])
            for r, t, g in zip(rects, targets, grids)
        ]
        loss = model.trn.recognition_loss(
            grids,
            targets,
            attn_guide=guides,
            guide_weight=cfg["train.attn_guide"],
            guide_sigma=cfg["train.attn_guide_sigma"],
        ).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def evaluate_model(model, dataset, with_angles=False):
    tp = fp = fn = 0
    angle_errs = []
    for sample in dataset.samples:
        spotted = spot(model, sample.image)
        preds = [
            Prediction(
                coords=sw.shape.vertices, text=sw.text, confidence=sw.textness * sw.rec_score
            )
            for sw in spotted
        ]
        gts = [
            GroundTruth(
                coords=np.array(
                    [
                        [w.bbox[0], w.bbox[1]],
                        [w.bbox[2], w.bbox[1]],
                        [w.bbox[2], w.bbox[3]],
                        [w.bbox[0], w.bbox[3]],
                    ]
                ),
                text=w.text,
                dont_care=w.ignore,
            )
            for w in sample.words
        ]
        res = match_instances(preds, gts)
        tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
        if with_angles:
            for pi, gi in res.matched_pairs:
                sw = spotted[pi]
                if sw.shape.vertices.shape[0] == 4:
                    ang = quad_angle(Quadrangle(sw.shape.vertices))
                    angle_errs.append(abs(ang - (sample.words[gi].true_angle or 0.0)))
    _, _, f = f_measure(tp, fp, fn)
    return f, angle_errs


@pytest.fixture(scope="module")
def joint_model(overfit_data):
    train_ds, _ = overfit_data
    return run_training(desk_config(), train_ds)


def test_criterion_7_overfit(overfit_data, joint_model):
    train_ds, _ = overfit_data
    f, angle_errs = evaluate_model(joint_model, train_ds, with_angles=True)
    if not FULL_BUDGET:
        pytest.skip("reduced budget run; thresholds only apply at the full budget")
    assert f >= 0.90, f
    assert angle_errs, "no matched refined outputs"
    good = np.mean([e < 5.0 for e in angle_errs])
    assert good >= 0.95, (good, sorted(angle_errs)[-5:])


def test_criterion_8_ablation_orderings(overfit_data, joint_model):
    train_ds, val_ds = overfit_data
    f_joint, _ = evaluate_model(joint_model, val_ds)

    separate = run_training(desk_config(**{"train.joint": False}), train_ds)
    train_recognizer_separately(
        separate, desk_config(), train_ds, iterations=max(1, ACCEPT_ITERS // 2)
    )
    f_separate, _ = evaluate_model(separate, val_ds)

    fixed = run_training(
        desk_config(**{"roi.mode": "fixed", "roi.fixed_h": 7, "roi.fixed_w": 7}), train_ds
    )
    f_fixed, _ = evaluate_model(fixed, val_ds)

    if not FULL_BUDGET:
        pytest.skip("reduced budget run; orderings only apply at the full budget")
    assert f_joint >= f_separate, (f_joint, f_separate)
    assert f_joint >= f_fixed, (f_joint, f_fixed)


# ---------------------------------------------------------------------------
# 9. evaluation harness


def test_criterion_9_published_f_measure():
    p, r = 0.6325, 0.5938
    f = 2 * p * r / (p + r)
    assert abs(f * 100 - 61.25) <= 0.01


def test_criterion_9_matching_fixture():
    from textspot.evaluate import Lexicon

    def box(x1, y1, x2, y2):
        return np.array([[x1, y1], [x2, y1], [x2, y2], [x1, y2]], dtype=np.float64)

    lex = Lexicon(["alpha", "bravo", "charlie", "delta"])
    gts = [
        GroundTruth(box(0, 0, 50, 20), "alpha"),
        GroundTruth(box(0, 40, 50, 60), "bravo"),
        GroundTruth(box(0, 80, 50, 100), "charlie"),
        GroundTruth(box(0, 120, 50, 140), "zz"),  # too short: ignored
        GroundTruth(box(0, 160, 50, 180), "delta", dont_care=True),
        GroundTruth(box(60, 0, 110, 20), "alpha"),
    ]
    preds = [
        Prediction(box(0, 0, 50, 20), "alpha", 0.95),  # tp
        Prediction(box(0, 40, 50, 60), "bravp", 0.90),  # lexicon-corrected tp
        Prediction(box(0, 120, 50, 140), "zz", 0.85),  # absorbs into short gt
        Prediction(box(0, 160, 50, 180), "junk", 0.80),  # absorbs into don't-care
        Prediction(box(60, 0, 110, 20), "alpha", 0.75),  # tp
        Prediction(box(61, 0, 111, 20), "alpha", 0.70),  # duplicate: fp
        Prediction(box(200, 200, 250, 220), "echo", 0.65),  # not in lexicon: rejected
        Prediction(box(200, 100, 250, 120), "delta", 0.60),  # no gt: fp
    ]
    res = match_instances(preds, gts, protocol="word_spotting", lexicon=lex)
    assert res.verdicts == ["tp", "tp", "ignored", "ignored", "tp", "fp", "ignored", "fp"]
    assert (res.tp, res.fp, res.fn) == (3, 2, 1)


# ---------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_cli_determinism(tmp_path):
    from textspot.cli import main

    spec = tmp_path / "spec.json"
    spec.write_text(
        '{"image_size": [128, 128], "word_count": [1, 1], "scale_range": [2, 3], "seed": 4}'
    )
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data"), "--n", "3"]) == 0
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(
        "seed=0\nmodel.feature_dim=16\nmodel.tdn_hidden=16\nmodel.tdn_fc=16\n"
        "model.trn_hidden=12\nmodel.attn_dim=8\ntrain.scales=128\ntrain.max_side=256\n"
        "train.augment=false\ntrain.num_proposals=8\ntrain.mine_total=8\n"
        "train.max_rec_words=1\ntrain.batch_size=1\ntrain.iterations=3\n"
        "train.checkpoint_every=3\ninfer.scales=128\ninfer.max_side=256\ninfer.topk=10\n"
        "infer.textness_thr=0.0\ninfer.rec_thr=0.0\n"
    )
    manifest = str(tmp_path / "data" / "manifest.jsonl")
    for name in ("t1", "t2"):
        assert (
            main(["train", "--config", str(cfg), "--manifest", manifest, "--out", str(tmp_path / name)])
            == 0
        )
    assert (tmp_path / "t1" / "loss.csv").read_text() == (tmp_path / "t2" / "loss.csv").read_text()

    for name in ("s1", "s2"):
        assert (
            main(
                [
                    "spot",
                    "--checkpoint",
                    str(tmp_path / "t1" / "final.ckpt"),
                    "--images",
                    str(tmp_path / "data" / "images"),
                    "--out",
                    str(tmp_path / name),
                ]
            )
            == 0
        )
    files = sorted(os.listdir(tmp_path / "s1"))
    assert files == sorted(os.listdir(tmp_path / "s2"))
    for f in files:
        assert (tmp_path / "s1" / f).read_text() == (tmp_path / "s2" / f).read_text()
