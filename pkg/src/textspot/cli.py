"""Command-line surface: synth | train | spot | eval | refine-demo.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .config import Config, ConfigError

VERBOSE = os.environ.get("TEXTSPOT_VERBOSE", "1") != "0"


def _log(msg: str) -> None:
    if VERBOSE:
        print(msg, flush=True)


class DataError(RuntimeError):
    pass


def cmd_synth(args) -> int:
    from .synth import SynthSpec, write_dataset

    if args.spec:
        with open(args.spec) as f:
            spec = SynthSpec.from_dict(json.load(f))
    else:
        spec = SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    manifest = write_dataset(spec, args.out, args.n)
    _log(f"wrote {args.n} samples, manifest at {manifest}")
    return 0


def cmd_train(args) -> int:
    import torch

    from . import checkpoint as ckpt_mod
    from .data import load_dataset
    from .model import TextSpotter
    from .training import NanLossError, Trainer
    from .viz import save_loss_curves

    config = Config.from_file(args.config) if args.config else Config()
    if args.seed is not None:
        config.set("seed", args.seed)
    dataset = load_dataset(args.manifest)
    if len(dataset) == 0:
        raise DataError(f"empty dataset from {args.manifest}")
    os.makedirs(args.out, exist_ok=True)

    if args.resume:
        model, ckpt = ckpt_mod.load_model(args.resume)
        trainer = Trainer(model, model.config)
        trainer.state.iteration = ckpt.iteration
        if ckpt.numpy_rng_state:
            trainer.rng.bit_generator.state = ckpt.numpy_rng_state
        if ckpt.torch_rng_state:
            torch.set_rng_state(torch.frombuffer(bytearray(ckpt.torch_rng_state), dtype=torch.uint8))
        config = model.config
    else:
        torch.manual_seed(config["seed"])
        model = TextSpotter(config)
        trainer = Trainer(model, config)

    fields = ["iteration", "lr", "l_tpn_cls", "l_tpn_reg", "l_det_cls", "l_det_reg", "l_rec", "total"]
    if not config["train.joint"]:
        fields = [f for f in fields if f != "l_rec"]
    csv_path = os.path.join(args.out, "loss.csv")
    mode = "a" if args.resume and os.path.exists(csv_path) else "w"
    with open(csv_path, mode, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        if mode == "w":
            writer.writeheader()
        target = config["train.iterations"]
        try:
            while trainer.state.iteration < target:
                batch = trainer.next_batch(dataset.samples)
                report = trainer.train_step(batch)
                row = dict(trainer.state.loss_rows[-1])
                writer.writerow({k: row[k] for k in fields})
                it = trainer.state.iteration
                if it % 25 == 0 or it == target:
                    _log(f"iter {it}/{target} total={report.total:.4f} rec={report.l_rec:.4f}")
                if it % config["train.checkpoint_every"] == 0 or it == target:
                    ckpt_mod.save(
                        os.path.join(args.out, f"ckpt_{it:06d}.ckpt"), model, it, trainer.rng
                    )
        except NanLossError as e:
            print(f"training aborted: {e}", file=sys.stderr)
            return 3
    ckpt_mod.save(os.path.join(args.out, "final.ckpt"), model, trainer.state.iteration, trainer.rng)
    save_loss_curves(trainer.state.loss_rows, os.path.join(args.out, "loss_curves.png"))
    _log(f"finished at iteration {trainer.state.iteration}; outputs in {args.out}")
    return 0


def cmd_spot(args) -> int:
    import cv2

    from . import checkpoint as ckpt_mod
    from .inference import format_prediction_line, spot
    from .viz import save_attention_heatmaps, save_overlay

    model, _ = ckpt_mod.load_model(args.checkpoint)
    if args.refine_mode:
        model.config.set("refine.mode", args.refine_mode)
    os.makedirs(args.out, exist_ok=True)
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    images = []
    for root, _dirs, files in os.walk(args.images):
        for name in sorted(files):
            if name.lower().endswith(exts):
                images.append(os.path.join(root, name))
    if not images:
        raise DataError(f"no images under {args.images}")
    for path in sorted(images):
        img = cv2.imread(path, cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"cannot read {path}")
        rgb = img[:, :, ::-1].copy()
        spotted = spot(model, rgb)
        rel = os.path.relpath(path, args.images)
        out_path = os.path.join(args.out, os.path.splitext(rel)[0] + ".txt")
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        with open(out_path, "w") as f:
            for sw in spotted:
                f.write(format_prediction_line(sw) + "\n")
        if args.viz:
            base = os.path.splitext(out_path)[0]
            save_overlay(rgb, spotted, base + "_overlay.png")
            save_attention_heatmaps(rgb, spotted, base + "_attention.png")
        _log(f"{rel}: {len(spotted)} words")
    return 0


def _load_eval_inputs(pred_dir: str, manifest: str):
    from .evaluate import GroundTruth, Prediction
    from .inference import parse_prediction_line
    from .synth import read_manifest

    image_preds, image_gts = [], []
    for rec in read_manifest(manifest):
        stem = os.path.splitext(rec["image"])[0]
        pred_path = os.path.join(pred_dir, stem + ".txt")
        preds = []
        if os.path.exists(pred_path):
            with open(pred_path) as f:
                for line in f:
                    if line.strip():
                        coords, text, textness, rec_score = parse_prediction_line(line)
                        preds.append(
                            Prediction(coords=coords, text=text, confidence=textness * rec_score)
                        )
        gts = []
        for wr in rec["words"]:
            b = wr["bbox"]
            gts.append(
                GroundTruth(
                    coords=np.array(
                        [[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]]], dtype=np.float64
                    ),
                    text=wr["text"],
                    dont_care=bool(wr.get("ignore", False)),
                )
            )
        image_preds.append(preds)
        image_gts.append(gts)
    return image_preds, image_gts


def cmd_eval(args) -> int:
    from .evaluate import Lexicon, average_precision, f_measure, match_instances
    from .viz import save_pr_report

    lexicon = None
    if args.lexicon:
        with open(args.lexicon) as f:
            lexicon = Lexicon([w.strip() for w in f if w.strip()], scope=args.lexicon_scope)
    image_preds, image_gts = _load_eval_inputs(args.preds, args.manifest)
    tp = fp = fn = 0
    for preds, gts in zip(image_preds, image_gts):
        res = match_instances(preds, gts, args.geometry, args.protocol, lexicon)
        tp += res.tp
        fp += res.fp
        fn += res.fn
    p, r, f = f_measure(tp, fp, fn)
    ap = average_precision(image_preds, image_gts, args.geometry, args.protocol, lexicon)
    summary = {
        args.protocol: {
            "tp": tp,
            "fp": fp,
            "fn": fn,
            "precision": p,
            "recall": r,
            "f_measure": f,
            "average_precision": ap,
        }
    }
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fj:
        json.dump(summary, fj, indent=2)
    with open(os.path.join(args.out, "report.txt"), "w") as ft:
        ft.write(
            f"protocol={args.protocol} geometry={args.geometry}\n"
            f"tp={tp} fp={fp} fn={fn}\n"
            f"precision={p:.4f} recall={r:.4f} f_measure={f:.4f} ap={ap:.4f}\n"
        )
    save_pr_report(summary, os.path.join(args.out, "report.png"))
    _log(
        f"{args.protocol}: P={p:.4f} R={r:.4f} F={f:.4f} AP={ap:.4f} (tp={tp} fp={fp} fn={fn})"
    )
    return 0


def cmd_refine_demo(args) -> int:
    from .refine import (
        character_centroids,
        fit_orientation,
        half_angles,
        synthetic_trace,
    )

    angles = [float(a) for a in args.angles.split(",") if a.strip()]
    for angle in angles:
        trace, rect = synthetic_trace(angle, n_steps=args.steps, arc=args.arc)
        if args.arc:
            front, rear = half_angles(trace, rect)
            print(f"target={angle:+.2f}  front={front:+.4f}  rear={rear:+.4f}")
        else:
            fitted = fit_orientation(character_centroids(trace, rect))
            print(f"target={angle:+.2f}  fitted={fitted:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textspot", description="Scene text spotting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON spec file (defaults are used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("spot", help="run inference on a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", action="store_true")
    p.add_argument("--refine-mode", choices=["off", "quad", "poly6"])
    p.set_defaults(func=cmd_spot)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--preds", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=["end_to_end", "word_spotting"], default="end_to_end")
    p.add_argument("--geometry", choices=["rect", "quad", "polygon"], default="rect")
    p.add_argument("--lexicon", help="text file, one word per line")
    p.add_argument("--lexicon-scope", choices=["strong", "weak", "generic"], default="strong")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine-demo", help="fit angles on synthetic attention grids")
    p.add_argument("--angles", default="-30,-15,-5,0,5,15,30")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--arc", action="store_true")
    p.set_defaults(func=cmd_refine_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
