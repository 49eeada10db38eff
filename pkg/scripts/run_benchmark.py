"""Synthetic end-to-end benchmark: the 2D-LSTM detector against its no-LSTM ablation.

The 2D-LSTM model trains for as many whole epochs as fit in the wall-clock
budget; the ablation then trains for the same number of epochs with the same
pages, seed and optimizer settings. The confidence threshold and the kept
checkpoint are chosen on a separate validation split, and F-measures are
reported on the test split. Scores after non-maximum suppression are recorded
as a supplementary figure only.

    python scripts/run_benchmark.py            # about three hours on one core
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from mdlstm_det.data import SynthSpec, generate_dataset, width_normalize
from mdlstm_det.detector import build_model, default_config_path, load_config, load_model
from mdlstm_det.metrics import nms
from mdlstm_det.trainer import TrainConfig, evaluate_predictions, new_state, predict, train

log = logging.getLogger("benchmark")
ROOT = Path(__file__).resolve().parents[1]


def make_split(n: int, seed: int, width: int):
    pages = generate_dataset(SynthSpec(), n, seed=seed)
    for p in pages:
        p.image = width_normalize(p.image, width)
    return pages


def train_within_budget(state, train_set, val_set, cfg: TrainConfig, out_dir: Path,
                        budget: float, max_epochs: int) -> float:
    """Run whole epochs until the next one would likely overrun ``budget`` seconds."""
    start = time.perf_counter()
    longest = 0.0
    while state.epoch < max_epochs:
        t0 = time.perf_counter()
        cfg.epochs = state.epoch + 1
        train(state, train_set, val_set, cfg, out_dir=out_dir)
        longest = max(longest, time.perf_counter() - t0)
        rec = state.history[-1]
        log.info("  epoch %3d  loss %9.3f  val F %.3f (P %.3f R %.3f, t=%g)  %5.0fs", rec["epoch"],
                 rec["train_loss"], rec["f_measure"], rec["precision"], rec["recall"],
                 rec["threshold"], time.perf_counter() - start)
        if time.perf_counter() - start + longest > budget:
            break
    return time.perf_counter() - start


def score(preds, threshold: float, test_set) -> dict:
    out = {}
    for iou in (0.3, 0.5, 0.7):
        rep = evaluate_predictions(preds, test_set, iou, threshold)
        out[f"iou_{iou}"] = {"precision": rep.precision, "recall": rep.recall, "f_measure": rep.f_measure}
    return out


def suppressed(d, threshold: float, overlap: float = 0.5):
    """Predictions above ``threshold`` after non-maximum suppression."""
    idx = np.flatnonzero(d.confidence >= threshold)
    idx = idx[nms(d.boxes[idx], d.confidence[idx], overlap)]
    return type(d)(d.boxes[idx], d.confidence[idx], d.sig[idx], d.logits[idx], d.grid, d.geometry)


def run_variant(name: str, config, args, train_set, val_set, test_set, budget: float,
                max_epochs: int) -> dict:
    out_dir = Path(args.out) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.log", "best.model", "best.json", "last.ckpt"):
        (out_dir / stale).unlink(missing_ok=True)
    model = build_model(config, np.random.Generator(np.random.PCG64(args.seed)),
                        init_scale=args.init_scale, forget_bias=args.forget_bias,
                        confidence_prior=args.confidence_prior, init=args.init)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, dropout=args.dropout, seed=args.seed,
                      clip_norm=args.clip_norm)
    state = new_state(model, args.seed)
    log.info("%s: %d parameters", name, model.parameter_count)
    seconds = train_within_budget(state, train_set, val_set, cfg, out_dir, budget, max_epochs)
    best = json.loads((out_dir / "best.json").read_text())
    t = best["threshold"]
    preds = [predict(load_model(out_dir / "best.model"), s.image) for s in test_set]
    return {"parameters": model.parameter_count, "epochs": state.epoch, "train_seconds": seconds,
            "best_epoch": best["epoch"], "threshold": t, "val_f_measure": best["f_measure"],
            "test": score(preds, t, test_set),
            "test_nms_0.5": score([suppressed(d, t) for d in preds], t, test_set),
            "history": state.history}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bench", help="directory for logs and models")
    ap.add_argument("--arch", default=str(default_config_path("bench")))
    ap.add_argument("--train-pages", type=int, default=200)
    ap.add_argument("--val-pages", type=int, default=25)
    ap.add_argument("--test-pages", type=int, default=50)
    ap.add_argument("--width", type=int, default=240)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=1)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--clip-norm", type=float, default=100.0)
    ap.add_argument("--init", choices=("uniform", "fan_in"), default="fan_in")
    ap.add_argument("--init-scale", type=float, default=1.0)
    ap.add_argument("--forget-bias", type=float, default=0.0)
    ap.add_argument("--confidence-prior", type=float, default=0.02)
    ap.add_argument("--budget", type=float, default=7200.0, help="wall-clock seconds for the 2D-LSTM model")
    ap.add_argument("--max-epochs", type=int, default=1000)
    ap.add_argument("--variants", default="lstm,nolstm")
    ap.add_argument("--results", default=str(ROOT / "results" / "benchmark.json"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("mdlstm_det").setLevel(logging.WARNING)

    # train, validation and test pages come from disjoint generator seeds
    train_set = make_split(args.train_pages, args.seed, args.width)
    val_set = make_split(args.val_pages, args.seed + 1, args.width)
    test_set = make_split(args.test_pages, args.seed + 2, args.width)
    lines = [len(p.targets) for p in train_set + test_set]
    log.info("pages: %d train, %d val, %d test; lines per page %d..%d",
             len(train_set), len(val_set), len(test_set), min(lines), max(lines))

    config = load_config(args.arch)
    variants = {"lstm": config, "nolstm": config.without_lstm()}
    results = {"settings": vars(args), "machine": platform.platform(), "processor": platform.processor(),
               "models": {}}
    path = Path(args.results)
    path.parent.mkdir(parents=True, exist_ok=True)
    budget, max_epochs = args.budget, args.max_epochs
    for name in args.variants.split(","):
        r = run_variant(name, variants[name], args, train_set, val_set, test_set, budget, max_epochs)
        results["models"][name] = r
        path.write_text(json.dumps(results, indent=1))
        # the variants after the first get exactly its epoch count, without a time limit
        budget, max_epochs = float("inf"), r["epochs"]

    print(f"{'model':<8} {'params':>7} {'epochs':>6} {'minutes':>7}  F@0.3   F@0.5   F@0.7")
    for name, r in results["models"].items():
        f = [r["test"][f"iou_{t}"]["f_measure"] for t in (0.3, 0.5, 0.7)]
        g = r["test_nms_0.5"]["iou_0.5"]["f_measure"]
        print(f"{name:<8} {r['parameters']:>7} {r['epochs']:>6} {r['train_seconds'] / 60:>7.1f}  "
              + "  ".join(f"{v:.3f}" for v in f) + f"   (F@0.5 after NMS {g:.3f})")
    print(f"results written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
