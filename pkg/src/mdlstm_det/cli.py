"""Command line: synth, train, eval, detect, gradcheck, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import base64
import io
import json
import logging
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .data import SynthSpec, load_image, load_synth_spec, read_dataset, width_normalize, write_dataset, generate_dataset
from .detector import (ConvSpec, DropoutSpec, MdLstmSpec, build_model, default_config_path,
                       feature_map_sizes, load_config, load_model, minimal_input_size, output_grid,
                       parameter_counts)
from .metrics import deteval, format_kv, format_table, iou_fmeasure, nms, EvalReport
from .trainer import (CKPT_MAGIC, TrainConfig, frozen_matching_gradcheck, load_checkpoint, new_state,
                      predict, train)

log = logging.getLogger("mdlstm_det")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _size(text: str) -> tuple[int, int]:
    """``WxH`` -> (height, width)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _load_any_model(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(CKPT_MAGIC))
    if head == CKPT_MAGIC:
        return load_checkpoint(path)[0].model
    return load_model(path)


def _default_threshold(model_path, given):
    if given is not None:
        return given
    meta = Path(model_path).with_name("best.json")
    if meta.exists():
        return float(json.loads(meta.read_text())["threshold"])
    return 0.5


def _prepare(image: np.ndarray, width: int) -> np.ndarray:
    return width_normalize(image, width) if width else image


def _load_samples(directory, width: int):
    samples = list(read_dataset(directory))
    for s in samples:
        s.image = _prepare(s.image, width)
    return samples


# --- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    spec.validate()
    pages = generate_dataset(spec, args.count, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out, pages)
    print(f"wrote {len(pages)} pages to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, dropout=args.dropout,
                      alpha_match=args.alpha_match, alpha_loss=args.alpha_loss, epochs=args.epochs,
                      seed=args.seed, checkpoint_interval=args.checkpoint_interval,
                      deterministic=args.deterministic, clip_norm=args.clip_norm)
    cfg.validate()
    train_set = _load_samples(args.train, args.width)
    val_set = _load_samples(args.val, args.width) if args.val else train_set
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        saved.epochs = args.epochs
        cfg = saved
    else:
        config = load_config(args.arch)
        dtype = np.float64 if args.float64 else np.float32
        model = build_model(config, np.random.Generator(np.random.PCG64(cfg.seed)),
                            init_scale=args.init_scale, dtype=dtype,
                            forget_bias=args.forget_bias, confidence_prior=args.confidence_prior,
                            init=args.init)
        state = new_state(model, cfg.seed)
    train(state, train_set, val_set, cfg, out_dir=args.out)
    print(f"best validation f-measure {state.best_f:.4f} at threshold {state.best_threshold}")
    return 0


def _eval_rows(args, model, samples):
    preds = [predict(model, s.image, args.deterministic) for s in samples]
    conf_t = _default_threshold(args.model, args.conf_threshold)
    kept = []
    for d in preds:
        idx = np.flatnonzero(d.confidence >= conf_t)
        if args.nms is not None:
            idx = idx[nms(d.boxes[idx], d.confidence[idx], args.nms)]
        kept.append((d.boxes[idx], d.confidence[idx]))
    rows = []
    if args.metric == "deteval":
        rep = EvalReport(thresholds={"t_r": args.t_r, "t_p": args.t_p, "fragmentation": args.fragmentation,
                                     "conf_threshold": conf_t})
        for (boxes, _), s in zip(kept, samples):
            r = deteval(boxes, s.targets, args.t_r, args.t_p, args.fragmentation)
            rep = rep + EvalReport(r.n_refs, r.n_hyps, r.recall_sum, r.precision_sum)
        rows.append(("deteval", rep))
    else:
        for t in args.iou_thresholds:
            rep = EvalReport(thresholds={"iou_threshold": t, "conf_threshold": conf_t})
            for (boxes, conf), s in zip(kept, samples):
                rep = rep + iou_fmeasure(boxes, conf, s.targets, t, 0.0)
            rows.append((f"iou@{t:g}", rep))
    return rows


def cmd_eval(args) -> int:
    model = _load_any_model(args.model)
    samples = _load_samples(args.data, args.width)
    if not samples:
        raise ValueError(f"no samples found in {args.data}")
    rows = _eval_rows(args, model, samples)
    print(format_table(rows))
    out = Path(args.out) if args.out else Path(args.model).with_suffix(".eval.txt")
    out.write_text(format_kv(rows))
    return 0


def _png_data_uri(image: np.ndarray) -> str:
    from PIL import Image
    q = np.round(np.clip(image[0], 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, "L").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def detection_svg(image: np.ndarray, boxes: np.ndarray, confidence: np.ndarray) -> str:
    """Page raster with one rectangle per box; stroke opacity equals confidence."""
    h, w = image.shape[1:]
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(w), height=str(h),
                     viewBox=f"0 0 {w} {h}")
    ET.SubElement(svg, "image", href=_png_data_uri(image), x="0", y="0", width=str(w), height=str(h))
    for (x, y, bw, bh), c in zip(boxes, confidence):
        ET.SubElement(svg, "rect", x=f"{x * w:.3f}", y=f"{y * h:.3f}", width=f"{bw * w:.3f}",
                      height=f"{bh * h:.3f}", fill="none", stroke="red", **{"stroke-width": "1",
                                                                           "stroke-opacity": f"{c:.6f}"})
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode") + "\n"


def cmd_detect(args) -> int:
    model = _load_any_model(args.model)
    original = load_image(args.image)
    image = _prepare(original, args.width)
    d = predict(model, image, args.deterministic)
    t = _default_threshold(args.model, args.conf_threshold)
    idx = np.flatnonzero(d.confidence >= t)
    if args.nms is not None:
        idx = idx[nms(d.boxes[idx], d.confidence[idx], args.nms)]
    # coordinates are page-normalized, so the overlay uses the original raster
    Path(args.out).write_text(detection_svg(original, d.boxes[idx], d.confidence[idx]), encoding="utf-8")
    for m in idx:
        x, y, bw, bh = d.boxes[m]
        i, j, k = d.site(m)
        print(f"{x:.6f} {y:.6f} {bw:.6f} {bh:.6f} {d.confidence[m]:.6f} site={i},{j},{k}")
    print(f"{len(idx)} boxes written to {args.out}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.arch)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    model = build_model(config, rng, init_scale=args.init_scale, dtype=np.float64)
    h, w = args.size or config.reference_size
    image = rng.random((config.input_channels, h, w))
    xy = rng.uniform(0.0, 0.6, (args.targets, 2))
    targets = np.hstack([xy, rng.uniform(0.05, 0.4, (args.targets, 2))])
    res = frozen_matching_gradcheck(model, image, targets, n_coords=args.coords, seed=args.seed)
    print(f"coordinates checked: {res['n_coords']}")
    print(f"max relative error: {res['max_rel_error']:.3e}")
    ok = res["max_rel_error"] < args.tolerance
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def layer_table(config, height: int, width: int) -> str:
    """Per-layer filter, stride, map size and parameter count, sizes written W x H."""
    sizes = feature_map_sizes(config, height, width)
    counts = parameter_counts(config)
    lines = [f"input {width}x{height} (W x H)",
             f"{'layer':<6} {'type':<8} {'filter':>7} {'stride':>7} {'channels':>8} {'map':>9} {'params':>8}"]
    conv_no = lstm_no = 0
    for spec, (c, h, w), n in zip(config.layers, sizes, counts):
        if isinstance(spec, ConvSpec):
            conv_no += 1
            name, filt, stride = f"C{conv_no}", f"{spec.kernel_w}x{spec.kernel_h}", f"{spec.stride_x}x{spec.stride_y}"
        elif isinstance(spec, MdLstmSpec):
            lstm_no += 1
            name, filt, stride = f"L{lstm_no}", "-", "-"
        else:
            name, filt, stride = "D", "-", "-"
        kind = spec.kind if not isinstance(spec, DropoutSpec) else "dropout"
        lines.append(f"{name:<6} {kind:<8} {filt:>7} {stride:>7} {c:>8} {f'{w}x{h}':>9} {n:>8}")
    lines.append(f"total parameters: {sum(counts)}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if args.model:
        config = _load_any_model(args.model).config
    else:
        config = load_config(args.arch or default_config_path("reference"))
    h, w = args.size or config.reference_size
    print(layer_table(config, h, w))
    mh, mw = minimal_input_size(config)
    print(f"minimal input: {mw}x{mh} (W x H)")
    try:
        rows, cols = output_grid(config, h, w)
        print(f"predictions: {cols}x{rows} sites x {config.predictors} = {rows * cols * config.predictors}")
    except ValueError as exc:
        print(f"warning: {exc}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="fixed-order recurrent kernels for bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mdlstm-det", parents=[common],
                                description="2D-LSTM fully-convolutional object detector")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic page dataset")
    s.add_argument("--spec", help="INI file with a [synth] section (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    d = TrainConfig()
    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--arch", required=True, help="architecture INI file")
    t.add_argument("--train", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--dropout", type=float, default=d.dropout)
    t.add_argument("--alpha-match", type=float, default=d.alpha_match)
    t.add_argument("--alpha-loss", type=float, default=d.alpha_loss)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--checkpoint-interval", type=int, default=d.checkpoint_interval)
    t.add_argument("--init-scale", type=float, default=0.08)
    t.add_argument("--init", choices=("uniform", "fan_in"), default="uniform",
                   help="uniform: bound --init-scale; fan_in: bound --init-scale * sqrt(3 / fan_in)")
    t.add_argument("--clip-norm", type=float, help="cap on the L2 norm of each minibatch gradient")
    t.add_argument("--forget-bias", type=float, default=1.0, help="initial LSTM forget-gate bias")
    t.add_argument("--confidence-prior", type=float,
                   help="initial confidence of every predictor (default: head bias 0, i.e. 0.5)")
    t.add_argument("--width", type=int, default=598, help="normalized page width, 0 keeps the input size")
    t.add_argument("--float64", action="store_true", help="64-bit parameters")
    t.add_argument("--resume", help="continue from a checkpoint, up to --epochs in total")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=["iou", "deteval"], default="iou")
    e.add_argument("--iou-thresholds", type=_float_list, default=[0.3, 0.5, 0.7])
    e.add_argument("--conf-threshold", type=float,
                   help="default: the threshold in best.json next to the model, else 0.5")
    e.add_argument("--nms", type=float, help="apply non-maximum suppression at this IoU")
    e.add_argument("--t-r", type=float, default=0.8)
    e.add_argument("--t-p", type=float, default=0.4)
    e.add_argument("--fragmentation", type=float, default=0.8)
    e.add_argument("--width", type=int, default=598)
    e.add_argument("--out", help="key=value results file (default: <model>.eval.txt)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("detect", parents=[common], help="detect boxes and draw an SVG overlay")
    x.add_argument("--model", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--conf-threshold", type=float)
    x.add_argument("--nms", type=float)
    x.add_argument("--width", type=int, default=598)
    x.set_defaults(func=cmd_detect)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--arch", default=str(default_config_path("tiny")))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=240)
    g.add_argument("--targets", type=int, default=2)
    g.add_argument("--init-scale", type=float, default=0.5)
    g.add_argument("--size", type=_size, help="input WIDTHxHEIGHT (default: reference size)")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", parents=[common], help="per-layer sizes and parameter counts")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--arch")
    src.add_argument("--model")
    i.add_argument("--size", type=_size, help="input WIDTHxHEIGHT (default: reference size)")
    i.set_defaults(func=cmd_inspect)
    return p


def _validate(args) -> None:
    if getattr(args, "count", 0) < 0:
        raise UsageError("--count must be >= 0")
    if getattr(args, "width", 0) < 0:
        raise UsageError("--width must be >= 0")
    if args.command == "eval" and any(not 0 <= t <= 1 for t in args.iou_thresholds):
        raise UsageError("IoU thresholds must lie in [0, 1]")
    if getattr(args, "clip_norm", None) is not None and not args.clip_norm > 0:
        raise UsageError("--clip-norm must be positive")
    prior = getattr(args, "confidence_prior", None)
    if prior is not None and not 0 < prior < 1:
        raise UsageError("--confidence-prior must lie in (0, 1)")
    for name in ("conf_threshold", "nms"):
        v = getattr(args, name, None)
        if v is not None and not 0 <= v <= 1:
            raise UsageError(f"--{name.replace('_', '-')} must lie in [0, 1]")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        _validate(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
