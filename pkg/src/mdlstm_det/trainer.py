"""SGD training with per-image global matching.

Per image: forward in training mode, decode, match predictors to targets with
``alpha_match``, evaluate the matched loss with ``alpha_loss``, backprop.
Image losses are summed per image and averaged over the minibatch.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import PageSample
from .detector import (Decoded, NetworkModel, backward, decode_outputs, deserialize,
                       encode_output_grads, forward, output_grid, serialize)
from .matching import MatchResult, TooManyTargets, match_hungarian
from .metrics import EvalReport, iou_fmeasure
from .tensor import make_rng, rng_from_state, rng_state, sgd_step

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MDLDCKPT"
CKPT_VERSION = 1
# dense near zero: with many predictors per object the matched confidences stay small early on
CONF_THRESHOLDS = (0.001, 0.002, 0.005, 0.01, 0.02) + tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    dropout: float = 0.5
    alpha_match: float = 1000.0
    alpha_loss: float = 100.0
    epochs: int = 10
    seed: int = 42
    checkpoint_interval: int = 1
    deterministic: bool = False
    select_iou: float = 0.5
    clip_norm: Optional[float] = None  # rescale the batch gradient to at most this L2 norm

    def validate(self) -> None:
        if self.lr < 0 or self.batch_size < 1 or self.alpha_match <= 0 or self.alpha_loss <= 0:
            raise ValueError("learning rate, batch size and alphas must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.epochs < 0 or self.checkpoint_interval < 1:
            raise ValueError("epochs must be >= 0 and checkpoint_interval >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


class TrainingDiverged(FloatingPointError):
    """Raised when a step produces a non-finite loss or gradient."""


@dataclass
class TrainState:
    model: NetworkModel
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    losses: list = field(default_factory=list)  # mean train loss per finished epoch
    best_f: float = -1.0
    best_threshold: float = 0.5
    history: list = field(default_factory=list)  # per-epoch log records


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-_softplus(-a))


def loss_and_output_grads(decoded: Decoded, targets: np.ndarray, match: MatchResult,
                          alpha_loss: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Matched loss and its gradients w.r.t. decoded boxes and confidence logits.

    ``-log c`` and ``-log(1 - c)`` are evaluated as softplus of the logit, which
    stays finite however saturated the confidence is.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    a = decoded.logits
    m_count = len(a)
    matched = np.zeros(m_count, dtype=bool)
    grad_boxes = np.zeros((m_count, 4))
    loss_parts = []
    if match.pairs:
        n_idx = np.array([n for n, _ in match.pairs])
        m_idx = np.array([m for _, m in match.pairs])
        matched[m_idx] = True
        diff = decoded.boxes[m_idx] - targets[n_idx]
        loss_parts.append(alpha_loss * np.sum(diff * diff, axis=1))
        loss_parts.append(_softplus(-a[m_idx]))
        grad_boxes[m_idx] = 2 * alpha_loss * diff
    loss_parts.append(_softplus(a[~matched]))
    loss = math.fsum(float(v) for part in loss_parts for v in part)
    c = _sigmoid(a)
    grad_logits = np.where(matched, c - 1.0, c)
    return loss, grad_boxes, grad_logits


def image_loss_and_grads(model: NetworkModel, image: np.ndarray, targets: np.ndarray,
                         cfg: TrainConfig, rng: Optional[np.random.Generator],
                         training: bool = True,
                         frozen_match: Optional[MatchResult] = None):
    """Returns ``(loss, param_grads, match)``; raises TooManyTargets when N > M."""
    raw, caches = forward(model, image, training=training, rng=rng, dropout_p=cfg.dropout,
                          deterministic=cfg.deterministic)
    decoded = decode_outputs(raw, model.geometry(image.shape[1:]))
    match = frozen_match or match_hungarian(decoded.boxes, decoded.confidence, targets, cfg.alpha_match)
    loss, g_boxes, g_logits = loss_and_output_grads(decoded, targets, match, cfg.alpha_loss)
    grad_raw = encode_output_grads(decoded, g_boxes, g_logits)
    return loss, backward(model, caches, grad_raw), match


def image_loss(model: NetworkModel, image: np.ndarray, targets: np.ndarray, match: MatchResult,
               alpha_loss: float) -> float:
    raw, _ = forward(model, image)
    decoded = decode_outputs(raw, model.geometry(image.shape[1:]))
    return loss_and_output_grads(decoded, targets, match, alpha_loss)[0]


def train_step(state: TrainState, batch: Sequence[PageSample], cfg: TrainConfig) -> list[float]:
    """One SGD update over ``batch``; returns per-image losses (NaN for skipped images)."""
    model = state.model
    params = model.parameters()
    total = [np.zeros_like(p) for p in params]
    losses, used = [], 0
    for sample in batch:
        try:
            loss, grads, _ = image_loss_and_grads(model, sample.image, sample.targets, cfg, state.rng)
        except TooManyTargets as exc:
            log.warning("skipping %s: %s", sample.name or "image", exc)
            losses.append(float("nan"))
            continue
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at step {state.step} "
                                   f"on {sample.name or 'image'}; lower the learning rate")
        for acc, g in zip(total, grads):
            acc += g
        losses.append(loss)
        used += 1
    if used:
        scale = 1.0 / used
        if cfg.clip_norm is not None:
            norm = scale * math.sqrt(math.fsum(float(np.dot(g.ravel(), g.ravel())) for g in total))
            if norm > cfg.clip_norm:
                scale *= cfg.clip_norm / norm
        sgd_step(params, [g * g.dtype.type(scale) for g in total], cfg.lr)
    state.step += 1
    return losses


def predict(model: NetworkModel, image: np.ndarray, deterministic: bool = False) -> Decoded:
    raw, _ = forward(model, image, training=False, deterministic=deterministic)
    return decode_outputs(raw, model.geometry(image.shape[1:]))


def evaluate_predictions(preds: Sequence[Decoded], samples: Sequence[PageSample],
                         iou_threshold: float, conf_threshold: float) -> EvalReport:
    report = EvalReport(thresholds={"iou_threshold": iou_threshold, "conf_threshold": conf_threshold})
    for d, s in zip(preds, samples):
        report = report + iou_fmeasure(d.boxes, d.confidence, s.targets, iou_threshold, conf_threshold)
    return report


def select_threshold(preds: Sequence[Decoded], samples: Sequence[PageSample],
                     iou_threshold: float = 0.5,
                     grid: Sequence[float] = CONF_THRESHOLDS) -> tuple[float, EvalReport]:
    """Confidence threshold with the best F-measure (lowest threshold on ties)."""
    best_t, best = grid[0], None
    for t in grid:
        rep = evaluate_predictions(preds, samples, iou_threshold, t)
        if best is None or rep.f_measure > best.f_measure:
            best_t, best = t, rep
    return best_t, best


def check_admissible(model: NetworkModel, samples: Sequence[PageSample]) -> None:
    for s in samples:
        output_grid(model.config, s.image.shape[1], s.image.shape[2])


def train(state: TrainState, train_set: Sequence[PageSample], val_set: Sequence[PageSample],
          cfg: TrainConfig, out_dir=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Epoch loop with seeded shuffling, validation and checkpointing.

    Validation runs once before the first epoch when nothing has been trained
    yet, then after every epoch. With ``out_dir`` set, writes ``metrics.log``,
    ``last.ckpt`` and ``best.model``.
    """
    cfg.validate()
    if not train_set:
        raise ValueError("training set is empty")
    check_admissible(state.model, train_set)
    check_admissible(state.model, val_set)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def validate_and_log(train_loss: float) -> None:
        preds = [predict(state.model, s.image, cfg.deterministic) for s in val_set]
        thr, rep = select_threshold(preds, val_set, cfg.select_iou)
        record = {"epoch": state.epoch, "train_loss": train_loss, "threshold": thr,
                  "precision": rep.precision, "recall": rep.recall, "f_measure": rep.f_measure}
        state.history.append(record)
        line = (f"epoch={state.epoch} train_loss={train_loss!r} threshold={thr!r} "
                f"precision={rep.precision!r} recall={rep.recall!r} f_measure={rep.f_measure!r}")
        log.info(line)
        improved = rep.f_measure > state.best_f
        if improved:
            state.best_f, state.best_threshold = rep.f_measure, thr
        if out is not None:
            with open(out / "metrics.log", "a", encoding="utf-8") as f:
                f.write(line + "\n")
            if improved:
                (out / "best.model").write_bytes(serialize(state.model))
                (out / "best.json").write_text(json.dumps({"epoch": state.epoch, "threshold": thr,
                                                           "f_measure": rep.f_measure}))
        if on_epoch is not None:
            on_epoch(record)

    if state.epoch == 0 and not state.history:
        validate_and_log(float("nan"))
        if out is not None:
            save_checkpoint(out / "last.ckpt", state, cfg)

    while state.epoch < cfg.epochs:
        order = state.rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[k] for k in order[start:start + cfg.batch_size]]
            losses += train_step(state, batch, cfg)
        finite = [v for v in losses if not math.isnan(v)]
        mean_loss = math.fsum(finite) / len(finite) if finite else float("nan")
        state.losses.append(mean_loss)
        state.epoch += 1
        validate_and_log(mean_loss)
        if out is not None and (state.epoch % cfg.checkpoint_interval == 0 or state.epoch == cfg.epochs):
            save_checkpoint(out / "last.ckpt", state, cfg)
    return state


def new_state(model: NetworkModel, seed: int) -> TrainState:
    return TrainState(model, make_rng(seed))


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    meta = {"step": state.step, "epoch": state.epoch, "losses": state.losses,
            "best_f": state.best_f, "best_threshold": state.best_threshold,
            "history": state.history, "rng": rng_state(state.rng), "train_config": asdict(cfg)}
    blob = json.dumps(meta).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(serialize(state.model))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    data = Path(path).read_bytes()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at byte 0)")
    pos = len(CKPT_MAGIC)
    version, n = struct.unpack_from("<II", data, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos:pos + n].decode("utf-8"))
    model = deserialize(data[pos + n:])
    state = TrainState(model, rng_from_state(meta["rng"]), meta["step"], meta["epoch"],
                       meta["losses"], meta["best_f"], meta["best_threshold"], meta["history"])
    return state, TrainConfig(**meta["train_config"])


# --- gradient check ------------------------------------------------------------------

def frozen_matching_gradcheck(model: NetworkModel, image: np.ndarray, targets: np.ndarray,
                              alpha_match: float = 1000.0, alpha_loss: float = 100.0,
                              n_coords: int = 240, eps: float = 1e-5, seed: int = 0,
                              floor: float = 1e-6) -> dict:
    """Backprop vs central differences of the matched loss, matching held fixed.

    Coordinates are drawn from every parameter array so each conv, each LSTM
    direction and the head are covered. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    model = model.astype(np.float64)
    image = image.astype(np.float64)
    cfg = TrainConfig(alpha_match=alpha_match, alpha_loss=alpha_loss, dropout=0.0)
    loss0, grads, match = image_loss_and_grads(model, image, targets, cfg, None, training=False)
    rng = make_rng(seed)
    params = model.parameters()
    per_array = max(1, -(-n_coords // len(params)))
    worst, count, records = 0.0, 0, []
    for k, (p, g) in enumerate(zip(params, grads)):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        picks = rng.choice(flat_p.size, size=min(per_array, flat_p.size), replace=False)
        for idx in picks:
            old = flat_p[idx]
            flat_p[idx] = old + eps
            up = image_loss(model, image, targets, match, alpha_loss)
            flat_p[idx] = old - eps
            down = image_loss(model, image, targets, match, alpha_loss)
            flat_p[idx] = old
            num = (up - down) / (2 * eps)
            ana = float(flat_g[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            records.append((k, int(idx), ana, num, rel))
            count += 1
    loss_again = image_loss(model, image, targets, match, alpha_loss)
    return {"max_rel_error": worst, "n_coords": count, "loss": loss0,
            "loss_recomputed": loss_again, "records": records}
