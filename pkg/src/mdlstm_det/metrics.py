"""Detection quality: IoU, IoU-thresholded F-measure, DetEval.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner differences, so iou(a, a) is exactly 1
    union = ((ax + aw) - ax) * ((ay + ah) - ay) + ((bx + bw) - bx) * ((by + bh) - by) - inter
    return float(inter / union) if union > 0 else 0.0


def intersection_matrix(refs: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 4)
    x0 = np.maximum(refs[:, None, 0], hyps[None, :, 0])
    y0 = np.maximum(refs[:, None, 1], hyps[None, :, 1])
    x1 = np.minimum(refs[:, None, 0] + refs[:, None, 2], hyps[None, :, 0] + hyps[None, :, 2])
    y1 = np.minimum(refs[:, None, 1] + refs[:, None, 3], hyps[None, :, 1] + hyps[None, :, 3])
    return np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)


def _area(b: np.ndarray) -> np.ndarray:
    return ((b[:, 0] + b[:, 2]) - b[:, 0]) * ((b[:, 1] + b[:, 3]) - b[:, 1])


def iou_matrix(refs: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 4)
    inter = intersection_matrix(refs, hyps)
    union = _area(refs)[:, None] + _area(hyps)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class EvalReport:
    """Precision/recall from score-weighted match counts.

    For the IoU metric the sums are plain match counts; DetEval adds
    fractional scores for split and merged objects.
    """
    n_refs: int = 0
    n_hyps: int = 0
    recall_sum: float = 0.0
    precision_sum: float = 0.0
    thresholds: dict = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.precision_sum / self.n_hyps if self.n_hyps else 0.0

    @property
    def recall(self) -> float:
        return self.recall_sum / self.n_refs if self.n_refs else 0.0

    @property
    def f_measure(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def matched(self) -> float:
        return self.recall_sum

    @property
    def insertions(self) -> float:
        return self.n_hyps - self.precision_sum

    @property
    def deletions(self) -> float:
        return self.n_refs - self.recall_sum

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.n_refs + other.n_refs, self.n_hyps + other.n_hyps,
                          self.recall_sum + other.recall_sum,
                          self.precision_sum + other.precision_sum,
                          dict(self.thresholds or other.thresholds))

    def as_dict(self) -> dict:
        return {**self.thresholds,
                "precision": self.precision, "recall": self.recall, "f_measure": self.f_measure,
                "matched": self.matched, "insertions": self.insertions, "deletions": self.deletions,
                "n_refs": self.n_refs, "n_hyps": self.n_hyps}


def nms(boxes: np.ndarray, confidence: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Indices kept by greedy non-maximum suppression, highest confidence first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(confidence), kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    keep, suppressed = [], np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return np.array(sorted(keep), dtype=np.int64)


def iou_fmeasure(hyps: np.ndarray, confidence, refs: np.ndarray, iou_threshold: float = 0.5,
                 conf_threshold: float = 0.0) -> EvalReport:
    """One-to-one greedy matching in descending IoU order, pairs below the threshold rejected."""
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 4)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    if confidence is not None:
        hyps = hyps[np.asarray(confidence) >= conf_threshold]
    thresholds = {"iou_threshold": iou_threshold, "conf_threshold": conf_threshold}
    if len(hyps) == 0 or len(refs) == 0:
        return EvalReport(len(refs), len(hyps), 0, 0, thresholds)
    m = iou_matrix(refs, hyps)
    ri, hi = np.nonzero(m >= iou_threshold)
    order = np.lexsort((hi, ri, -m[ri, hi]))
    ref_used = np.zeros(len(refs), dtype=bool)
    hyp_used = np.zeros(len(hyps), dtype=bool)
    matched = 0
    for k in order:
        r, h = ri[k], hi[k]
        if not ref_used[r] and not hyp_used[h]:
            ref_used[r] = hyp_used[h] = True
            matched += 1
    return EvalReport(len(refs), len(hyps), matched, matched, thresholds)


def _drop_degenerate(boxes: np.ndarray, what: str) -> np.ndarray:
    ok = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    if not ok.all():
        warnings.warn(f"deteval: ignoring {int((~ok).sum())} zero-area {what} box(es)")
    return boxes[ok]


def deteval(hyps: np.ndarray, refs: np.ndarray, t_r: float = 0.8, t_p: float = 0.4,
            fragmentation: float = 0.8) -> EvalReport:
    """Many-to-many matching on area recall/precision.

    One-to-one matches score 1 on both sides. A reference split over several
    hypotheses scores ``fragmentation`` on the recall side (each hypothesis 1);
    a hypothesis merging several references scores ``fragmentation`` on the
    precision side (each reference 1).
    """
    hyps = _drop_degenerate(np.asarray(hyps, dtype=np.float64).reshape(-1, 4), "hypothesis")
    refs = _drop_degenerate(np.asarray(refs, dtype=np.float64).reshape(-1, 4), "reference")
    thresholds = {"t_r": t_r, "t_p": t_p, "fragmentation": fragmentation}
    n_r, n_h = len(refs), len(hyps)
    if n_r == 0 or n_h == 0:
        return EvalReport(n_r, n_h, 0.0, 0.0, thresholds)
    inter = intersection_matrix(refs, hyps)
    sigma = inter / (refs[:, 2] * refs[:, 3])[:, None]   # area recall
    tau = inter / (hyps[:, 2] * hyps[:, 3])[None, :]     # area precision
    good = (sigma >= t_r) & (tau >= t_p)
    ref_done = np.zeros(n_r, dtype=bool)
    hyp_done = np.zeros(n_h, dtype=bool)
    rec = prec = 0.0

    for i in range(n_r):
        if good[i].sum() != 1:
            continue
        j = int(np.argmax(good[i]))
        if good[:, j].sum() == 1 and not hyp_done[j]:
            ref_done[i] = hyp_done[j] = True
            rec += 1.0
            prec += 1.0

    # splits: one reference covered by several hypotheses
    for i in np.flatnonzero(~ref_done):
        js = np.flatnonzero(~hyp_done & (tau[i] >= t_p))
        if len(js) > 1 and sigma[i, js].sum() >= t_r:
            ref_done[i] = True
            hyp_done[js] = True
            rec += fragmentation
            prec += float(len(js))

    # merges: several references covered by one hypothesis
    for j in np.flatnonzero(~hyp_done):
        iset = np.flatnonzero(~ref_done & (sigma[:, j] >= t_r))
        if len(iset) > 1 and tau[iset, j].sum() >= t_p:
            hyp_done[j] = True
            ref_done[iset] = True
            rec += float(len(iset))
            prec += fragmentation

    # remaining one-to-one pairs whose ambiguity was resolved above
    for i in np.flatnonzero(~ref_done):
        js = np.flatnonzero(~hyp_done & good[i])
        if len(js):
            j = js[np.argmax(sigma[i, js] + tau[i, js])]
            ref_done[i] = hyp_done[j] = True
            rec += 1.0
            prec += 1.0

    return EvalReport(n_r, n_h, rec, prec, thresholds)


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    lines = [f"{'setting':<24} {'precision':>9} {'recall':>9} {'f-measure':>9}"]
    for name, rep in rows:
        lines.append(f"{name:<24} {rep.precision:>9.4f} {rep.recall:>9.4f} {rep.f_measure:>9.4f}")
    return "\n".join(lines)


def format_kv(rows: list[tuple[str, EvalReport]]) -> str:
    out = []
    for name, rep in rows:
        for k, v in rep.as_dict().items():
            out.append(f"{name}.{k}={v!r}")
    return "\n".join(out) + "\n"
