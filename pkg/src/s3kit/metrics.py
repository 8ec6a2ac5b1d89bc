"""Challenge IoU, ISINet IoU, mean-class IoU and mask AP50.

All IoUs are semantic per frame: the masks of every instance of a class are
merged before comparison, so two predictions tiling one GT instrument score
as a perfect match. Sums go through ``math.fsum`` so results do not depend
on frame or instance order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import Dataset, Instance
from .errors import EmptyDataset, SchemaError, SizeMismatch
from .maskcore import mask_iou, pairwise_iou


def _union(instances: Sequence[Instance], class_label: int, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for inst in instances:
        if inst.class_label == class_label:
            out |= inst.bits
    return out


def frame_class_iou(preds: Sequence[Instance], gts: Sequence[Instance], class_label: int) -> float:
    """IoU of the class-``class_label`` pixel unions of one frame.

    Zero when exactly one side is empty (and, by convention, when both are).
    """
    sizes = {tuple(i.mask.size) for i in (*preds, *gts)}
    if not sizes:
        return 0.0
    if len(sizes) > 1:
        raise SizeMismatch(f"instances span several frame sizes: {sorted(sizes)}")
    shape = sizes.pop()
    return mask_iou(_union(preds, class_label, shape), _union(gts, class_label, shape))


def _paired_frames(gt: Dataset, pred: Dataset):
    if dict(gt.frames) != dict(pred.frames):
        raise SchemaError("GT and prediction datasets declare different frames", "frames")
    gt_by, pred_by = gt.by_frame(), pred.by_frame()
    for fid in gt_by:
        yield fid, gt_by[fid], pred_by[fid]


def _frame_scores(gt: Dataset, pred: Dataset, include_pred_classes: bool):
    per_frame = []
    for _, gts, preds in _paired_frames(gt, pred):
        gt_classes = {g.class_label for g in gts}
        classes = gt_classes | {p.class_label for p in preds} if include_pred_classes else gt_classes
        if not classes:
            continue
        per_frame.append(
            math.fsum(frame_class_iou(preds, gts, c) for c in classes) / len(classes)
        )
    return per_frame


def _require_gt(gt: Dataset):
    if not gt.instances:
        raise EmptyDataset("no frame carries ground truth")


def challenge_iou(gt: Dataset, pred: Dataset) -> float:
    """Mean over GT-bearing frames of the mean IoU over that frame's GT classes."""
    _require_gt(gt)
    scores = _frame_scores(gt, pred, include_pred_classes=False)
    return math.fsum(scores) / len(scores)


def isi_iou(gt: Dataset, pred: Dataset) -> float:
    """Like :func:`challenge_iou` but predicted classes join each frame's class set.

    Hallucinated classes add zero terms; frames holding only predictions
    contribute 0 to the frame mean.
    """
    _require_gt(gt)
    scores = _frame_scores(gt, pred, include_pred_classes=True)
    return math.fsum(scores) / len(scores)


def mc_iou(gt: Dataset, pred: Dataset) -> tuple[float, dict[int, float]]:
    """Mean class IoU and the per-class map.

    A class's IoU averages over the frames where it appears in GT or
    prediction. Every class seen anywhere enters the mean, so classes that
    are only ever hallucinated count as 0.
    """
    _require_gt(gt)
    terms: dict[int, list[float]] = {}
    for _, gts, preds in _paired_frames(gt, pred):
        for c in {i.class_label for i in (*gts, *preds)}:
            terms.setdefault(c, []).append(frame_class_iou(preds, gts, c))
    per_class = {c: math.fsum(v) / len(v) for c, v in sorted(terms.items())}
    return math.fsum(per_class.values()) / len(per_class), per_class


def average_precision(is_tp: Sequence[bool], n_gt: int) -> float:
    """All-points AP with a monotone precision envelope.

    ``is_tp`` lists detections already sorted by descending score.
    """
    if n_gt <= 0:
        raise ValueError("average precision needs at least one GT instance")
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64))
    if tp.size == 0:
        return 0.0
    rank = np.arange(1, tp.size + 1, dtype=np.float64)
    precision = tp / rank
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall_step = np.diff(np.concatenate(([0.0], recall)))
    return float(math.fsum((recall_step * envelope).tolist()))


def ap50(gt: Dataset, pred: Dataset, iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """Per-class mask AP at a single IoU threshold, and its mean over GT classes.

    Detections of a class are ranked across all frames by descending score
    (ties: frame id, then instance id). Each claims the unmatched same-class
    GT of highest IoU in its frame (ties: lower GT instance id) and is a true
    positive if that IoU reaches the threshold.
    """
    _require_gt(gt)
    frames = list(_paired_frames(gt, pred))
    gt_classes = sorted({g.class_label for g in gt.instances})
    per_class = {}
    for c in gt_classes:
        dets = []
        gt_of: dict[str, list[Instance]] = {}
        n_gt = 0
        for fid, gts, preds in frames:
            g_c = sorted((g for g in gts if g.class_label == c), key=lambda g: g.instance_id)
            p_c = [p for p in preds if p.class_label == c]
            gt_of[fid] = g_c
            n_gt += len(g_c)
            if p_c and g_c:
                ious = pairwise_iou([p.bits for p in p_c], [g.bits for g in g_c])
            else:
                ious = np.zeros((len(p_c), len(g_c)))
            for k, p in enumerate(p_c):
                dets.append((-p.score, fid, p.instance_id, ious[k]))
        dets.sort(key=lambda d: d[:3])
        taken = {fid: [False] * len(g) for fid, g in gt_of.items()}
        flags = []
        for _, fid, _, row in dets:
            best, best_iou = -1, -1.0
            for j, v in enumerate(row):
                if not taken[fid][j] and v > best_iou:
                    best, best_iou = j, v
            hit = best >= 0 and best_iou >= iou_threshold
            if hit:
                taken[fid][best] = True
            flags.append(hit)
        per_class[c] = average_precision(flags, n_gt)
    return math.fsum(per_class.values()) / len(per_class), per_class


@dataclass
class EvalReport:
    ch_iou: float
    isi_iou: float
    mc_iou: float
    per_class_iou: dict[int, float] = field(default_factory=dict)
    ap50: dict[int, float] = field(default_factory=dict)
    ap50_mean: float = 0.0

    def to_json(self) -> dict:
        ap = {str(c): v for c, v in self.ap50.items()}
        ap["mean"] = self.ap50_mean
        return {
            "ch_iou": self.ch_iou,
            "isi_iou": self.isi_iou,
            "mc_iou": self.mc_iou,
            "per_class": {str(c): v for c, v in self.per_class_iou.items()},
            "ap50": ap,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        ap = dict(obj["ap50"])
        mean = ap.pop("mean")
        return cls(
            ch_iou=obj["ch_iou"],
            isi_iou=obj["isi_iou"],
            mc_iou=obj["mc_iou"],
            per_class_iou={int(k): v for k, v in obj["per_class"].items()},
            ap50={int(k): v for k, v in ap.items()},
            ap50_mean=mean,
        )


def evaluate(gt: Dataset, pred: Dataset) -> EvalReport:
    mc, per_class = mc_iou(gt, pred)
    ap_mean, ap = ap50(gt, pred)
    return EvalReport(
        ch_iou=challenge_iou(gt, pred),
        isi_iou=isi_iou(gt, pred),
        mc_iou=mc,
        per_class_iou=per_class,
        ap50=ap,
        ap50_mean=ap_mean,
    )


def format_table(report: EvalReport, class_names: Sequence[str] = ()) -> str:
    def name(c):
        return class_names[c - 1] if 0 < c <= len(class_names) else f"class {c}"

    lines = [
        f"Ch_IoU   {report.ch_iou:.4f}",
        f"ISI_IoU  {report.isi_iou:.4f}",
        f"mcIoU    {report.mc_iou:.4f}",
        f"AP50     {report.ap50_mean:.4f}",
        "",
        f"{'class':<28}{'IoU':>8}{'AP50':>8}",
    ]
    for c in sorted(set(report.per_class_iou) | set(report.ap50)):
        iou = report.per_class_iou.get(c)
        ap = report.ap50.get(c)
        lines.append(
            f"{name(c):<28}{'-' if iou is None else f'{iou:.4f}':>8}"
            f"{'-' if ap is None else f'{ap:.4f}':>8}"
        )
    return "\n".join(lines)
