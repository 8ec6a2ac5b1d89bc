"""Score filtering, mask-IoU non-maximal suppression and top-K retention.

``cross_class_nms`` rejects overlapping masks whatever their labels;
``standard_nms`` is the usual per-class variant, kept as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .datamodel import Instance
from .errors import ConfigError, SizeMismatch
from .maskcore import pairwise_iou


@dataclass(frozen=True)
class SuppressConfig:
    score_threshold: float = 0.0
    top_k: int = 5
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(f"score_threshold {self.score_threshold} outside [0, 1]")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold {self.iou_threshold} outside [0, 1]")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k}")


def _greedy(instances: Sequence[Instance], cfg: SuppressConfig, across_classes: bool):
    sizes = {tuple(inst.mask.size) for inst in instances}
    if len(sizes) > 1:
        raise SizeMismatch(f"instances span several frame sizes: {sorted(sizes)}")
    kept = [inst for inst in instances if inst.score >= cfg.score_threshold]
    kept.sort(key=lambda inst: (-inst.score, inst.instance_id))
    ious = pairwise_iou([k.bits for k in kept], [k.bits for k in kept])
    retained: list[int] = []
    for i, inst in enumerate(kept):
        if all(
            ious[i, j] <= cfg.iou_threshold
            for j in retained
            if across_classes or kept[j].class_label == inst.class_label
        ):
            retained.append(i)
    return [kept[i] for i in retained[: cfg.top_k]]


def cross_class_nms(instances: Sequence[Instance], cfg: SuppressConfig = SuppressConfig()):
    """Suppress overlapping masks across classes, then keep the ``top_k`` best.

    Output is in descending score order (ties: lower instance_id).
    """
    return _greedy(instances, cfg, across_classes=True)


def standard_nms(instances: Sequence[Instance], cfg: SuppressConfig = SuppressConfig()):
    """Per-class suppression: overlaps between different classes are left alone."""
    return _greedy(instances, cfg, across_classes=False)


def suppress_frames(instances: Sequence[Instance], cfg: SuppressConfig, mode: str = "cross"):
    """Run suppression independently on every frame, preserving first-seen frame order."""
    fn = {"cross": cross_class_nms, "standard": standard_nms}[mode]
    frames: dict[str, list[Instance]] = {}
    for inst in instances:
        frames.setdefault(inst.frame_id, []).append(inst)
    out = []
    for group in frames.values():
        out.extend(fn(group, cfg))
    return out
