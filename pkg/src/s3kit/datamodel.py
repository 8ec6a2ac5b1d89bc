"""Instances, datasets, the annotation JSON format, and GT/prediction matching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MalformedRle, ParseError, SchemaError
from .maskcore import FrameSize, RleMask, pairwise_iou, rle_decode, rle_encode


@dataclass(frozen=True)
class Instance:
    """One detection or ground-truth object. GT instances carry score 1.0."""

    frame_id: str
    instance_id: int
    class_label: int
    score: float
    mask: RleMask

    @cached_property
    def bits(self) -> np.ndarray:
        m = rle_decode(self.mask)
        m.flags.writeable = False
        return m

    @classmethod
    def from_bits(cls, frame_id, instance_id, class_label, score, bits) -> "Instance":
        return cls(frame_id, int(instance_id), int(class_label), float(score), rle_encode(bits))

    def with_label(self, class_label: int) -> "Instance":
        new = replace(self, class_label=int(class_label))
        if "bits" in self.__dict__:
            new.__dict__["bits"] = self.__dict__["bits"]
        return new


@dataclass(frozen=True)
class Dataset:
    class_count: int
    classes: tuple[str, ...]
    frames: tuple[tuple[str, FrameSize], ...]
    instances: tuple[Instance, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(
            self, "frames", tuple((str(fid), FrameSize(*size)) for fid, size in self.frames)
        )
        object.__setattr__(self, "instances", tuple(self.instances))

    @property
    def frame_ids(self) -> list[str]:
        return [fid for fid, _ in self.frames]

    def frame_size(self, frame_id: str) -> FrameSize:
        return dict(self.frames)[frame_id]

    def by_frame(self) -> dict[str, list[Instance]]:
        """Instances grouped per frame, keyed in frame order (empty frames included)."""
        out: dict[str, list[Instance]] = {fid: [] for fid, _ in self.frames}
        for inst in self.instances:
            out[inst.frame_id].append(inst)
        return out

    def with_instances(self, instances: Iterable[Instance]) -> "Dataset":
        return replace(self, instances=tuple(instances))


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]

    def gt_for(self) -> dict[int, int]:
        return {p: g for p, g, _ in self.pairs}


def validate_dataset(ds: Dataset) -> None:
    """Raise SchemaError on the first invariant violation."""
    if not isinstance(ds.class_count, int) or ds.class_count < 1:
        raise SchemaError("class_count must be a positive integer", "class_count")
    if len(ds.classes) != ds.class_count:
        raise SchemaError(
            f"{len(ds.classes)} class names for class_count {ds.class_count}", "classes"
        )
    sizes: dict[str, FrameSize] = {}
    for i, (fid, size) in enumerate(ds.frames):
        if fid in sizes:
            raise SchemaError(f"duplicate frame id {fid!r}", f"frames[{i}].id")
        if size.height < 1 or size.width < 1:
            raise SchemaError("frame dimensions must be positive", f"frames[{i}]")
        sizes[fid] = size
    seen: set[tuple[str, int]] = set()
    for i, inst in enumerate(ds.instances):
        path = f"instances[{i}]"
        if inst.frame_id not in sizes:
            raise SchemaError(f"unknown frame_id {inst.frame_id!r}", f"{path}.frame_id")
        key = (inst.frame_id, inst.instance_id)
        if key in seen:
            raise SchemaError(
                f"duplicate instance_id {inst.instance_id} in frame {inst.frame_id!r}",
                f"{path}.instance_id",
            )
        seen.add(key)
        if not 1 <= inst.class_label <= ds.class_count:
            raise SchemaError(f"class {inst.class_label} outside 1..{ds.class_count}", f"{path}.class")
        if not (math.isfinite(inst.score) and 0.0 <= inst.score <= 1.0):
            raise SchemaError(f"score {inst.score} outside [0, 1]", f"{path}.score")
        if inst.mask.size != sizes[inst.frame_id]:
            raise SchemaError(
                f"mask size {tuple(inst.mask.size)} differs from frame size "
                f"{tuple(sizes[inst.frame_id])}",
                f"{path}.segmentation.size",
            )
        try:
            rle_decode(inst.mask)
        except MalformedRle as exc:
            raise SchemaError(str(exc), f"{path}.segmentation.counts") from None


def _require(obj, key, path, kind):
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path)
    if key not in obj:
        raise SchemaError(f"missing key {key!r}", path)
    value = obj[key]
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) or not isinstance(value, kind):
        raise SchemaError(f"{key!r} has wrong type {type(value).__name__}", f"{path}.{key}")
    return value


def dataset_from_json(obj) -> Dataset:
    class_count = _require(obj, "class_count", "$", int)
    classes = _require(obj, "classes", "$", list)
    for i, name in enumerate(classes):
        if not isinstance(name, str):
            raise SchemaError("class name must be a string", f"classes[{i}]")
    frames = []
    for i, fr in enumerate(_require(obj, "frames", "$", list)):
        path = f"frames[{i}]"
        frames.append(
            (_require(fr, "id", path, str),
             FrameSize(_require(fr, "height", path, int), _require(fr, "width", path, int)))
        )
    instances = []
    for i, rec in enumerate(_require(obj, "instances", "$", list)):
        path = f"instances[{i}]"
        seg = _require(rec, "segmentation", path, dict)
        size = _require(seg, "size", f"{path}.segmentation", list)
        counts = _require(seg, "counts", f"{path}.segmentation", list)
        if len(size) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in size):
            raise SchemaError("size must be [H, W]", f"{path}.segmentation.size")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in counts):
            raise SchemaError("counts must be integers", f"{path}.segmentation.counts")
        instances.append(
            Instance(
                frame_id=_require(rec, "frame_id", path, str),
                instance_id=_require(rec, "instance_id", path, int),
                class_label=_require(rec, "class", path, int),
                score=float(_require(rec, "score", path, (int, float))),
                mask=RleMask(FrameSize(*size), tuple(counts)),
            )
        )
    ds = Dataset(class_count, tuple(classes), tuple(frames), tuple(instances))
    validate_dataset(ds)
    return ds


def dataset_to_json(ds: Dataset) -> dict:
    return {
        "class_count": ds.class_count,
        "classes": list(ds.classes),
        "frames": [{"id": fid, "height": s.height, "width": s.width} for fid, s in ds.frames],
        "instances": [
            {
                "frame_id": inst.frame_id,
                "instance_id": inst.instance_id,
                "class": inst.class_label,
                "score": inst.score,
                "segmentation": inst.mask.to_json(),
            }
            for inst in ds.instances
        ],
    }


def load_annotations(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return dataset_from_json(obj)


def save_annotations(ds: Dataset, path) -> None:
    validate_dataset(ds)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dataset_to_json(ds), f, separators=(",", ":"))
        f.write("\n")


def _score_order(preds: Sequence[Instance]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].instance_id))


def match_instances(
    preds: Sequence[Instance], gts: Sequence[Instance], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy one-to-one matching of predictions to GT within one frame.

    Predictions are visited by descending score (ties: lower instance_id) and
    each takes the still-unmatched GT of highest mask IoU (ties: lower GT
    instance_id) if that IoU reaches ``iou_threshold``. Class labels are
    ignored.
    """
    ious = pairwise_iou([p.bits for p in preds], [g.bits for g in gts])
    gt_order = sorted(range(len(gts)), key=lambda j: gts[j].instance_id)
    taken = [False] * len(gts)
    pairs = []
    unmatched_preds = []
    for i in _score_order(preds):
        best, best_iou = -1, -1.0
        for j in gt_order:
            if not taken[j] and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            pairs.append((preds[i].instance_id, gts[best].instance_id, float(best_iou)))
        else:
            unmatched_preds.append(preds[i].instance_id)
    unmatched_gts = [gts[j].instance_id for j in gt_order if not taken[j]]
    return MatchResult(tuple(pairs), tuple(unmatched_preds), tuple(unmatched_gts))


def relabel_with_gt(
    preds: Sequence[Instance], gts: Sequence[Instance], iou_threshold: float = 0.5
) -> list[Instance]:
    """Give every matched prediction its GT's class; everything else is untouched."""
    match = match_instances(preds, gts, iou_threshold)
    gt_label = {g.instance_id: g.class_label for g in gts}
    new_label = {p: gt_label[g] for p, g, _ in match.pairs}
    return [
        p.with_label(new_label[p.instance_id]) if p.instance_id in new_label else p
        for p in preds
    ]


def relabel_dataset_with_gt(pred: Dataset, gt: Dataset, iou_threshold: float = 0.5) -> Dataset:
    gt_frames = gt.by_frame()
    out = []
    for fid, preds in pred.by_frame().items():
        out.extend(relabel_with_gt(preds, gt_frames.get(fid, []), iou_threshold))
    return pred.with_instances(out)


def remap_labels(
    ds: Dataset, mapping: Mapping[int, int], frame_ids: Iterable[str] | None = None
) -> Dataset:
    """Patch known annotation mistakes by mapping class ids, optionally on a frame subset.

    Remap files are JSON objects ``{"mapping": {"2": 3}, "frame_ids": [...]}``;
    see :func:`load_remap`.
    """
    wanted = None if frame_ids is None else set(frame_ids)
    out = [
        inst.with_label(mapping.get(inst.class_label, inst.class_label))
        if wanted is None or inst.frame_id in wanted
        else inst
        for inst in ds.instances
    ]
    new = ds.with_instances(out)
    validate_dataset(new)
    return new


def load_remap(path) -> tuple[dict[int, int], list[str] | None]:
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    raw = _require(obj, "mapping", "$", dict)
    try:
        mapping = {int(k): int(v) for k, v in raw.items()}
    except (TypeError, ValueError):
        raise SchemaError("mapping keys and values must be class ids", "mapping") from None
    frame_ids = obj.get("frame_ids")
    return mapping, frame_ids
