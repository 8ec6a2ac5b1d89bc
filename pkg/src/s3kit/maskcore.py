"""Binary-mask algebra: run-length coding, geometry and pairwise IoU.

A binary mask is a 2-D ``numpy`` boolean array of shape ``(height, width)``.
Run-length masks use the column-major convention common to COCO-style
annotation files: ``counts`` alternates runs of 0s and 1s, always starting
with a (possibly empty) run of 0s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyMask, MalformedRle, SizeMismatch


class FrameSize(NamedTuple):
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width


class BBox(NamedTuple):
    """Axis-aligned box; ``x_max``/``y_max`` are exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class RleMask:
    size: FrameSize
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "size", FrameSize(int(self.size[0]), int(self.size[1])))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def to_json(self) -> dict:
        return {"size": [self.size.height, self.size.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        h, w = obj["size"]
        return cls(FrameSize(h, w), tuple(obj["counts"]))


def as_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise SizeMismatch(f"mask must be a non-empty 2-D grid, got shape {m.shape}")
    return m


def rle_encode(mask) -> RleMask:
    m = as_mask(mask)
    flat = m.ravel(order="F")
    # positions where the value changes, bracketed by the scan ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(FrameSize(*m.shape), tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    if h < 1 or w < 1:
        raise MalformedRle(f"frame size must be positive, got {h}x{w}")
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size == 0:
        raise MalformedRle("empty counts")
    if counts[0] < 0 or np.any(counts[1:] <= 0):
        raise MalformedRle("run lengths must be positive (a leading zero run is allowed)")
    if int(counts.sum()) != h * w:
        raise MalformedRle(f"counts sum to {int(counts.sum())}, frame area is {h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def _check_same_size(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise SizeMismatch(f"mask sizes differ: {a.shape} vs {b.shape}")


def mask_iou(a, b) -> float:
    """Intersection over union; two empty masks score 0, never 1."""
    a, b = as_mask(a), as_mask(b)
    _check_same_size(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def pairwise_iou(masks_a: Sequence[np.ndarray], masks_b: Sequence[np.ndarray]) -> np.ndarray:
    """IoU matrix of shape ``(len(masks_a), len(masks_b))`` from exact pixel counts."""
    if len(masks_a) == 0 or len(masks_b) == 0:
        return np.zeros((len(masks_a), len(masks_b)))
    fa = np.stack([as_mask(m).ravel() for m in masks_a])
    fb = np.stack([as_mask(m).ravel() for m in masks_b])
    if fa.shape[1] != fb.shape[1]:
        raise SizeMismatch("mask sizes differ")
    fa64, fb64 = fa.astype(np.int64), fb.astype(np.int64)
    inter = fa64 @ fb64.T
    union = fa64.sum(1)[:, None] + fb64.sum(1)[None, :] - inter
    out = np.zeros(inter.shape)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_area(mask) -> int:
    return int(np.count_nonzero(as_mask(mask)))


def bbox_of(mask) -> BBox:
    """Tight axis-aligned hull of the set pixels."""
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("bounding box of an empty mask")
    cols = np.flatnonzero(m.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def aspect_ratio(box: BBox) -> float:
    """Long side over short side, so always >= 1."""
    w, h = box.width, box.height
    return max(w, h) / min(w, h)


def occupancy(mask) -> float:
    """Fraction of the tight bounding box covered by the mask."""
    box = bbox_of(mask)
    return mask_area(mask) / box.area


def box_mask(box: BBox, size: FrameSize) -> np.ndarray:
    m = np.zeros(tuple(size), dtype=bool)
    m[box.y_min:box.y_max, box.x_min:box.x_max] = True
    return m
