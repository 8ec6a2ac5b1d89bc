"""The few dense-array operations the mask-attended classifier needs.

Tensors are float64 ``numpy`` arrays, feature maps laid out ``[C, H, W]``.
Also holds the ``S3T1`` feature-pyramid container and a central-difference
gradient checker used as the oracle for every analytic gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch, TruncatedFile, VersionMismatch, ZeroVector
from .maskcore import as_mask

PYRAMID_MAGIC = b"S3T1"


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-scale feature maps of one frame, finest level first."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        levels = tuple(np.asarray(lv, dtype=np.float64) for lv in self.levels)
        if not levels:
            raise ShapeMismatch("a pyramid needs at least one level")
        for i, lv in enumerate(levels):
            if lv.ndim != 3 or min(lv.shape) < 1:
                raise ShapeMismatch(f"level {i} must be [C, H, W], got {lv.shape}")
            if not np.all(np.isfinite(lv)):
                raise NonFiniteValue(f"level {i} holds non-finite values")
            lv.flags.writeable = False
        for i in range(1, len(levels)):
            if levels[i].shape[1] >= levels[i - 1].shape[1]:
                raise ShapeMismatch("level heights must strictly decrease")
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lv.shape[0] for lv in self.levels)

    @property
    def spatial(self) -> tuple[tuple[int, int], ...]:
        return tuple(lv.shape[1:] for lv in self.levels)


def resize_mask_nearest(mask, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resample at pixel centres, returned as ``[1, H, W]`` of 0/1."""
    m = as_mask(mask)
    if target_h < 1 or target_w < 1:
        raise ShapeMismatch(f"target size must be positive, got {target_h}x{target_w}")
    src_h, src_w = m.shape
    # integer form of floor((i + 0.5) * src / target)
    rows = ((2 * np.arange(target_h) + 1) * src_h) // (2 * target_h)
    cols = ((2 * np.arange(target_w) + 1) * src_w) // (2 * target_w)
    return m[np.ix_(rows, cols)][None].astype(np.float64)


def mask_attend(feat: np.ndarray, mask_resized: np.ndarray) -> np.ndarray:
    if feat.ndim != 3 or mask_resized.shape != (1, *feat.shape[1:]):
        raise ShapeMismatch(f"cannot attend {feat.shape} with mask {mask_resized.shape}")
    # + 0.0 turns -0.0 into 0.0 so masked-out cells carry no trace of the features
    return feat * mask_resized + 0.0


def conv1x1(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if inp.ndim != 3 or weights.ndim != 2 or weights.shape[1] != inp.shape[0]:
        raise ShapeMismatch(f"conv1x1 weights {weights.shape} vs input {inp.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeMismatch(f"bias {bias.shape} vs {weights.shape[0]} output channels")
    c, h, w = inp.shape
    out = weights @ inp.reshape(c, h * w) + bias[:, None]
    return out.reshape(-1, h, w)


def avg_pool(inp: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Block-average ``[C, H, W]`` down to ``[C, target_h, target_w]`` (integer factors)."""
    c, h, w = inp.shape
    if h % target_h or w % target_w:
        raise ShapeMismatch(f"cannot pool {h}x{w} to {target_h}x{target_w} by integer factors")
    fh, fw = h // target_h, w // target_w
    return inp.reshape(c, target_h, fh, target_w, fw).mean(axis=(2, 4))


def global_avg_pool(inp: np.ndarray) -> np.ndarray:
    if inp.ndim != 3:
        raise ShapeMismatch(f"expected [C, H, W], got {inp.shape}")
    return inp.mean(axis=(1, 2))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise ZeroVector(f"cannot normalise a vector of norm {norm:g}")
    return v / norm


def affine(v: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weights.ndim != 2 or weights.shape[1] != v.shape[-1] or bias.shape != (weights.shape[0],):
        raise ShapeMismatch(f"affine {weights.shape}/{bias.shape} vs input {v.shape}")
    return weights @ v + bias


def finite_diff_grad(f: Callable[[np.ndarray], float], x, epsilon: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = f(x)
        flat[i] = orig - epsilon
        down = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteValue(f"f is not finite around coordinate {i}")
        gflat[i] = (up - down) / (2 * epsilon)
    return grad


def write_pyramid(pyramid: FeaturePyramid, path) -> None:
    """Write ``S3T1``: magic, u32 level count, per level u32 rank + u32 dims, then float32 data."""
    header = [PYRAMID_MAGIC, struct.pack("<I", len(pyramid.levels))]
    for lv in pyramid.levels:
        header.append(struct.pack(f"<I{lv.ndim}I", lv.ndim, *lv.shape))
    with open(path, "wb") as f:
        f.write(b"".join(header))
        for lv in pyramid.levels:
            f.write(lv.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.what} ended after {len(self.data)} bytes")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def read_pyramid(path) -> FeaturePyramid:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(4) != PYRAMID_MAGIC:
        raise VersionMismatch(f"{path}: not an S3T1 pyramid file")
    shapes = []
    for _ in range(r.u32()):
        rank = r.u32()
        shapes.append(tuple(r.u32(rank)) if rank > 1 else (r.u32(),) if rank == 1 else ())
    levels = []
    for shape in shapes:
        n = int(np.prod(shape))
        levels.append(np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape))
    return FeaturePyramid(tuple(levels))


def stack_channels(maps: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(maps), axis=0)
