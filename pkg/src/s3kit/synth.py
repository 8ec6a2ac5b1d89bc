"""Seeded synthetic "instrument" scenes, their feature pyramids, and aspect diagnostics.

Each instrument is a long thin bar laid at an oblique angle with a textured
tip at one end. Shafts look alike across classes; only the tip texture tells
the class apart. Background clutter reuses the tip textures, so a box crop
around an instrument picks up misleading evidence that its mask excludes.

Every frame draws from its own ``SeedSequence`` child keyed by frame index,
so a frame's content does not depend on how many frames are generated.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datamodel import Dataset, Instance, load_annotations, save_annotations
from .errors import ConfigError, EmptyDataset
from .maskcore import FrameSize, aspect_ratio, bbox_of, occupancy
from .numeric import FeaturePyramid, avg_pool, read_pyramid, write_pyramid

TIP_PATTERNS = ("solid", "hstripes", "vstripes", "checker", "diagonal", "dots")

SHAFT_LEVEL = 0.55
BACKGROUND_LEVEL = 0.15


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    frame_height: int = 64
    frame_width: int = 64
    n_frames: int = 32
    class_count: int = 4
    instances_per_frame: tuple[int, int] = (2, 4)
    bar_length: tuple[float, float] = (30.0, 46.0)
    bar_width: tuple[float, float] = (3.0, 5.0)
    orientation_deg: tuple[float, float] = (15.0, 75.0)
    tip_size: int = 8
    clutter_patches: int = 4
    label_noise: float = 0.0
    mask_noise: float = 0.0
    pyramid_levels: int = 3
    frame_prefix: str = "f"

    def __post_init__(self):
        for name in ("instances_per_frame", "bar_length", "bar_width", "orientation_deg"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (lo, hi))
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.frame_height < 8 or self.frame_width < 8:
            raise ConfigError("frames must be at least 8x8")
        if not 2 <= self.class_count <= len(TIP_PATTERNS):
            raise ConfigError(f"class_count must be in 2..{len(TIP_PATTERNS)}")
        if self.instances_per_frame[0] < 1:
            raise ConfigError("at least one instance per frame")
        if self.bar_width[0] < 1 or self.bar_length[0] < self.tip_size + 2:
            raise ConfigError("bars must be at least 1 px wide and longer than the tip")
        if self.bar_length[1] > min(self.frame_height, self.frame_width) * 1.35:
            raise ConfigError("bars cannot fit inside the frame")
        if not (0.0 <= self.orientation_deg[0] and self.orientation_deg[1] <= 90.0):
            raise ConfigError("orientation range must lie in [0, 90] degrees")
        for name in ("label_noise", "mask_noise"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.n_frames < 1 or self.pyramid_levels < 1:
            raise ConfigError("need at least one frame and one pyramid level")
        div = 2 ** (self.pyramid_levels - 1)
        if self.frame_height % div or self.frame_width % div:
            raise ConfigError(f"frame size must be divisible by {div} for {self.pyramid_levels} levels")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def elongated_config(**overrides) -> SynthConfig:
    """Shallow-angle long bars whose boxes are elongated yet sparsely filled."""
    kw = dict(
        bar_length=(44.0, 58.0), bar_width=(2.0, 4.0), orientation_deg=(3.0, 11.0),
        instances_per_frame=(2, 3),
    )
    kw.update(overrides)
    return SynthConfig(**kw)


@dataclass
class SynthScene:
    config: SynthConfig
    gt: Dataset
    pred: Dataset
    pyramids: dict[str, FeaturePyramid] = field(default_factory=dict)
    images: dict[str, np.ndarray] = field(default_factory=dict)


def tip_texture(pattern: str, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    hi, lo = 0.95, 0.25
    if pattern == "solid":
        on = np.ones_like(xs, dtype=bool)
    elif pattern == "hstripes":
        on = ys % 2 == 0
    elif pattern == "vstripes":
        on = xs % 2 == 0
    elif pattern == "checker":
        on = (xs + ys) % 2 == 0
    elif pattern == "diagonal":
        on = ((xs + ys) // 2) % 2 == 0
    elif pattern == "dots":
        on = (xs % 3 == 0) & (ys % 3 == 0)
    else:
        raise ConfigError(f"unknown tip pattern {pattern!r}")
    return np.where(on, hi, lo)


def _bar(cfg: SynthConfig, rng: np.random.Generator):
    """Full-extent shaft and tip masks of one randomly placed instrument."""
    h, w = cfg.frame_height, cfg.frame_width
    length = rng.uniform(*cfg.bar_length)
    width = rng.uniform(*cfg.bar_width)
    theta = math.radians(rng.uniform(*cfg.orientation_deg))
    d = np.array([math.cos(theta), math.sin(theta) * rng.choice((-1.0, 1.0))])
    if rng.random() < 0.5:
        d = -d
    # half extents of the bar's axis-aligned hull, with a margin for the wider tip
    half_x = abs(d[0]) * length / 2 + abs(d[1]) * (width / 2 + 1) + 1
    half_y = abs(d[1]) * length / 2 + abs(d[0]) * (width / 2 + 1) + 1
    if 2 * half_x >= w or 2 * half_y >= h:
        return None
    cx = rng.uniform(half_x, w - half_x)
    cy = rng.uniform(half_y, h - half_y)
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5 - cx, ys + 0.5 - cy
    along = px * d[0] + py * d[1]
    across = np.abs(-px * d[1] + py * d[0])
    shaft = (np.abs(along) <= length / 2) & (across <= width / 2)
    tip = (along >= length / 2 - cfg.tip_size) & (along <= length / 2) & (across <= width / 2 + 1)
    return shaft & ~tip, tip


def _render_frame(cfg: SynthConfig, rng: np.random.Generator):
    h, w = cfg.frame_height, cfg.frame_width
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(200):
        n = int(rng.integers(cfg.instances_per_frame[0], cfg.instances_per_frame[1] + 1))
        bars = [_bar(cfg, rng) for _ in range(n)]
        if any(b is None for b in bars):
            continue
        full = [s | t for s, t in bars]
        visible = []
        ok = True
        for k, (s, t) in enumerate(bars):
            cover = np.zeros((h, w), dtype=bool)
            for later in full[k + 1:]:
                cover |= later
            vis = full[k] & ~cover
            if vis.sum() < 0.6 * full[k].sum() or (t & ~cover).sum() < 0.8 * t.sum():
                ok = False
                break
            visible.append(vis)
        if ok:
            break
    else:
        raise ConfigError("could not place instruments; loosen the size or count ranges")

    labels = [int(rng.integers(1, cfg.class_count + 1)) for _ in range(n)]
    image = BACKGROUND_LEVEL + rng.normal(0.0, 0.03, size=(h, w))
    for _ in range(cfg.clutter_patches):
        size = cfg.tip_size // 2 + 1
        y0 = int(rng.integers(0, h - size))
        x0 = int(rng.integers(0, w - size))
        pattern = TIP_PATTERNS[int(rng.integers(0, cfg.class_count))]
        sl = (slice(y0, y0 + size), slice(x0, x0 + size))
        image[sl] = tip_texture(pattern, ys[sl], xs[sl])
    for (shaft, tip), label in zip(bars, labels):
        image[shaft] = SHAFT_LEVEL + rng.normal(0.0, 0.03, size=int(shaft.sum()))
        image[tip] = tip_texture(TIP_PATTERNS[label - 1], ys[tip], xs[tip])
    return np.clip(image, 0.0, 1.0), visible, labels


def image_features(image: np.ndarray) -> np.ndarray:
    """Intensity plus four absolute-difference edge responses, ``[5, H, W]``."""
    p = np.pad(image, 1, mode="edge")
    c = p[1:-1, 1:-1]
    return np.stack([
        c,
        np.abs(p[1:-1, 2:] - c),
        np.abs(p[2:, 1:-1] - c),
        np.abs(p[2:, 2:] - c),
        np.abs(p[2:, :-2] - c),
    ])


def build_pyramid(image: np.ndarray, levels: int = 3) -> FeaturePyramid:
    """Feature maps at full, half, quarter... resolution (float32-exact values)."""
    base = image_features(image)
    out = []
    for k in range(levels):
        f = 2 ** k
        lv = base if f == 1 else avg_pool(base, base.shape[1] // f, base.shape[2] // f)
        out.append(lv.astype(np.float32).astype(np.float64))
    return FeaturePyramid(tuple(out))


def _perturb_mask(mask: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    if amount <= 0:
        return mask.copy()
    inner = mask & ~ndimage.binary_erosion(mask)
    outer = ndimage.binary_dilation(mask) & ~mask
    flip = (inner | outer) & (rng.random(mask.shape) < amount)
    out = mask ^ flip
    return out if out.any() else mask.copy()


def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def generate(cfg: SynthConfig) -> SynthScene:
    classes = tuple(f"{p}_tip" for p in TIP_PATTERNS[: cfg.class_count])
    size = FrameSize(cfg.frame_height, cfg.frame_width)
    frames, gts, preds = [], [], []
    pyramids, images = {}, {}
    for i in range(cfg.n_frames):
        rng = frame_rng(cfg.seed, i)
        fid = f"{cfg.frame_prefix}{i:04d}"
        image, masks, labels = _render_frame(cfg, rng)
        frames.append((fid, size))
        images[fid] = image
        pyramids[fid] = build_pyramid(image, cfg.pyramid_levels)
        for k, (m, label) in enumerate(zip(masks, labels), start=1):
            gts.append(Instance.from_bits(fid, k, label, 1.0, m))
            corrupt = rng.random() < cfg.label_noise
            if corrupt:
                shift = int(rng.integers(1, cfg.class_count))
                pred_label = (label - 1 + shift) % cfg.class_count + 1
                score = rng.uniform(0.05, 0.6)
            else:
                pred_label = label
                score = rng.uniform(0.5, 1.0)
            pred_mask = _perturb_mask(m, cfg.mask_noise, rng)
            preds.append(Instance.from_bits(fid, k, pred_label, round(float(score), 6), pred_mask))
    gt = Dataset(cfg.class_count, classes, tuple(frames), tuple(gts))
    pred = Dataset(cfg.class_count, classes, tuple(frames), tuple(preds))
    return SynthScene(cfg, gt, pred, pyramids, images)


def write_scene(scene: SynthScene, out_dir) -> None:
    """Write ``gt.json``, ``pred.json``, ``config.json`` and ``features/<frame>.s3t``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_annotations(scene.gt, out / "gt.json")
    save_annotations(scene.pred, out / "pred.json")
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(scene.config.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    for fid, pyr in scene.pyramids.items():
        write_pyramid(pyr, out / "features" / f"{fid}.s3t")


def read_features(features_dir, frame_ids) -> dict[str, FeaturePyramid]:
    return {fid: read_pyramid(os.path.join(features_dir, f"{fid}.s3t")) for fid in frame_ids}


def read_scene(scene_dir) -> tuple[Dataset, Dataset | None, dict[str, FeaturePyramid]]:
    d = Path(scene_dir)
    gt = load_annotations(d / "gt.json")
    pred = load_annotations(d / "pred.json") if (d / "pred.json").exists() else None
    return gt, pred, read_features(d / "features", gt.frame_ids)


@dataclass
class AspectReport:
    ratios: list[float]
    occupancies: list[float]
    threshold: float
    count_above: int
    fraction_above: float
    mean_occupancy: float
    histogram: dict[str, int]


HISTOGRAM_EDGES = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, math.inf)


def aspect_report(ds: Dataset, threshold: float = 3.0) -> AspectReport:
    """Box aspect ratio and box occupancy over every instance of a dataset."""
    if not ds.instances:
        raise EmptyDataset("aspect report of a dataset without instances")
    ratios, occ = [], []
    for inst in ds.instances:
        ratios.append(aspect_ratio(bbox_of(inst.bits)))
        occ.append(occupancy(inst.bits))
    counts = np.bincount(
        np.searchsorted(HISTOGRAM_EDGES, ratios, side="right") - 1,
        minlength=len(HISTOGRAM_EDGES) - 1,
    )
    labels = [
        f"[{lo:g}, {hi:g})" for lo, hi in zip(HISTOGRAM_EDGES[:-1], HISTOGRAM_EDGES[1:])
    ]
    above = sum(r > threshold for r in ratios)
    return AspectReport(
        ratios=ratios,
        occupancies=occ,
        threshold=threshold,
        count_above=above,
        fraction_above=above / len(ratios),
        mean_occupancy=math.fsum(occ) / len(occ),
        histogram=dict(zip(labels, counts.tolist())),
    )
