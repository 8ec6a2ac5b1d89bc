"""Multi-scale mask-attended (MSMA) classifier: forward pass, staged training, relabeling.

Forward pass for one instance::

    for each pyramid level: resize mask to the level grid, zero features outside it
    average-pool finer levels down to the coarsest grid and stack channels
    1x1 merge  ->  global average pool  ->  affine embedding  ->  L2 normalise
    class = argmax cosine against the arc head

The backbone producing the pyramid is not part of the model, so "frozen
backbone" phases only differ from end-to-end ones in which of ``merge``,
``embedding`` and ``head`` are trainable.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import arcloss
from .arcloss import ArcHead
from .datamodel import Instance
from .errors import (
    ConfigError, DivergedLoss, EmptyDataset, EmptyMaskRegion, ShapeMismatch, VersionMismatch, ZeroVector,
)
from .numeric import (
    FeaturePyramid, _Reader, affine, avg_pool, conv1x1, global_avg_pool, l2_normalize,
    mask_attend, resize_mask_nearest,
)
from .maskcore import as_mask

log = logging.getLogger(__name__)

MODEL_MAGIC = b"S3M1"
MODEL_VERSION = 1
TRAINABLE = ("merge", "embedding", "head")
LOSSES = ("arc", "ce", "dot_ce")


@dataclass
class MsmaModel:
    level_shapes: tuple[tuple[int, int, int], ...]
    merge_weight: np.ndarray
    merge_bias: np.ndarray
    embed_weight: np.ndarray
    embed_bias: np.ndarray
    head: ArcHead
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.level_shapes = tuple(tuple(int(v) for v in s) for s in self.level_shapes)
        stacked = sum(c for c, _, _ in self.level_shapes)
        m_out = self.merge_weight.shape[0]
        d = self.embed_weight.shape[0]
        if self.merge_weight.shape != (m_out, stacked) or self.merge_bias.shape != (m_out,):
            raise ShapeMismatch("merge weights do not match the stacked level channels")
        if self.embed_weight.shape != (d, m_out) or self.embed_bias.shape != (d,):
            raise ShapeMismatch("embedding weights do not match the merge output")
        if d < 2 or self.head.dim != d:
            raise ShapeMismatch("head dimension must equal the embedding dimension (>= 2)")

    @property
    def embed_dim(self) -> int:
        return self.embed_weight.shape[0]

    @property
    def class_count(self) -> int:
        return self.head.class_count

    def params(self) -> dict[str, list[np.ndarray]]:
        return {
            "merge": [self.merge_weight, self.merge_bias],
            "embedding": [self.embed_weight, self.embed_bias],
            "head": [self.head.weights],
        }


def init_model(
    level_shapes: Sequence[tuple[int, int, int]],
    class_count: int,
    embed_dim: int = 128,
    merge_channels: int | None = None,
    margin: float = 0.5,
    scale: float = 1.0,
    monotone_tail: bool = False,
    seed: int = 0,
) -> MsmaModel:
    """Seeded initialisation: near-identity channel merge, uniform +-1/sqrt(fan_in) weights."""
    rng = np.random.default_rng(seed)
    stacked = sum(c for c, _, _ in level_shapes)
    m_out = stacked if merge_channels is None else merge_channels
    merge_w = np.eye(m_out, stacked) + rng.normal(0.0, 0.01, size=(m_out, stacked))
    bound_e = 1.0 / math.sqrt(m_out)
    embed_w = rng.uniform(-bound_e, bound_e, size=(embed_dim, m_out))
    bound_h = 1.0 / math.sqrt(embed_dim)
    head_w = rng.uniform(-bound_h, bound_h, size=(class_count, embed_dim))
    return MsmaModel(
        level_shapes=tuple(level_shapes),
        merge_weight=merge_w,
        merge_bias=np.zeros(m_out),
        embed_weight=embed_w,
        # zero biases keep z linear in the pooled features, so the L2 step cancels mask area
        embed_bias=np.zeros(embed_dim),
        head=ArcHead(head_w, margin=margin, scale=scale, monotone_tail=monotone_tail),
    )


def level_shapes_of(pyramid: FeaturePyramid) -> tuple[tuple[int, int, int], ...]:
    return tuple(tuple(lv.shape) for lv in pyramid.levels)


def attended_stack(model: MsmaModel, pyramid: FeaturePyramid, mask) -> np.ndarray:
    """Mask every level, pool to the coarsest grid and stack: ``[sum C_l, Hc, Wc]``.

    Raises EmptyMaskRegion if the mask selects no cell at any level.
    """
    if level_shapes_of(pyramid) != model.level_shapes:
        raise ShapeMismatch(
            f"pyramid levels {level_shapes_of(pyramid)} != model levels {model.level_shapes}"
        )
    m = as_mask(mask)
    _, hc, wc = model.level_shapes[-1]
    parts, selected = [], 0
    for lv in pyramid.levels:
        resized = resize_mask_nearest(m, lv.shape[1], lv.shape[2])
        selected += int(resized.sum())
        attended = mask_attend(lv, resized)
        parts.append(attended if attended.shape[1:] == (hc, wc) else avg_pool(attended, hc, wc))
    if selected == 0:
        raise EmptyMaskRegion("mask covers no feature cell at any pyramid level")
    return np.concatenate(parts, axis=0)


@dataclass
class ForwardResult:
    embedding: np.ndarray
    label: int
    cosines: np.ndarray


def msma_forward(model: MsmaModel, pyramid: FeaturePyramid, mask) -> ForwardResult:
    stack = attended_stack(model, pyramid, mask)
    merged = conv1x1(stack, model.merge_weight, model.merge_bias)
    pooled = global_avg_pool(merged)
    z = affine(pooled, model.embed_weight, model.embed_bias)
    try:
        e = l2_normalize(z)
    except ZeroVector as exc:
        raise EmptyMaskRegion(str(exc)) from None
    return ForwardResult(e, arcloss.predict(model.head, e), arcloss.cos_angles(model.head, e))


# -- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    name: str
    loss: str  # "arc", "ce" (cosine logits) or "dot_ce" (dot-product logits)
    epochs: int
    learning_rate: float
    optimizer: str = "adam"  # "adam" or "sgd"
    backbone_frozen: bool = True
    trainable: tuple[str, ...] = ("head",)

    def __post_init__(self):
        object.__setattr__(self, "trainable", tuple(self.trainable))
        if self.loss not in LOSSES:
            raise ConfigError(f"phase {self.name!r}: loss must be one of {LOSSES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"phase {self.name!r}: optimizer must be 'adam' or 'sgd'")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"phase {self.name!r}: epochs must be a positive integer")
        if not self.learning_rate > 0:
            raise ConfigError(f"phase {self.name!r}: learning rate must be positive")
        if not self.trainable or set(self.trainable) - set(TRAINABLE):
            raise ConfigError(f"phase {self.name!r}: trainable must be a subset of {TRAINABLE}")


@dataclass(frozen=True)
class TrainSchedule:
    phases: tuple[Phase, ...]
    batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ConfigError("a schedule needs at least one phase")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["phases"] = [{**p, "trainable": list(p["trainable"])} for p in d["phases"]]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainSchedule":
        try:
            phases = tuple(Phase(**p) for p in obj["phases"])
            return cls(phases, batch_size=int(obj.get("batch_size", 1)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad schedule: {exc}") from None


def reference_schedule(head_lr: float = 1e-5, end_to_end_lr: float = 1e-7,
                   final_ce_epochs: int = 5, batch_size: int = 1) -> TrainSchedule:
    """CE warm-up 10 epochs, arc 15, arc end-to-end 5, then a final CE pass on the head."""
    return TrainSchedule(
        (
            Phase("ce_warmup", "ce", 10, head_lr, "adam", True, ("head",)),
            Phase("arc_metric", "arc", 15, head_lr, "adam", True, ("head",)),
            Phase("arc_end_to_end", "arc", 5, end_to_end_lr, "adam", False, TRAINABLE),
            Phase("ce_classifier", "ce", final_ce_epochs, head_lr, "adam", True, ("head",)),
        ),
        batch_size=batch_size,
    )


def cel_schedule(head_lr: float = 1e-5, end_to_end_lr: float = 1e-7,
                 final_ce_epochs: int = 5, batch_size: int = 1) -> TrainSchedule:
    """The cross-entropy-only ablation: same phase layout with every arc phase swapped for CE."""
    base = reference_schedule(head_lr, end_to_end_lr, final_ce_epochs, batch_size)
    return TrainSchedule(
        tuple(Phase(p.name.replace("arc", "ce"), "ce", p.epochs, p.learning_rate, p.optimizer,
                    p.backbone_frozen, p.trainable) for p in base.phases),
        batch_size=batch_size,
    )


@dataclass
class TrainExample:
    pyramid: FeaturePyramid
    mask: np.ndarray
    target: int


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, params, lr):
        self.params, self.lr = params, lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def pooled_features(model: MsmaModel, examples: Sequence[TrainExample]) -> np.ndarray:
    """Global average of each example's attended stack, ``[N, sum C_l]``.

    Pooling commutes with the 1x1 merge, so these vectors are all the
    trainer needs from the pyramids.
    """
    return np.stack([global_avg_pool(attended_stack(model, ex.pyramid, ex.mask)) for ex in examples])


def loss_and_grads(model: MsmaModel, pooled: np.ndarray, targets: np.ndarray, loss: str):
    """Batch loss and gradients for every parameter, keyed like ``model.params()``."""
    merged = pooled @ model.merge_weight.T + model.merge_bias
    z = merged @ model.embed_weight.T + model.embed_bias
    # cosines only see the direction of z, so the normalisation is inside the loss
    if loss == "arc":
        value = arcloss.arc_loss(model.head, z, targets)
        d_head, dz = arcloss.arc_loss_grad(model.head, z, targets)
    elif loss == "ce":
        value = arcloss.cosine_ce_loss(model.head, z, targets)
        d_head, dz = arcloss.cosine_ce_grad(model.head, z, targets)
    else:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        e = z / norms
        value = arcloss.dot_ce_loss(model.head, e, targets)
        d_head, de = arcloss.dot_ce_grad(model.head, e, targets)
        dz = (de - np.sum(de * e, axis=1, keepdims=True) * e) / norms
    d_merged = dz @ model.embed_weight
    grads = {
        "merge": [d_merged.T @ pooled, d_merged.sum(axis=0)],
        "embedding": [dz.T @ merged, dz.sum(axis=0)],
        "head": [d_head],
    }
    return value, grads


@dataclass
class EpochLog:
    phase: str
    epoch: int
    loss: float


def train(
    model: MsmaModel,
    examples: Sequence[TrainExample],
    schedule: TrainSchedule,
    seed: int = 0,
) -> tuple[MsmaModel, list[EpochLog]]:
    """Run the schedule's phases in order on a copy of ``model``.

    Shuffling draws from ``numpy.random.default_rng(seed)``, so identical
    (model, data, schedule, seed) give bit-identical weights.
    """
    if not examples:
        raise EmptyDataset("no training examples")
    model = copy.deepcopy(model)
    pooled = pooled_features(model, examples)
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    if targets.min() < 1 or targets.max() > model.class_count:
        raise ConfigError(f"targets must be class ids in 1..{model.class_count}")
    rng = np.random.default_rng(seed)
    history: list[EpochLog] = []
    n, bs = len(examples), schedule.batch_size
    for phase in schedule.phases:
        params = [p for name in phase.trainable for p in model.params()[name]]
        opt = _Adam(params, phase.learning_rate) if phase.optimizer == "adam" else _Sgd(
            params, phase.learning_rate)
        for epoch in range(1, phase.epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                value, grads = loss_and_grads(model, pooled[idx], targets[idx], phase.loss)
                if not math.isfinite(value):
                    raise DivergedLoss(f"non-finite loss in phase {phase.name!r}, epoch {epoch}")
                total += value * len(idx)
                opt.step([g for name in phase.trainable for g in grads[name]])
            history.append(EpochLog(phase.name, epoch, total / n))
            log.debug("%s epoch %d loss %.6f", phase.name, epoch, total / n)
    model.provenance = {"schedule": schedule.to_json(), "seed": int(seed)}
    return model, history


def predict_examples(model: MsmaModel, examples: Sequence[TrainExample]) -> np.ndarray:
    pooled = pooled_features(model, examples)
    z = (pooled @ model.merge_weight.T + model.merge_bias) @ model.embed_weight.T + model.embed_bias
    return arcloss.predict(model.head, z)


def accuracy(model: MsmaModel, examples: Sequence[TrainExample]) -> float:
    pred = predict_examples(model, examples)
    return float(np.mean(pred == np.array([ex.target for ex in examples])))


# -- relabel --------------------------------------------------------------------------


def relabel(
    model: MsmaModel, instances: Sequence[Instance], pyramid: FeaturePyramid
) -> tuple[list[Instance], list[int]]:
    """Replace each instance's provisional class with the MSMA prediction from its own mask.

    Returns the updated instances (input order) and the ids of instances
    whose mask selects no feature cell; those keep their original label.
    """
    out, flagged = [], []
    for inst in instances:
        try:
            label = msma_forward(model, pyramid, inst.bits).label
        except EmptyMaskRegion:
            flagged.append(inst.instance_id)
            out.append(inst)
            continue
        out.append(inst.with_label(label))
    return out, flagged


# -- persistence ----------------------------------------------------------------------


def model_to_bytes(model: MsmaModel) -> bytes:
    """``S3M1`` container: header, dimension table, float64 LE blocks, provenance JSON."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(model.level_shapes)))
    for shape in model.level_shapes:
        buf.write(struct.pack("<3I", *shape))
    buf.write(struct.pack(
        "<3I", model.merge_weight.shape[0], model.embed_dim, model.class_count))
    buf.write(struct.pack("<2dI", model.head.margin, model.head.scale, int(model.head.monotone_tail)))
    for block in (model.merge_weight, model.merge_bias, model.embed_weight, model.embed_bias,
                  model.head.weights):
        buf.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    prov = json.dumps(model.provenance, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(prov)))
    buf.write(prov)
    return buf.getvalue()


def model_from_bytes(data: bytes, what: str = "model") -> MsmaModel:
    r = _Reader(data, what)
    if r.take(4) != MODEL_MAGIC:
        raise VersionMismatch(f"{what}: not an S3M1 model file")
    version = r.u32()
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{what}: model version {version}, expected {MODEL_VERSION}")
    n_levels = r.u32()
    shapes = tuple(tuple(r.u32(3)) for _ in range(n_levels))
    m_out, d, c = r.u32(3)
    margin, scale, tail = struct.unpack("<2dI", r.take(20))
    stacked = sum(s[0] for s in shapes)

    def block(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    merge_w, merge_b = block(m_out, stacked), block(m_out)
    embed_w, embed_b = block(d, m_out), block(d)
    head_w = block(c, d)
    prov = json.loads(r.take(r.u32()).decode("utf-8"))
    return MsmaModel(shapes, merge_w, merge_b, embed_w, embed_b,
                     ArcHead(head_w, margin=margin, scale=scale, monotone_tail=bool(tail)), prov)


def save_model(model: MsmaModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> MsmaModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read(), str(path))


def model_digest(model: MsmaModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
