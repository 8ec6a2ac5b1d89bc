"""Additive angular-margin (arc) softmax loss and plain cross-entropy.

Class ids are 1-based (``1..C``); row ``k`` of the head weight matrix holds
class ``k + 1``. Embeddings are passed as ``[N, D]`` arrays (a single ``[D]``
vector is also accepted) with a matching sequence of target ids.

Per sample with target ``t``::

    logit_j = s * cos(theta_j)          (j != t)
    logit_t = s * cos(theta_t + m)
    loss    = -log softmax(logits)[t]

and the batch loss is the mean over samples.

``cos(theta + m)`` stops decreasing once ``theta > pi - m``, so training can
reward pushing a class weight *away* from its samples. ``monotone_tail=True``
replaces the target logit there with ``cos(theta) - (1 - cos m)``, which
joins continuously and keeps falling all the way to ``theta = pi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadTarget, ConfigError, ShapeMismatch, SingularAngle, ZeroVector

COS_CLAMP = 1e-7
SINGULAR_GUARD = 1e-6


@dataclass
class ArcHead:
    weights: np.ndarray
    margin: float = 0.5
    scale: float = 1.0
    monotone_tail: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 2:
            raise ConfigError(f"head weights must be [C >= 2, D], got {self.weights.shape}")
        if np.any(np.linalg.norm(self.weights, axis=1) <= 1e-12):
            raise ZeroVector("every class weight row must be nonzero")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ConfigError(f"margin {self.margin} outside [0, pi/2)")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= 1e-12):
        raise ZeroVector(f"{what} has a zero-norm row")
    return x / norms[:, None], norms


def _batch(head: ArcHead, embeddings, targets=None):
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[None]
    if e.ndim != 2 or e.shape[1] != head.dim:
        raise ShapeMismatch(f"embeddings {e.shape} vs head dimension {head.dim}")
    if targets is None:
        return e, None
    t = np.atleast_1d(np.asarray(targets))
    if e.shape[0] == 0:
        raise BadTarget("empty batch")
    if t.shape != (e.shape[0],):
        raise BadTarget(f"{t.shape[0]} targets for {e.shape[0]} embeddings")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 1 or t.max() > head.class_count:
        raise BadTarget(f"targets must be class ids in 1..{head.class_count}")
    return e, t.astype(np.int64) - 1


def _raw_cosines(head: ArcHead, e: np.ndarray):
    u, e_norm = _unit_rows(e, "embedding batch")
    v, w_norm = _unit_rows(head.weights, "head weights")
    return u @ v.T, u, e_norm, v, w_norm


def cos_angles(head: ArcHead, embedding) -> np.ndarray:
    """Clamped cosines between each embedding and every class weight row."""
    e, _ = _batch(head, embedding)
    c = np.clip(_raw_cosines(head, e)[0], -1 + COS_CLAMP, 1 - COS_CLAMP)
    return c[0] if np.ndim(embedding) == 1 else c


def _in_tail(head: ArcHead, theta_t: np.ndarray) -> np.ndarray:
    if not head.monotone_tail:
        return np.zeros(theta_t.shape, dtype=bool)
    return theta_t > math.pi - head.margin


def _arc_logits(head: ArcHead, cos: np.ndarray, t: np.ndarray):
    rows = np.arange(len(t))
    theta_t = np.arccos(cos[rows, t])
    logits = head.scale * cos.copy()
    target = np.cos(theta_t + head.margin)
    tail = _in_tail(head, theta_t)
    target[tail] = cos[rows, t][tail] - (1.0 - math.cos(head.margin))
    logits[rows, t] = head.scale * target
    return logits, theta_t


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def arc_loss(head: ArcHead, embeddings, targets) -> float:
    e, t = _batch(head, embeddings, targets)
    cos = np.clip(_raw_cosines(head, e)[0], -1 + COS_CLAMP, 1 - COS_CLAMP)
    logits, _ = _arc_logits(head, cos, t)
    return float(-_log_softmax(logits)[np.arange(len(t)), t].mean())


def arc_loss_grad(head: ArcHead, embeddings, targets):
    """Analytic ``(dL/dW [C, D], dL/dE [N, D])`` of :func:`arc_loss`.

    Raises SingularAngle when a target cosine sits within 1e-6 of +-1, where
    the arccos derivative blows up. Non-target cosines caught by the clamp get
    zero gradient, matching the clamped forward pass.
    """
    e, t = _batch(head, embeddings, targets)
    raw, u, e_norm, v, w_norm = _raw_cosines(head, e)
    n = len(t)
    rows = np.arange(n)
    if np.any(np.abs(raw[rows, t]) > 1 - SINGULAR_GUARD):
        raise SingularAngle("target cosine too close to +-1 for a stable gradient")
    cos = np.clip(raw, -1 + COS_CLAMP, 1 - COS_CLAMP)
    logits, theta_t = _arc_logits(head, cos, t)
    p = np.exp(_log_softmax(logits))
    dz = p
    dz[rows, t] -= 1.0
    dz /= n
    # dL/dcos: the target logit goes through arccos then cos(. + m)
    g = head.scale * dz
    g[cos != raw] = 0.0
    d_target = np.sin(theta_t + head.margin) / np.sqrt(1.0 - cos[rows, t] ** 2)
    d_target[_in_tail(head, theta_t)] = 1.0
    g[rows, t] = dz[rows, t] * head.scale * d_target
    return _through_cosines(g, raw, u, e_norm, v, w_norm)


def _through_cosines(g, raw, u, e_norm, v, w_norm):
    """Chain ``dL/dcos [N, C]`` back through both row normalisations."""
    gc = g * raw
    d_e = (g @ v - gc.sum(axis=1)[:, None] * u) / e_norm[:, None]
    d_w = (g.T @ u - gc.sum(axis=0)[:, None] * v) / w_norm[:, None]
    return d_w, d_e


def cosine_ce_loss(head: ArcHead, embeddings, targets) -> float:
    """Cross-entropy over margin-free cosine logits ``s * cos(theta_j)``."""
    e, t = _batch(head, embeddings, targets)
    cos = np.clip(_raw_cosines(head, e)[0], -1 + COS_CLAMP, 1 - COS_CLAMP)
    return softmax_ce_loss(head.scale * cos, t + 1)


def cosine_ce_grad(head: ArcHead, embeddings, targets):
    e, t = _batch(head, embeddings, targets)
    raw, u, e_norm, v, w_norm = _raw_cosines(head, e)
    cos = np.clip(raw, -1 + COS_CLAMP, 1 - COS_CLAMP)
    g = head.scale * softmax_ce_grad(head.scale * cos, t + 1)
    g[cos != raw] = 0.0
    return _through_cosines(g, raw, u, e_norm, v, w_norm)


def softmax_ce_loss(logits, targets) -> float:
    """Mean cross-entropy of raw logits ``[N, C]`` against 1-based targets."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_1d(np.asarray(targets)).astype(np.int64) - 1
    if t.shape != (z.shape[0],) or t.min() < 0 or t.max() >= z.shape[1]:
        raise BadTarget("targets do not fit the logits")
    return float(-_log_softmax(z)[np.arange(len(t)), t].mean())


def softmax_ce_grad(logits, targets) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_1d(np.asarray(targets)).astype(np.int64) - 1
    if t.shape != (z.shape[0],) or t.min() < 0 or t.max() >= z.shape[1]:
        raise BadTarget("targets do not fit the logits")
    g = np.exp(_log_softmax(z))
    g[np.arange(len(t)), t] -= 1.0
    return g / len(t)


def dot_ce_loss(head: ArcHead, embeddings, targets) -> float:
    """Cross-entropy over plain dot-product logits ``E @ W.T`` (magnitudes matter)."""
    e, t = _batch(head, embeddings, targets)
    return softmax_ce_loss(e @ head.weights.T, t + 1)


def dot_ce_grad(head: ArcHead, embeddings, targets):
    e, t = _batch(head, embeddings, targets)
    dz = softmax_ce_grad(e @ head.weights.T, t + 1)
    return dz.T @ e, dz @ head.weights


def predict(head: ArcHead, embedding):
    """Class id of the smallest angle; ties go to the lower id."""
    e, _ = _batch(head, embedding)
    c = np.clip(_raw_cosines(head, e)[0], -1 + COS_CLAMP, 1 - COS_CLAMP)
    ids = np.argmax(c, axis=1) + 1
    return int(ids[0]) if np.ndim(embedding) == 1 else ids
