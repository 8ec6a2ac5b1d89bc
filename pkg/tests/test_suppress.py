import numpy as np
import pytest

from s3kit.datamodel import Instance
from s3kit.errors import ConfigError, SizeMismatch
from s3kit.maskcore import pairwise_iou
from s3kit.suppress import SuppressConfig, cross_class_nms, standard_nms, suppress_frames

from oracles import greedy_nms
from scenes import jitter, random_mask


def inst(i, label, score, mask, frame="f"):
    return Instance.from_bits(frame, i, label, score, mask)


def random_frame(seed, side=16, max_masks=8):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, max_masks + 1))
    out = []
    for i in range(n):
        if out and rng.random() < 0.5:
            m = jitter(rng, out[int(rng.integers(len(out)))].bits, 0.1)
        else:
            m = random_mask(rng, side, side)
        out.append(inst(i, int(rng.integers(1, 4)), float(rng.choice([0.2, 0.5, 0.5, 0.8, 0.95])), m))
    return out


def bar(y0, y1, x0, x1, side=8):
    m = np.zeros((side, side), bool)
    m[y0:y1, x0:x1] = True
    return m


def test_defaults():
    cfg = SuppressConfig()
    assert (cfg.score_threshold, cfg.top_k, cfg.iou_threshold) == (0.0, 5, 0.5)
    for bad in ({"top_k": 0}, {"iou_threshold": 1.5}, {"score_threshold": -0.1}):
        with pytest.raises(ConfigError):
            SuppressConfig(**bad)


def test_cross_class_duplicate():
    m = bar(1, 5, 1, 5)
    a, b = inst(0, 2, 0.9, m), inst(1, 5, 0.8, m)
    assert cross_class_nms([a, b]) == [a]
    assert standard_nms([a, b]) == [a, b]
    assert cross_class_nms([]) == []
    assert standard_nms([a]) == [a]


def test_same_class_overlap_keeps_higher_score():
    a, b = inst(0, 1, 0.6, bar(1, 5, 1, 5)), inst(1, 1, 0.7, bar(1, 5, 1, 6))
    assert standard_nms([a, b]) == [b]


def test_mixed_sizes_rejected():
    with pytest.raises(SizeMismatch):
        cross_class_nms([inst(0, 1, 0.5, np.ones((3, 3))), inst(1, 1, 0.5, np.ones((4, 3)))])


def test_against_brute_force_and_invariants():
    cfg = SuppressConfig()
    for seed in range(400):
        frame = random_frame(seed)
        out = cross_class_nms(frame, cfg)
        assert out == greedy_nms(frame, 0.0, 5, 0.5)
        assert standard_nms(frame, cfg) == greedy_nms(frame, 0.0, 5, 0.5, across_classes=False)
        assert cross_class_nms(out, cfg) == out
        assert len(out) <= 5 and all(o in frame for o in out)
        if len(out) > 1:
            iou = pairwise_iou([o.bits for o in out], [o.bits for o in out])
            assert iou[~np.eye(len(out), dtype=bool)].max() <= 0.5


def test_cross_subset_of_standard_when_classes_uniform_or_distinct():
    wide = SuppressConfig(top_k=100)
    for seed in range(200):
        frame = random_frame(seed)
        same = [i.with_label(1) for i in frame]
        assert set(cross_class_nms(same, wide)) <= set(standard_nms(same, wide))
        distinct = [i.with_label(k + 1) for k, i in enumerate(frame)]
        assert set(cross_class_nms(distinct, wide)) <= set(standard_nms(distinct, wide))


def test_cross_not_always_subset_of_standard():
    # A suppresses B across classes, so C (same class as B, overlapping only B)
    # survives cross-class NMS; per-class NMS keeps B, which then removes C.
    a = inst(0, 1, 0.9, bar(0, 4, 0, 4))
    b = inst(1, 2, 0.8, bar(0, 4, 1, 5))
    c = inst(2, 2, 0.7, bar(0, 4, 2, 6))
    wide = SuppressConfig(top_k=10)
    assert cross_class_nms([a, b, c], wide) == [a, c]
    assert standard_nms([a, b, c], wide) == [a, b]


def test_score_threshold_and_top_k():
    frame = [inst(i, 1, s, bar(0, 1, i, i + 1)) for i, s in enumerate([0.1, 0.4, 0.9, 0.6])]
    out = cross_class_nms(frame, SuppressConfig(score_threshold=0.4, top_k=2))
    assert [o.instance_id for o in out] == [2, 3]


def test_suppress_frames_is_per_frame():
    m = bar(1, 5, 1, 5)
    frame_a = [inst(0, 1, 0.9, m, "a"), inst(1, 2, 0.8, m, "a")]
    frame_b = [inst(0, 3, 0.5, m, "b")]
    out = suppress_frames(frame_a + frame_b, SuppressConfig())
    assert [(o.frame_id, o.instance_id) for o in out] == [("a", 0), ("b", 0)]
    assert len(suppress_frames(frame_a + frame_b, SuppressConfig(), "standard")) == 3
