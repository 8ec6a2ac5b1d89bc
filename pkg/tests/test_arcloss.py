import math

import numpy as np
import pytest

from s3kit.arcloss import (
    ArcHead, arc_loss, arc_loss_grad, cos_angles, cosine_ce_grad, cosine_ce_loss, dot_ce_grad,
    dot_ce_loss, predict, softmax_ce_grad, softmax_ce_loss,
)
from s3kit.errors import BadTarget, ConfigError, ShapeMismatch, SingularAngle, ZeroVector
from s3kit.numeric import finite_diff_grad


def case(seed, n=None, tail=False, margins=(0.0, 0.3, 0.5)):
    rng = np.random.default_rng(seed)
    d, c = int(rng.integers(2, 9)), int(rng.integers(2, 6))
    n = n or int(rng.integers(1, 4))
    head = ArcHead(rng.normal(size=(c, d)), margin=float(rng.choice(margins)),
                   scale=float(rng.choice([1.0, 4.0])), monotone_tail=tail)
    return head, rng.normal(size=(n, d)), rng.integers(1, c + 1, size=n)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_head_validation():
    with pytest.raises(ConfigError):
        ArcHead(np.ones((1, 3)))
    with pytest.raises(ZeroVector):
        ArcHead(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ConfigError):
        ArcHead(np.eye(2), margin=2.0)
    with pytest.raises(ConfigError):
        ArcHead(np.eye(2), scale=0.0)
    head = ArcHead(np.eye(3))
    with pytest.raises(BadTarget):
        arc_loss(head, np.ones((2, 3)), [1, 4])
    with pytest.raises(BadTarget):
        arc_loss(head, np.ones((2, 3)), [1])
    with pytest.raises(ShapeMismatch):
        arc_loss(head, np.ones((2, 4)), [1, 2])


def test_cos_examples():
    head = ArcHead(np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]))
    c = cos_angles(head, np.array([5.0, 0.0, 0.0]))
    assert c[0] == 1 - 1e-7 and c[1] == 0.0
    rng = np.random.default_rng(0)
    w, e = rng.normal(size=(3, 4)), rng.normal(size=4)
    got = cos_angles(ArcHead(w), e)
    want = [w[k] @ e / (np.linalg.norm(w[k]) * np.linalg.norm(e)) for k in range(3)]
    assert np.max(np.abs(got - want)) <= 1e-12


def test_two_class_aligned_example():
    head = ArcHead(np.array([[1.0, 0.0], [0.0, 1.0]]), margin=0.5, scale=1.0)
    loss = arc_loss(head, np.array([3.0, 0.0]), [1])
    literal = -math.log(math.exp(math.cos(0.5)) / (math.exp(math.cos(0.5)) + math.exp(0.0)))
    clamped = math.log1p(math.exp(-math.cos(math.acos(1 - 1e-7) + 0.5)))
    assert literal == pytest.approx(0.3476854448672507, abs=1e-15)
    assert loss == pytest.approx(clamped, abs=1e-15)
    # the cosine clamp moves the aligned case off theta = 0 by about 4.5e-4 rad
    assert abs(loss - literal) < 1e-4
    assert arc_loss(head, np.array([30.0, 0.0]), [1]) == pytest.approx(loss, abs=1e-12)


def test_zero_margin_is_cosine_cross_entropy():
    for seed in range(100):
        head, e, t = case(seed)
        head = ArcHead(head.weights, margin=0.0, scale=1.0)
        assert abs(arc_loss(head, e, t) - softmax_ce_loss(cos_angles(head, e), t)) <= 1e-12
        dw, de = arc_loss_grad(head, e, t)
        cw, ce = cosine_ce_grad(head, e, t)
        assert np.max(np.abs(dw - cw)) <= 1e-12 and np.max(np.abs(de - ce)) <= 1e-12


@pytest.mark.parametrize("tail", [False, True])
def test_gradients_match_finite_differences(tail):
    for seed in range(100):
        head, e, t = case(seed, tail=tail)
        dw, de = arc_loss_grad(head, e, t)
        fw = finite_diff_grad(lambda w: arc_loss(ArcHead(w, head.margin, head.scale, tail), e, t),
                              head.weights)
        fe = finite_diff_grad(lambda x: arc_loss(head, x, t), e)
        assert rel_err(dw, fw) <= 1e-4 and rel_err(de, fe) <= 1e-4


def test_tail_gradient_is_exercised():
    # target pointing away from its class weight: theta_t > pi - m
    # the other class weight is orthogonal to every probe, so only theta_t moves
    head = ArcHead(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), margin=0.5, monotone_tail=True)
    e, t = np.array([[-1.0, 0.05, 0.0]]), [1]
    _, de = arc_loss_grad(head, e, t)
    fe = finite_diff_grad(lambda x: arc_loss(head, x, t), e)
    assert rel_err(de, fe) <= 1e-6
    # the literal formula rewards moving further away there; the tail does not
    near, far = np.array([[-1.0, 0.3, 0.0]]), np.array([[-1.0, 0.05, 0.0]])
    literal = ArcHead(head.weights, margin=0.5)
    assert arc_loss(literal, far, t) < arc_loss(literal, near, t)
    assert arc_loss(head, far, t) > arc_loss(head, near, t)


def test_embedding_gradient_orthogonal_to_embedding():
    for seed in range(100):
        head, e, t = case(seed, n=1)
        _, de = arc_loss_grad(head, e, t)
        assert abs(de[0] @ e[0]) < 1e-9 * np.linalg.norm(de) * np.linalg.norm(e)


def test_singular_target_angle():
    head = ArcHead(np.eye(2), margin=0.3)
    with pytest.raises(SingularAngle):
        arc_loss_grad(head, np.array([[1.0, 1e-9]]), [1])


def test_scale_invariance():
    for seed in range(50):
        head, e, t = case(seed)
        ref, ref_pred = arc_loss(head, e, t), predict(head, e)
        for k in (1e-3, 3.7, 1e3):
            e2 = e.copy()
            e2[0] *= k
            w2 = head.weights.copy()
            w2[seed % head.class_count] *= k
            other = ArcHead(w2, head.margin, head.scale)
            assert abs(arc_loss(head, e2, t) - ref) <= 1e-9
            assert abs(arc_loss(other, e, t) - ref) <= 1e-9
            assert np.array_equal(predict(other, e2), ref_pred)


def test_loss_monotone_in_margin():
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 100:
        head, e, t = case(int(rng.integers(1 << 30)), n=1)
        theta = math.acos(cos_angles(head, e)[0][t[0] - 1])
        if not 0 < theta < math.pi / 2:
            continue
        losses = [arc_loss(ArcHead(head.weights, m, head.scale), e, t) for m in (0.0, 0.2, 0.4, 0.6)]
        assert all(a <= b for a, b in zip(losses, losses[1:]))
        checked += 1


def test_one_small_step_decreases_loss():
    for seed in range(50):
        head, e, t = case(seed, n=1, tail=True)
        dw, de = arc_loss_grad(head, e, t)
        lr = 1e-4
        stepped = ArcHead(head.weights - lr * dw, head.margin, head.scale, True)
        assert arc_loss(stepped, e - lr * de, t) < arc_loss(head, e, t)


def test_plain_cross_entropy():
    assert softmax_ce_loss(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4), abs=1e-15)
    assert softmax_ce_loss(np.array([[0.0, 60.0]]), [2]) < 1e-20
    rng = np.random.default_rng(1)
    z, t = rng.normal(size=(3, 5)), np.array([1, 5, 2])
    g = softmax_ce_grad(z, t)
    assert rel_err(g, finite_diff_grad(lambda x: softmax_ce_loss(x, t), z)) <= 1e-6
    head, e, t = case(2, n=3)
    dw, de = dot_ce_grad(head, e, t)
    assert rel_err(dw, finite_diff_grad(
        lambda w: dot_ce_loss(ArcHead(w), e, t), head.weights)) <= 1e-6
    assert rel_err(de, finite_diff_grad(lambda x: dot_ce_loss(head, x, t), e)) <= 1e-6
    cw, ce = cosine_ce_grad(head, e, t)
    assert rel_err(ce, finite_diff_grad(lambda x: cosine_ce_loss(head, x, t), e)) <= 1e-6


def test_predict():
    w = np.array([[1.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])
    assert predict(ArcHead(w), np.array([0.0, 0.2])) == 2
    assert predict(ArcHead(w), np.array([1.0, 1.0])) == 1  # tie goes to the lower id
    rng = np.random.default_rng(3)
    head, e, _ = case(3, n=20)
    got = predict(head, e)
    for k in range(20):
        angles = [math.acos(np.clip(e[k] @ row / np.linalg.norm(e[k]) / np.linalg.norm(row), -1, 1))
                  for row in head.weights]
        assert got[k] == int(np.argmin(angles)) + 1
    assert predict(head, e * rng.uniform(0.1, 10, size=(20, 1))).tolist() == got.tolist()
