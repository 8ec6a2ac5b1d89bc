import copy

import numpy as np
import pytest

from s3kit.arcloss import ArcHead, arc_loss
from s3kit.errors import (
    ConfigError, DivergedLoss, EmptyDataset, EmptyMaskRegion, ShapeMismatch, TruncatedFile,
    VersionMismatch,
)
from s3kit.experiments import desk_model, desk_schedule, examples_from_scene, msma_relabel_gain
from s3kit.metrics import challenge_iou
from s3kit.msma import (
    Phase, TrainExample, TrainSchedule, accuracy, attended_stack, cel_schedule, init_model,
    level_shapes_of, load_model, loss_and_grads, model_digest, model_from_bytes, model_to_bytes,
    msma_forward, reference_schedule, pooled_features, relabel, save_model, train,
)
from s3kit.numeric import FeaturePyramid, finite_diff_grad, resize_mask_nearest
from s3kit.synth import SynthConfig, generate

SHAPES = ((3, 8, 8), (3, 4, 4))


def tiny_pyramid(rng):
    return FeaturePyramid(tuple(rng.normal(size=s) for s in SHAPES))


def blob(rng, side=8):
    m = np.zeros((side, side), bool)
    y, x = rng.integers(0, side - 3, size=2)
    m[y:y + 3, x:x + int(rng.integers(2, 5))] = True
    return m


def test_init_and_validation():
    model = init_model(SHAPES, 3, embed_dim=5, seed=1)
    assert model.merge_weight.shape == (6, 6) and model.embed_weight.shape == (5, 6)
    assert model.head.weights.shape == (3, 5)
    assert np.all(np.abs(model.embed_weight) <= 1 / np.sqrt(6))
    assert np.max(np.abs(model.merge_weight - np.eye(6))) < 0.1
    with pytest.raises(ShapeMismatch):
        model.__class__(SHAPES, np.eye(5), np.zeros(5), model.embed_weight, model.embed_bias,
                        model.head)
    with pytest.raises(ShapeMismatch):
        msma_forward(model, FeaturePyramid((np.zeros((3, 8, 8)),)), np.ones((8, 8)))


def test_identity_and_empty_attention():
    const = FeaturePyramid(tuple(np.full(s, 0.7) for s in SHAPES))
    model = init_model(SHAPES, 3, embed_dim=4)
    stack = attended_stack(model, const, np.ones((8, 8), bool))
    assert np.array_equal(stack, np.full((6, 4, 4), 0.7))
    with pytest.raises(EmptyMaskRegion):
        msma_forward(model, const, np.zeros((8, 8), bool))


def test_mask_locality_is_bitwise():
    model = init_model(SHAPES, 3, embed_dim=4, seed=2)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pyr, mask = tiny_pyramid(rng), blob(rng)
        outside = [resize_mask_nearest(mask, s[1], s[2]) == 0 for s in SHAPES]
        noisy = FeaturePyramid(tuple(
            np.where(out, lv + rng.normal(size=lv.shape) * 100, lv)
            for lv, out in zip(pyr.levels, outside)))
        a, b = msma_forward(model, pyr, mask), msma_forward(model, noisy, mask)
        assert np.array_equal(a.embedding, b.embedding) and a.label == b.label


def test_instances_are_independent():
    scene = generate(SynthConfig(seed=3, n_frames=3))
    model = desk_model(scene)
    fid = scene.gt.frame_ids[0]
    insts = scene.gt.by_frame()[fid]
    together, _ = relabel(model, insts, scene.pyramids[fid])
    alone = [relabel(model, [i], scene.pyramids[fid])[0][0] for i in insts]
    assert together == alone
    assert relabel(model, [], scene.pyramids[fid]) == ([], [])


@pytest.mark.parametrize("loss", ["arc", "ce", "dot_ce"])
def test_end_to_end_gradient(loss):
    rng = np.random.default_rng(4)
    model = init_model(SHAPES, 3, embed_dim=4, margin=0.3, scale=2.0, seed=4)
    pyr, mask, target = tiny_pyramid(rng), blob(rng), 2
    pooled = pooled_features(model, [TrainExample(pyr, mask, target)])
    _, grads = loss_and_grads(model, pooled, np.array([target]), loss)

    def full_loss(m):
        # the per-pixel forward pass, not the pooled shortcut the trainer uses
        e = msma_forward(m, pyr, mask).embedding
        return loss_and_grads_reference(m, e, target, loss)

    for group, names in (("merge", ("merge_weight", "merge_bias")),
                         ("embedding", ("embed_weight", "embed_bias"))):
        for name, analytic in zip(names, grads[group]):
            def f(x, name=name):
                m = copy.deepcopy(model)
                setattr(m, name, x)
                return full_loss(m)
            fd = finite_diff_grad(f, getattr(model, name))
            assert np.max(np.abs(analytic - fd)) <= 1e-3 * np.max(np.abs(fd))


def loss_and_grads_reference(model, e, target, loss):
    from s3kit import arcloss
    if loss == "arc":
        return arcloss.arc_loss(model.head, e, [target])
    if loss == "ce":
        return arcloss.cosine_ce_loss(model.head, e, [target])
    return arcloss.dot_ce_loss(model.head, e, [target])


def separable_examples(n=40, seed=5):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = 1 + k % 2
        levels = []
        for s in SHAPES:
            lv = rng.normal(0, 0.1, size=s)
            lv[label - 1] += 1.0
            levels.append(lv)
        out.append(TrainExample(FeaturePyramid(tuple(levels)), blob(rng), label))
    return out


def test_separable_training_reaches_full_accuracy():
    ex = separable_examples()
    model = init_model(SHAPES, 2, embed_dim=8, scale=16.0, monotone_tail=True, seed=0)
    trained, history = train(model, ex, desk_schedule("arc"), seed=0)
    assert accuracy(trained, ex) == 1.0
    assert [h.phase for h in history][:1] == ["ce_warmup"] and len(history) == 35


def test_schedules():
    s = reference_schedule()
    assert [(p.name, p.loss, p.epochs, p.trainable) for p in s.phases] == [
        ("ce_warmup", "ce", 10, ("head",)),
        ("arc_metric", "arc", 15, ("head",)),
        ("arc_end_to_end", "arc", 5, ("merge", "embedding", "head")),
        ("ce_classifier", "ce", 5, ("head",)),
    ]
    assert [p.learning_rate for p in s.phases] == [1e-5, 1e-5, 1e-7, 1e-5]
    assert all(p.optimizer == "adam" for p in s.phases)
    assert TrainSchedule.from_json(s.to_json()) == s
    assert {p.loss for p in cel_schedule().phases} == {"ce"}
    with pytest.raises(ConfigError):
        Phase("x", "hinge", 1, 0.1)
    with pytest.raises(ConfigError):
        TrainSchedule.from_json({"phases": [{"name": "x"}]})


def test_cel_schedule_runs_and_logs():
    ex = separable_examples(10)
    model = init_model(SHAPES, 2, embed_dim=4, seed=0)
    _, history = train(model, ex, cel_schedule(), seed=0)
    assert len(history) == 35 and all(np.isfinite(h.loss) for h in history)
    with pytest.raises(EmptyDataset):
        train(model, [], cel_schedule())


def test_divergence_is_reported():
    ex = separable_examples(6)
    model = init_model(SHAPES, 2, embed_dim=4, seed=0)
    blowup = TrainSchedule((Phase("boom", "dot_ce", 20, 1e300, "sgd", False,
                                  ("merge", "embedding", "head")),))
    with pytest.raises(DivergedLoss), np.errstate(all="ignore"):
        train(model, ex, blowup, seed=0)


def test_determinism_and_persistence(tmp_path):
    ex = separable_examples(12)
    model = init_model(SHAPES, 2, embed_dim=4, scale=8.0, seed=7)
    a, _ = train(model, ex, desk_schedule("arc"), seed=3)
    b, _ = train(model, ex, desk_schedule("arc"), seed=3)
    c, _ = train(model, ex, desk_schedule("arc"), seed=4)
    assert model_digest(a) == model_digest(b) != model_digest(c)
    assert model_to_bytes(model_from_bytes(model_to_bytes(a))) == model_to_bytes(a)
    path = tmp_path / "m.s3m"
    save_model(a, path)
    back = load_model(path)
    assert back.provenance == {"schedule": desk_schedule("arc").to_json(), "seed": 3}
    assert back.head.scale == 8.0 and back.head.margin == 0.5
    data = path.read_bytes()
    assert data[:4] == b"S3M1"
    (tmp_path / "t.s3m").write_bytes(data[: len(data) // 2])
    with pytest.raises(TruncatedFile):
        load_model(tmp_path / "t.s3m")
    (tmp_path / "v.s3m").write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(VersionMismatch):
        load_model(tmp_path / "v.s3m")


@pytest.fixture(scope="module")
def trained_on_synth():
    scene = generate(SynthConfig(seed=21, n_frames=60, frame_prefix="train"))
    model, _ = train(desk_model(scene), examples_from_scene(scene), desk_schedule("arc"), seed=0)
    return scene, model


def test_relabel_fixed_point_on_training_scene(trained_on_synth):
    scene, model = trained_on_synth
    assert accuracy(model, examples_from_scene(scene)) == 1.0
    for fid, insts in scene.gt.by_frame().items():
        out, flagged = relabel(model, insts, scene.pyramids[fid])
        assert out == insts and flagged == []


def test_relabel_improves_challenge_iou(trained_on_synth, tmp_path):
    _, model = trained_on_synth
    noisy = generate(SynthConfig(seed=22, n_frames=20, label_noise=0.3, mask_noise=0.3))
    before, after = msma_relabel_gain(model, noisy)
    assert after > before
    assert before == challenge_iou(noisy.gt, noisy.pred)
    # identical relabel after a save/load cycle; masks and scores untouched
    save_model(model, tmp_path / "m.s3m")
    again = load_model(tmp_path / "m.s3m")
    for fid, insts in noisy.pred.by_frame().items():
        x, _ = relabel(model, insts, noisy.pyramids[fid])
        y, _ = relabel(again, insts, noisy.pyramids[fid])
        assert x == y
        assert [(i.instance_id, i.mask, i.score) for i in x] == [
            (i.instance_id, i.mask, i.score) for i in insts]


def test_predict_unaffected_by_head_scale():
    ex = separable_examples(8)
    model = init_model(SHAPES, 2, embed_dim=4, seed=0)
    bigger = copy.deepcopy(model)
    bigger.head = ArcHead(model.head.weights * np.array([[5.0], [0.2]]), 0.5, 1.0)
    pooled = pooled_features(model, ex)
    z = pooled @ model.merge_weight.T @ model.embed_weight.T
    assert arc_loss(model.head, z, [1] * 8) == pytest.approx(arc_loss(bigger.head, z, [1] * 8),
                                                             abs=1e-12)
    assert accuracy(model, ex) == accuracy(bigger, ex)
    assert level_shapes_of(ex[0].pyramid) == SHAPES
