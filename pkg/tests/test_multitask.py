import numpy as np
import pytest

from core.errors import ShapeError, ValidationError
from core.multitask import (
    ABSTRACTS,
    PARENT_INDEX,
    RATIO_PRESETS,
    SCENES,
    TAXONOMY,
    AbstractLabel,
    FusionConfig,
    LabelPair,
    LossWeights,
    SceneLabel,
    Strategy,
    build_head,
    fuse_scores,
    gradnorm_update,
    head_backward,
    head_forward,
    joint_prediction,
    marginalize,
    mtl_loss,
    parent_of,
    parse_strategy,
    pretrain_schedule,
)
from core.nn import softmax, softmax_cross_entropy


def test_taxonomy_is_surjective_with_expected_parents():
    assert parent_of("airport") is AbstractLabel.INDOOR
    assert parent_of(SceneLabel.PARK) is AbstractLabel.OUTDOOR
    assert parent_of("metro") is AbstractLabel.TRANSPORTATION
    assert set(PARENT_INDEX) == {0, 1, 2}
    np.testing.assert_array_equal(TAXONOMY.sum(axis=1), np.ones(len(SCENES)))


def test_unknown_scene_is_rejected():
    with pytest.raises(ValueError):
        parent_of("beach")


def test_label_pair_from_scene_is_consistent():
    for scene in SCENES:
        pair = LabelPair.from_scene(scene)
        assert pair.scene_index == scene.code
        assert pair.abstract_index == parent_of(scene).code


def test_marginalize_sums_children():
    p10 = np.full((1, 10), 0.1)
    np.testing.assert_allclose(marginalize(p10), [[0.3, 0.4, 0.3]])


def test_parse_strategy_rejects_unknown():
    assert parse_strategy("sequential_mtl") is Strategy.SEQUENTIAL_MTL
    with pytest.raises(ValidationError):
        parse_strategy("joint")


def test_ratio_presets_and_parsing():
    assert RATIO_PRESETS["1:5"] == LossWeights(1.0, 5.0)
    assert LossWeights.from_ratio("1:3") == LossWeights(1.0, 3.0)
    with pytest.raises(ValidationError):
        LossWeights.from_ratio("one to five")
    with pytest.raises(ValidationError):
        LossWeights(0.0, 0.0)


def test_head_slot_sizes_differ_by_extra_hidden_layers():
    conventional = sum(s.size for s in build_head(Strategy.CONVENTIONAL_MTL, 128).slots)
    extended = sum(s.size for s in build_head(Strategy.EXTENDED_MTL, 128).slots)
    assert extended - conventional == 2 * (100 * 100 + 100)


def test_sequential_head_feeds_abstract_logits_forward():
    spec = build_head(Strategy.SEQUENTIAL_MTL, 8, hidden=5)
    assert spec.slot("head.out10").in_dim == 5 + 3
    assert spec.slot("head.out3").in_dim == 5


def _head_tensors(spec, rng):
    tensors = {}
    for slot in spec.slots:
        tensors[f"{slot.name}.weight"] = rng.normal(size=(slot.out_dim, slot.in_dim))
        tensors[f"{slot.name}.bias"] = rng.normal(size=slot.out_dim)
    return tensors


def test_single_task_head_has_no_abstract_output(rng):
    spec = build_head(Strategy.SINGLE_TASK, 6, hidden=4)
    logits10, logits3, _ = head_forward(spec, _head_tensors(spec, rng), rng.normal(size=(3, 6)))
    assert logits10.shape == (3, 10)
    assert logits3 is None


def test_sequential_detach_blocks_gradient_through_abstract_logits(rng):
    spec = build_head(Strategy.SEQUENTIAL_MTL, 6, hidden=4)
    tensors = _head_tensors(spec, rng)
    z = rng.normal(size=(3, 6))
    d10 = rng.normal(size=(3, 10))
    zeros3 = np.zeros((3, 3))

    _, _, attached = head_forward(spec, tensors, z, detach=False)
    _, _, detached = head_forward(spec, tensors, z, detach=True)
    _, grads_attached = head_backward(d10, zeros3, attached)
    _, grads_detached = head_backward(d10, zeros3, detached)

    assert np.any(grads_attached["head.out3.weight"] != 0)
    np.testing.assert_array_equal(grads_detached["head.out3.weight"], 0.0)


def test_mtl_loss_is_weighted_sum_of_task_losses(rng):
    logits10, logits3 = rng.normal(size=(4, 10)), rng.normal(size=(4, 3))
    t10 = np.eye(10)[rng.integers(0, 10, 4)]
    t3 = np.eye(3)[rng.integers(0, 3, 4)]

    result = mtl_loss(logits10, logits3, t10, t3, LossWeights(1.0, 5.0))

    ce10, g10 = softmax_cross_entropy(logits10, t10)
    ce3, g3 = softmax_cross_entropy(logits3, t3)
    assert result.loss == pytest.approx(ce3 + 5.0 * ce10, abs=1e-10)
    np.testing.assert_allclose(result.grad10, 5.0 * g10, atol=1e-12)
    np.testing.assert_allclose(result.grad3, g3, atol=1e-12)


def test_gradnorm_preserves_weight_sum():
    updated = gradnorm_update(LossWeights(0.7, 1.3), (0.9, 1.8), (1.1, 2.3), (0.4, 2.5))
    assert updated.w3 + updated.w10 == pytest.approx(2.0, abs=1e-15)


def test_gradnorm_symmetric_fixed_point():
    # equal weights, equal norms and equal training rates: nothing to rebalance
    updated = gradnorm_update(LossWeights(1.0, 1.0), (0.5, 0.5), (1.0, 1.0), (2.0, 2.0))
    assert updated == LossWeights(1.0, 1.0)


def test_gradnorm_shrinks_dominant_task_weight():
    # same training rates, task 10 has the larger gradient norm
    updated = gradnorm_update(LossWeights(1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 3.0))
    assert updated.w10 < 1.0
    assert updated.w3 > 1.0


def test_gradnorm_is_symmetric_under_relabeling(rng):
    for _ in range(500):
        w = rng.uniform(0.05, 1.95)
        now, initial, norms = (tuple(rng.uniform(0.1, 3.0, size=2)) for _ in range(3))

        forward = gradnorm_update(LossWeights(w, 2.0 - w), now, initial, norms)
        swapped = gradnorm_update(LossWeights(2.0 - w, w), now[::-1], initial[::-1], norms[::-1])

        assert forward.w3 == swapped.w10
        assert forward.w10 == swapped.w3


def test_gradnorm_rejects_non_positive_inputs():
    with pytest.raises(ValidationError):
        gradnorm_update(LossWeights(), (0.0, 1.0), (1.0, 1.0), (1.0, 1.0))


def test_fusion_with_uniform_parent_is_identity(rng):
    p10 = softmax(rng.normal(size=(5, 10)))
    p3 = np.full((5, 3), 1 / 3)
    np.testing.assert_allclose(joint_prediction(p10, p3, FusionConfig(True, 1.0)), p10, atol=1e-12)


def test_fusion_with_one_hot_parent_restricts_support(rng):
    p10 = softmax(rng.normal(size=(2, 10)))
    p3 = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])

    fused = joint_prediction(p10, p3, FusionConfig(True, 1.0))

    for row, parent in enumerate((2, 0)):
        outside = PARENT_INDEX != parent
        assert np.all(fused[row, outside] == 0.0)
        expected = p10[row, ~outside] / p10[row, ~outside].sum()
        np.testing.assert_allclose(fused[row, ~outside], expected)


def test_fusion_worked_example():
    p10 = np.full((1, 10), 0.1)
    p3 = np.array([[0.5, 0.25, 0.25]])

    fused = joint_prediction(p10, p3, FusionConfig(True, 1.0))

    # indoor children: 0.1 * 0.5, the other seven: 0.1 * 0.25; total 0.325
    expected = np.where(PARENT_INDEX == 0, 0.05, 0.025) / 0.325
    np.testing.assert_allclose(fused[0], expected, atol=1e-9)


def test_fusion_disabled_or_beta_zero_returns_copy(rng):
    p10 = softmax(rng.normal(size=(3, 10)))
    p3 = softmax(rng.normal(size=(3, 3)))
    for cfg in (FusionConfig(False, 2.0), FusionConfig(True, 0.0)):
        out = joint_prediction(p10, p3, cfg)
        np.testing.assert_array_equal(out, p10)
        assert out is not p10


def test_fusion_falls_back_when_parent_mass_vanishes():
    p10 = np.zeros((1, 10))
    p10[0, PARENT_INDEX == 0] = 1 / 3
    p3 = np.array([[0.0, 0.5, 0.5]])

    fused, fallback = fuse_scores(p10, p3, 1.0)

    assert fallback.tolist() == [True]
    np.testing.assert_array_equal(fused, p10)


def test_fusion_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        joint_prediction(np.full((1, 10), 0.2), np.full((1, 3), 1 / 3), FusionConfig(True))
    with pytest.raises(ShapeError):
        joint_prediction(np.full((1, 5), 0.2), np.full((1, 3), 1 / 3), FusionConfig(True))
    with pytest.raises(ValidationError):
        FusionConfig(True, -1.0)


def test_pretrain_schedule_split():
    plan = pretrain_schedule(800)
    assert (plan.phase1_epochs, plan.phase2_epochs) == (200, 600)
    assert plan.phase_of(199) == 1 and plan.phase_of(200) == 2
    assert plan.phase1_weights == LossWeights(1.0, 0.0)
    assert plan.phase2_weights == LossWeights(0.0, 1.0)


def test_pretrain_schedule_restarts_epoch_count_in_phase_two():
    plan = pretrain_schedule(12, split=0.25)
    assert [plan.schedule_epoch(e) for e in range(12)] == [0, 1, 2, 0, 1, 2, 3, 4, 5, 6, 7, 8]


def test_pretrain_schedule_rejects_empty_phase():
    with pytest.raises(ValidationError):
        pretrain_schedule(1)
    with pytest.raises(ValidationError):
        pretrain_schedule(10, split=1.0)


def test_abstract_names():
    assert [a.value for a in ABSTRACTS] == ["indoor", "outdoor", "transportation"]
