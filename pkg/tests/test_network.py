import logging

import numpy as np
import pytest

from core.errors import CheckpointShapeError, ValidationError
from core.multitask import TASK10_SLOTS, Strategy
from core.network import ArchitectureConfig, ModelGraph, count_params

SMALL = ArchitectureConfig(widths=(4, 8), hidden_units=6)


def _graph(strategy=Strategy.EXTENDED_MTL, seed=0, arch=SMALL):
    return ModelGraph(arch, strategy, np.random.default_rng(seed))


def test_default_model_size():
    graph = _graph(arch=ArchitectureConfig())
    assert count_params(graph) == 413_345
    assert count_params(graph) <= 700_000


def test_extended_head_adds_two_hidden_layers():
    arch = ArchitectureConfig()
    delta = count_params(_graph(Strategy.EXTENDED_MTL, arch=arch)) - count_params(
        _graph(Strategy.CONVENTIONAL_MTL, arch=arch)
    )
    assert delta == 20_200


def test_slot_breakdown_sums_to_count():
    graph = _graph()
    breakdown = graph.slot_breakdown()
    assert sum(breakdown.values()) == count_params(graph)
    assert "block0.cbam" in breakdown and "head.hidden3" in breakdown


@pytest.mark.parametrize("strategy", list(Strategy))
def test_forward_shapes_per_strategy(rng, strategy):
    fp = _graph(strategy).forward(rng.normal(size=(3, 1, 8, 8)))
    assert fp.logits10.shape == (3, 10)
    assert (fp.logits3 is None) == (strategy is Strategy.SINGLE_TASK)
    assert fp.features.shape == (3, 8)


def test_taps_only_kept_on_request(rng):
    graph = _graph()
    x = rng.normal(size=(2, 1, 8, 8))
    assert graph.forward(x).taps == [None, None]
    taps = graph.forward(x, keep_taps=True).taps
    assert taps[0].c.shape == (2, 4, 8, 8)
    assert taps[1].c.shape == (2, 8, 4, 4)


def test_train_forward_updates_running_stats(rng):
    graph = _graph()
    before = graph.running[0].mean.copy()
    graph.forward(rng.normal(loc=3.0, size=(2, 1, 8, 8)))
    assert not np.array_equal(graph.running[0].mean, before)

    frozen = graph.running[0].mean.copy()
    graph.forward(rng.normal(size=(2, 1, 8, 8)), mode="infer")
    np.testing.assert_array_equal(graph.running[0].mean, frozen)


def test_backward_accumulates_until_zeroed(rng):
    graph = _graph()
    x = rng.normal(size=(2, 1, 8, 8))
    d10, d3 = rng.normal(size=(2, 10)), rng.normal(size=(2, 3))

    graph.backward(graph.forward(x), d10, d3)
    once = {name: p.grad.copy() for name, p in graph.params.items()}
    graph.backward(graph.forward(x), d10, d3)

    for name, param in graph.params.items():
        np.testing.assert_allclose(param.grad, 2 * once[name], rtol=1e-9, atol=1e-12)
    assert np.any(once["block0.conv.weight"] != 0)

    graph.zero_grad()
    assert not any(p.grad.any() for p in graph.params.values())


def test_shared_grad_norms_are_per_task(rng):
    graph = _graph()
    fp = graph.forward(rng.normal(size=(2, 1, 8, 8)))

    norm3, norm10 = graph.shared_grad_norms(fp, rng.normal(size=(2, 10)), np.zeros((2, 3)))

    assert norm3 == 0.0
    assert norm10 > 0.0


def test_reinit_slots_resets_task10_head_only():
    graph = _graph(Strategy.PRETRAIN)
    for param in graph.params.values():
        param.velocity[...] = 1.0
    shared = graph.params["head.shared.weight"].value.copy()
    out10 = graph.params["head.out10.weight"].value.copy()

    graph.reinit_slots(TASK10_SLOTS, np.random.default_rng(99))

    assert not np.array_equal(graph.params["head.out10.weight"].value, out10)
    np.testing.assert_array_equal(graph.params["head.shared.weight"].value, shared)
    for name in ("head.hidden10.weight", "head.out10.bias"):
        assert not graph.params[name].velocity.any()
    assert graph.params["head.out3.weight"].velocity.all()


def test_tensor_table_restores_identical_predictions(rng):
    source = _graph(seed=1)
    source.forward(rng.normal(size=(4, 1, 8, 8)))
    target = _graph(seed=2)
    x = rng.normal(size=(2, 1, 8, 8))

    target.load_tensor_table(source.tensor_table())

    np.testing.assert_array_equal(target.forward(x, "infer").logits10, source.forward(x, "infer").logits10)
    table = source.tensor_table()
    assert "head.out3.weight@velocity" in table
    assert "block1.bn.running_var" in table


def test_cross_strategy_load_warns_and_keeps_shared_slots(caplog):
    source = _graph(Strategy.EXTENDED_MTL, seed=1)
    target = _graph(Strategy.CONVENTIONAL_MTL, seed=2)

    with caplog.at_level(logging.WARNING, logger="amfm-asc"):
        target.load_tensor_table(source.tensor_table())

    assert "head.hidden10" in caplog.text
    np.testing.assert_array_equal(
        target.params["block0.conv.weight"].value, source.params["block0.conv.weight"].value
    )


def test_shape_mismatch_is_fatal():
    table = _graph().tensor_table()
    table["block0.conv.weight"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(CheckpointShapeError):
        _graph().load_tensor_table(table)


def test_architecture_validation():
    with pytest.raises(ValidationError):
        ArchitectureConfig(spatial_kernel=4)
    with pytest.raises(ValidationError):
        ArchitectureConfig(block_kind="transformer")
    with pytest.raises(ValidationError):
        ArchitectureConfig(widths=())


def test_plain_blocks_have_no_attention_slots():
    graph = _graph(arch=ArchitectureConfig(widths=(4,), block_kind="leaky_relu"))
    assert not any(".cbam." in name for name in graph.params)
    assert graph.params["block0.conv.weight"].value.shape == (4, 1, 3, 3)
