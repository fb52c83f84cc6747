import numpy as np
import pytest

from core.errors import NumericError, ValidationError
from core.models import Param
from core.optim import restart_position, sgd_step, warm_restart_lr
from core.runconfig import TrainConfig


def test_sgd_momentum_accumulates_velocity():
    param = Param("w", np.array([1.0, 2.0]))

    param.grad[:] = 0.5
    sgd_step([param], lr=0.1, momentum=0.9)
    np.testing.assert_allclose(param.value, [0.95, 1.95])
    assert not param.grad.any()

    param.grad[:] = 0.5
    sgd_step([param], lr=0.1, momentum=0.9)
    np.testing.assert_allclose(param.velocity, [0.95, 0.95])
    np.testing.assert_allclose(param.value, [0.855, 1.855])


def test_sgd_with_zero_lr_leaves_values_alone():
    param = Param("w", np.array([3.0]))
    param.grad[:] = 10.0
    sgd_step([param], lr=0.0, momentum=0.9)
    assert param.value.tolist() == [3.0]


def test_non_finite_gradient_stops_the_whole_step():
    good, bad = Param("good", np.ones(2)), Param("bad", np.ones(2))
    good.grad[:] = 1.0
    bad.grad[:] = [1.0, np.nan]

    with pytest.raises(NumericError) as info:
        sgd_step([good, bad], lr=0.1, momentum=0.0)

    assert info.value.where == "bad"
    np.testing.assert_array_equal(good.value, 1.0)
    np.testing.assert_array_equal(good.grad, 1.0)


def test_warm_restart_trace():
    cfg = TrainConfig(lr_max=0.001, lr_min=1e-5, restart_period=100)

    assert warm_restart_lr(0, cfg) == 0.001
    assert warm_restart_lr(100, cfg) == 0.001
    assert warm_restart_lr(50, cfg) == pytest.approx((0.001 + 1e-5) / 2)
    trace = [warm_restart_lr(e, cfg) for e in range(100)]
    assert all(a > b for a, b in zip(trace, trace[1:]))
    assert all(1e-5 <= lr <= 0.001 for lr in trace)
    assert trace[-1] == pytest.approx(1e-5, rel=0.05)


def test_restart_periods_grow_with_multiplier():
    assert restart_position(150, 100, 2.0) == (50.0, 200.0)
    assert restart_position(300, 100, 2.0) == (0.0, 400.0)

    cfg = TrainConfig(restart_period=100, restart_mult=2.0)
    assert warm_restart_lr(300, cfg) == cfg.lr_max
    assert warm_restart_lr(200, cfg) == pytest.approx((cfg.lr_max + cfg.lr_min) / 2)


def test_negative_epoch_is_rejected():
    with pytest.raises(ValidationError):
        restart_position(-1, 100, 1.0)
