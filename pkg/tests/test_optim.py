import numpy as np
import pytest

from shapenas import tensor as T
from shapenas.errors import ConfigError, NumericError
from shapenas.optim import AdamW, linear_schedule


def param(values):
    return T.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_zero_gradient_zero_decay_leaves_param_unchanged():
    w = param([1.5, -2.0])
    opt = AdamW([w], lr=0.1, weight_decay=0.0)
    w.grad = np.zeros(2)
    before = w.data.copy()
    opt.step()
    np.testing.assert_array_equal(w.data, before)


def test_single_step_matches_hand_computation():
    # w=1, g=1, lr=0.1, betas=(0.9, 0.999), eps=1e-8, wd=0:
    # bias-corrected m=1, v=1, so w moves to ~0.9
    w = param([1.0])
    opt = AdamW([w], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    w.grad = np.asarray([1.0])
    opt.step()
    assert abs(w.data[0] - 0.9) < 1e-8


def test_constant_gradient_is_strictly_monotone():
    w = param([1.0])
    opt = AdamW([w], lr=0.05, weight_decay=0.0)
    seen = [w.data[0]]
    for _ in range(2):
        w.grad = np.asarray([1.0])
        opt.step()
        seen.append(w.data[0])
    assert seen[0] > seen[1] > seen[2]


def test_missing_gradient_is_a_contract_violation():
    w = param([1.0])
    opt = AdamW([w], lr=0.1)
    with pytest.raises(ValueError):
        opt.step()


def test_unregistered_parameter_rejected():
    w = param([1.0])
    other = param([1.0])
    opt = AdamW([w], lr=0.1)
    other.grad = np.asarray([1.0])
    with pytest.raises(ConfigError):
        opt.step([(other, None)])


def test_nonfinite_gradient_raises_numeric_error():
    w = param([1.0])
    opt = AdamW([w], lr=0.1)
    w.grad = np.asarray([np.inf])
    with pytest.raises(NumericError):
        opt.step()


def test_region_update_leaves_outside_bits_identical():
    rng = np.random.default_rng(0)
    w = param(rng.normal(size=(6, 5)))
    opt = AdamW([w], lr=0.01, weight_decay=0.1)
    w.grad = rng.normal(size=(6, 5))
    before = w.data.copy()
    opt.step([(w, (3, 2))])
    region = (slice(0, 3), slice(0, 2))
    outside = np.ones((6, 5), dtype=bool)
    outside[region] = False
    assert np.array_equal(w.data[outside], before[outside])
    assert not np.array_equal(w.data[region], before[region])
    state = opt._state[id(w)]
    assert np.all(state.m[outside] == 0.0) and np.all(state.v[outside] == 0.0)


def test_decay_applies_only_to_passed_in_params():
    a = param([1.0])
    b = param([1.0])
    opt = AdamW([a, b], lr=0.1, weight_decay=0.5)
    a.grad = np.asarray([0.0])
    before_b = b.data.copy()
    opt.step([(a, None)])
    assert a.data[0] < 1.0  # decay moved it despite zero gradient
    np.testing.assert_array_equal(b.data, before_b)


def test_step_counters_advance_per_param():
    a = param([1.0])
    b = param([1.0])
    opt = AdamW([a, b], lr=0.1)
    a.grad = np.asarray([1.0])
    b.grad = np.asarray([1.0])
    opt.step([(a, None)])
    opt.step([(a, None), (b, None)])
    assert opt.step_count == 2
    assert opt._state[id(a)].step == 2
    assert opt._state[id(b)].step == 1


def test_linear_schedule_shape():
    peak = 1e-3
    lrs = [linear_schedule(s, 200, 20, peak) for s in range(200)]
    assert abs(lrs[19] - peak) < 1e-15
    assert all(x > 0 for x in lrs[:19]) and lrs[0] < lrs[10] < lrs[19]
    assert lrs[20] > lrs[100] > lrs[199] > 0
    with pytest.raises(ConfigError):
        linear_schedule(0, 100, 100, peak)
