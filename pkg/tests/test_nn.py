import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caafp.data import ClientDataset
from caafp.errors import ConfigError, DataError
from caafp.nn import (ArchitectureSpec, OptimizerState, ParamSet, adam_step, build_layout, evaluate, forward,
                      init_params, loss_and_grad, num_params, num_prunable, train_local)
from caafp.oracles import fd_gradient, gradient_check


def test_layout_contiguous(tiny_arch):
    layout = build_layout(tiny_arch)
    offset = 0
    for slot in layout:
        assert slot.offset == offset
        offset = slot.stop
    assert offset == num_params(tiny_arch)
    assert build_layout(ArchitectureSpec.from_dict(tiny_arch.to_dict())) == layout


def test_standard_architectures_param_counts():
    # conv(5*3*64+64) + conv(5*64*64+64) + dense(47*64*32+32) + out(32*6+6)
    assert num_params(ArchitectureSpec.wisdm()) == 1024 + 20544 + 96288 + 198
    assert num_params(ArchitectureSpec.ucihar()) == 2944 + 20544 + 59424 + 198
    for arch in (ArchitectureSpec.wisdm(), ArchitectureSpec.ucihar()):
        assert arch.flatten_size > 0
        assert num_params(arch) - num_prunable(arch) == 64 + 64 + 32 + 6


def test_too_short_input_rejected():
    with pytest.raises(ConfigError):
        ArchitectureSpec(input_len=8, channels=1)


def test_zero_params_uniform(tiny_arch, rng):
    probs = forward(ParamSet.zeros(tiny_arch), rng.standard_normal((4, 16, 2)))
    np.testing.assert_allclose(probs, 1 / 3)


def test_forward_rows_sum_to_one(tiny_arch, rng):
    p = init_params(tiny_arch, 0)
    probs = forward(p, rng.standard_normal((7, 16, 2)))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_forward_deterministic(tiny_arch, rng):
    p = init_params(tiny_arch, 0)
    x = rng.standard_normal((3, 16, 2))
    assert np.array_equal(forward(p, x), forward(p, x))
    assert np.array_equal(forward(p, x, training=True, seed=5), forward(p, x, training=True, seed=5))
    assert not np.array_equal(forward(p, x, training=True, seed=5), forward(p, x))


def test_training_forward_needs_seed(tiny_arch, rng):
    with pytest.raises(ConfigError):
        forward(init_params(tiny_arch, 0), rng.standard_normal((1, 16, 2)), training=True)


def test_shape_mismatch(tiny_arch):
    with pytest.raises(ConfigError):
        forward(init_params(tiny_arch, 0), np.zeros((2, 15, 2)))


def test_hand_computed_toy():
    # one filter of width 1, pool 2, no hidden layer: 6 parameters in total
    arch = ArchitectureSpec(input_len=2, channels=1, num_classes=2, filters=(1,), kernel=1, pool=2,
                            conv_dropout=(0.0,), hidden=0)
    w = np.array([2.0, -1.0, 0.5, -0.5, 0.1, 0.2])  # conv k, conv b, out k (1x2), out b
    p = ParamSet(arch, w)
    x = np.array([[[1.5], [0.25]]])
    h = max(max(2.0 * 1.5 - 1.0, 0.0), max(2.0 * 0.25 - 1.0, 0.0))
    logits = np.array([0.5 * h + 0.1, -0.5 * h + 0.2])
    want = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(forward(p, x)[0], want, rtol=1e-12)


def test_regularizer_terms(tiny_arch, rng):
    p = init_params(tiny_arch, 0)
    x = rng.standard_normal((4, 16, 2))
    y = np.array([0, 1, 2, 0])
    plain, g0 = loss_and_grad(p, x, y)
    same, g1 = loss_and_grad(p, x, y, ref=p, lam=0.0)
    assert plain == same
    at_ref, g2 = loss_and_grad(p, x, y, ref=p, lam=3.0)
    assert at_ref == plain
    assert np.array_equal(g0, g2)
    shifted = p.with_values(p.values + 1.0)
    reg, _ = loss_and_grad(p, x, y, ref=shifted, lam=2.0)
    assert reg == pytest.approx(plain + 0.5 * 2.0 * p.size)


def test_negative_lambda(tiny_arch, rng):
    with pytest.raises(ConfigError):
        loss_and_grad(init_params(tiny_arch, 0), rng.standard_normal((1, 16, 2)), [0], lam=-0.1)


def test_bad_labels(tiny_arch, rng):
    with pytest.raises(ConfigError):
        loss_and_grad(init_params(tiny_arch, 0), rng.standard_normal((1, 16, 2)), [3])


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    errs = gradient_check(seed)
    assert max(errs.values()) < 1e-4, errs


def test_masked_gradient_reported_everywhere(tiny_arch, rng):
    # random biases keep every pre-activation away from the ReLU kink
    p = ParamSet(tiny_arch, 0.5 * rng.standard_normal(num_params(tiny_arch)))
    keep = np.ones(p.size)
    keep[p.prunable_index[::2]] = 0
    x = rng.standard_normal((3, 16, 2))
    y = np.array([0, 1, 2])
    _, g = loss_and_grad(p, x, y, mask=keep)
    num = fd_gradient(p.with_values(p.values * keep), x, y, mask=keep)
    # the loss only sees masked weights, so derive the reference on the masked point
    np.testing.assert_allclose(g[keep > 0], num[keep > 0], rtol=1e-4, atol=1e-8)
    assert np.abs(g[p.prunable_index[::2]]).sum() > 0


def test_adam_scalar_hand_arithmetic():
    arch = ArchitectureSpec(input_len=2, channels=1, num_classes=2, filters=(1,), kernel=1, pool=2,
                            conv_dropout=(0.0,), hidden=0)
    p = ParamSet(arch, np.ones(num_params(arch)))
    adam_step(p, np.ones(p.size), OptimizerState.fresh(p.size))
    np.testing.assert_allclose(p.values, 1 - 1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)


def test_adam_zero_gradient_noop(tiny_arch):
    p = init_params(tiny_arch, 0)
    before = p.values.copy()
    adam_step(p, np.zeros(p.size), OptimizerState.fresh(p.size))
    assert np.array_equal(p.values, before)


def test_adam_all_zero_mask(tiny_arch, rng):
    p = init_params(tiny_arch, 0)
    keep = np.ones(p.size)
    keep[p.prunable_index] = 0
    state = OptimizerState.fresh(p.size)
    adam_step(p, rng.standard_normal(p.size), state, mask=keep)
    assert np.all(p.values[p.prunable_index] == 0)
    assert np.all(state.m[p.prunable_index] == 0) and np.all(state.v[p.prunable_index] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(1, 6))
def test_mask_closure_property(seed, steps):
    arch = ArchitectureSpec(input_len=10, channels=1, num_classes=2, filters=(2,), kernel=3,
                            conv_dropout=(0.0,), hidden=3)
    r = np.random.default_rng(seed)
    p = ParamSet(arch, r.standard_normal(num_params(arch)))
    keep = np.ones(p.size)
    keep[p.prunable_index[r.random(len(p.prunable_index)) < 0.5]] = 0
    state = OptimizerState.fresh(p.size)
    for _ in range(steps):
        adam_step(p, r.standard_normal(p.size), state, mask=keep)
    assert np.all(p.values[keep == 0] == 0)
    assert state.t == steps


def _dataset(x, y):
    return ClientDataset(0, x[:1], y[:1], x, y)


def test_evaluate_rules(tiny_arch, rng):
    x = rng.standard_normal((6, 16, 2))
    zero = ParamSet.zeros(tiny_arch)
    # all logits tie, so class 0 wins everywhere
    assert evaluate(zero, _dataset(x, np.array([0, 0, 1, 1, 2, 0]))) == pytest.approx(0.5)
    p = ParamSet.zeros(tiny_arch)
    p.view("out/bias")[:] = [0.0, 5.0, 0.0]
    assert evaluate(p, _dataset(x, np.ones(6, dtype=int))) == 1.0
    assert evaluate(p, _dataset(x[:4], np.array([1, 1, 1, 0]))) == 0.75


def test_evaluate_empty_test_split(tiny_arch, rng):
    x = rng.standard_normal((2, 16, 2))
    ds = ClientDataset(3, x, np.array([0, 1]), x[:0], np.array([], dtype=int))
    with pytest.raises(DataError):
        evaluate(ParamSet.zeros(tiny_arch), ds)


def test_train_local_does_not_touch_input_and_learns(tiny_arch, rng):
    p = init_params(tiny_arch, 0)
    before = p.values.copy()
    x = rng.standard_normal((30, 16, 2))
    y = (x[:, :, 0].mean(axis=1) > 0).astype(int)
    loss0, _ = loss_and_grad(p, x, y)
    res = train_local(p, x, y, 20, 8, OptimizerState.fresh(p.size, 1e-2), 0, dropout=False)
    assert np.array_equal(p.values, before)
    assert loss_and_grad(res.params, x, y)[0] < loss0
    again = train_local(p, x, y, 20, 8, OptimizerState.fresh(p.size, 1e-2), 0, dropout=False)
    assert np.array_equal(res.params.values, again.params.values)


def test_dump_is_little_endian_float32(tiny_arch, tmp_path):
    p = init_params(tiny_arch, 0)
    path = tmp_path / "w.bin"
    p.dump(path)
    np.testing.assert_allclose(np.fromfile(path, dtype="<f4"), p.values, rtol=1e-6)
