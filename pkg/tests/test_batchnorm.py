import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubna.batchnorm import (
    Adapt,
    BatchStats,
    BNLayerState,
    Eval,
    Train,
    bn_forward,
    bn_normalize,
    bn_set_stats,
)
from ubna.errors import InvalidInputError, InvariantError
from ubna.nncore import batch_mean, batch_var

from oracles import loop_bn, mixing_weight


def random_state(rng, c, eps=1e-5):
    return BNLayerState(
        gamma=rng.uniform(0.5, 2, c),
        beta=rng.normal(size=c),
        running_mean=rng.normal(size=c),
        running_var=rng.uniform(0.5, 3, c),
        eps=eps,
    )


def snapshot(state):
    return [a.copy() for a in (state.gamma, state.beta, state.running_mean, state.running_var)]


def test_normalize_identity_parameters():
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 2)).astype(np.float32)
    s = BNLayerState.fresh(2, eps=1e-300)
    out = bn_normalize(x, np.zeros(2), np.ones(2), s)
    np.testing.assert_array_equal(out, x)


def test_normalize_closed_form_scalar():
    s = BNLayerState([2.0], [1.0], [0.0], [1.0], eps=1e-300)
    out = bn_normalize(np.full((1, 1, 1, 1), 5.0, np.float32), np.array([3.0]), np.array([4.0]), s)
    assert out.item() == 3.0


def test_normalize_matches_loop_oracle():
    rng = np.random.default_rng(11)
    s = random_state(rng, 3)
    x = rng.normal(size=(2, 3, 4, 3)).astype(np.float32)
    mean, var = rng.normal(size=3), rng.uniform(0.1, 2, 3)
    ref = loop_bn(x, mean, var, s.gamma, s.beta, s.eps)
    np.testing.assert_allclose(bn_normalize(x, mean, var, s), ref, rtol=1e-6, atol=1e-6)


def test_normalize_rejects_negative_variance():
    s = BNLayerState.fresh(1)
    with pytest.raises(InvariantError):
        bn_normalize(np.zeros((1, 1, 2, 1), np.float32), np.zeros(1), -np.ones(1), s)


def test_state_invariants():
    with pytest.raises(InvalidInputError):
        BNLayerState([1.0], [0.0], [0.0], [-1.0])
    with pytest.raises(InvalidInputError):
        BNLayerState([1.0], [0.0], [0.0], [1.0], eps=0.0)
    with pytest.raises(InvalidInputError):
        BNLayerState([1.0, 1.0], [0.0], [0.0], [1.0])


def test_momentum_range_checked():
    with pytest.raises(InvalidInputError):
        Train(1.5)
    with pytest.raises(InvalidInputError):
        Adapt(-0.1)
    with pytest.raises(InvalidInputError):
        Adapt(0.1, normalize_with="other")


def test_train_single_ema_step():
    s = BNLayerState.fresh(1)
    x = np.full((1, 2, 2, 1), 1.0, np.float32)
    bn_forward(x, s, Train(0.1))
    assert s.running_mean[0] == pytest.approx(0.1, abs=1e-15)
    assert s.running_var[0] == pytest.approx(0.9, abs=1e-15)


def test_train_normalizes_with_batch_stats():
    rng = np.random.default_rng(2)
    s = random_state(rng, 2)
    x = rng.normal(size=(3, 2, 2, 2)).astype(np.float32)
    m = batch_mean(x)
    expected = bn_normalize(x, m, batch_var(x, m), s)
    np.testing.assert_array_equal(bn_forward(x, s, Train(0.1)), expected)


def test_eval_does_not_mutate():
    rng = np.random.default_rng(3)
    s = random_state(rng, 4)
    before = snapshot(s)
    x = rng.normal(size=(2, 3, 3, 4)).astype(np.float32)
    out = bn_forward(x, s, Eval())
    for a, b in zip(before, snapshot(s)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(out, bn_normalize(x, s.running_mean, s.running_var, s))


def test_batch_stats_mode_does_not_mutate():
    rng = np.random.default_rng(4)
    s = random_state(rng, 2)
    before = snapshot(s)
    bn_forward(rng.normal(size=(2, 2, 2, 2)).astype(np.float32), s, BatchStats())
    for a, b in zip(before, snapshot(s)):
        np.testing.assert_array_equal(a, b)


def test_adapt_zero_momentum_is_eval():
    rng = np.random.default_rng(5)
    s = random_state(rng, 3)
    ref = s.copy()
    x = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    out = bn_forward(x, s, Adapt(0.0))
    np.testing.assert_array_equal(s.running_mean, ref.running_mean)
    np.testing.assert_array_equal(s.running_var, ref.running_var)
    np.testing.assert_array_equal(out, bn_forward(x, ref, Eval()))


def test_adapt_unit_momentum_copies_batch_stats():
    rng = np.random.default_rng(6)
    s = random_state(rng, 3)
    x = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    bn_forward(x, s, Adapt(1.0))
    m = batch_mean(x)
    np.testing.assert_array_equal(s.running_mean, m)
    np.testing.assert_array_equal(s.running_var, batch_var(x, m))


def test_adapt_normalize_with_options():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
    a = random_state(rng, 2)
    b = a.copy()
    out_running = bn_forward(x, a, Adapt(0.3))
    out_batch = bn_forward(x, b, Adapt(0.3, normalize_with="batch"))
    # identical state updates, different normalization
    np.testing.assert_array_equal(a.running_mean, b.running_mean)
    np.testing.assert_array_equal(out_running, bn_normalize(x, a.running_mean, a.running_var, a))
    m = batch_mean(x)
    np.testing.assert_array_equal(out_batch, bn_normalize(x, m, batch_var(x, m), b))


def test_train_adapt_need_two_positions():
    s = BNLayerState.fresh(1)
    x = np.ones((1, 1, 1, 1), np.float32)
    for mode in (Train(0.1), Adapt(0.1), BatchStats()):
        with pytest.raises(InvalidInputError):
            bn_forward(x, s, mode)
    bn_forward(x, s, Eval())


def test_channel_mismatch():
    with pytest.raises(InvalidInputError):
        bn_forward(np.zeros((1, 2, 2, 3), np.float32), BNLayerState.fresh(2), Eval())


@pytest.mark.parametrize("n_steps", [1, 5, 50])
def test_fixed_batch_closed_form(n_steps):
    rng = np.random.default_rng(n_steps)
    s = random_state(rng, 3)
    mu0, var0 = s.running_mean.copy(), s.running_var.copy()
    x = rng.normal(2.0, 1.5, size=(2, 4, 4, 3)).astype(np.float32)
    m = batch_mean(x)
    v = batch_var(x, m)
    etas = rng.uniform(0, 0.5, n_steps)
    for e in etas:
        bn_forward(x, s, Adapt(float(e)))
    w = mixing_weight(etas)
    np.testing.assert_allclose(s.running_mean, w * mu0 + (1 - w) * m, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.running_var, w * var0 + (1 - w) * v, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_ema_contraction(eta, seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, 2)
    x = rng.normal(size=(1, 3, 3, 2)).astype(np.float32)
    m = batch_mean(x)
    gap = np.abs(s.running_mean - m)
    bn_forward(x, s, Adapt(eta))
    np.testing.assert_allclose(np.abs(s.running_mean - m), (1 - eta) * gap, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0.0, 1.0)), min_size=1, max_size=20),
       st.integers(0, 2**32 - 1))
def test_running_var_never_negative(steps, seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, 2)
    for train, eta in steps:
        x = (rng.normal(size=(1, 2, 2, 2)) * rng.uniform(0, 3)).astype(np.float32)
        bn_forward(x, s, Train(eta) if train else Adapt(eta))
        assert np.all(s.running_var >= 0)


def test_set_stats_then_eval_standardizes():
    rng = np.random.default_rng(8)
    x = rng.normal(3.0, 2.0, size=(4, 5, 5, 2)).astype(np.float32)
    s = BNLayerState.fresh(2, eps=1e-12)
    m = batch_mean(x)
    bn_set_stats(s, m, batch_var(x, m))
    out = bn_forward(x, s, Eval()).astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-5)


def test_set_stats_unit_gives_eps_scaling():
    s = BNLayerState.fresh(1, eps=1e-2)
    bn_set_stats(s, [0.0], [1.0])
    x = np.full((1, 1, 2, 1), 2.0, np.float32)
    np.testing.assert_allclose(bn_forward(x, s, Eval()), 2.0 / np.sqrt(1.01), rtol=1e-6)


def test_set_stats_rejects_negative_variance():
    with pytest.raises(InvalidInputError):
        bn_set_stats(BNLayerState.fresh(2), [0.0, 0.0], [1.0, -0.5])
