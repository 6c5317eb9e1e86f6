import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxdiff import nn
from ctxdiff.adapter import (LearnedAdapter, LinearToyAdapter, ZeroAdapter, adapter_from_spec,
                             apply_adapter, bias, estimate_lipschitz)
from ctxdiff.schedule import make_schedule
from worked import schedule_from_alpha_bars


def test_zero_adapter_returns_zero():
    a = ZeroAdapter(3)
    out = apply_adapter(a, np.array([1.0, 2.0, -3.0]), 1, 7)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_linear_toy_scales_input():
    a = LinearToyAdapter(2, 0.2)
    np.testing.assert_array_equal(apply_adapter(a, np.array([1.0, -1.0]), 0, 5), [0.2, -0.2])


def test_linear_toy_rejects_negative_coefficient():
    with pytest.raises(ValueError):
        LinearToyAdapter(2, -0.1)
    with pytest.raises(ValueError):
        LinearToyAdapter(2, [0.0, 0.1, -0.2])


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ZeroAdapter(2)(np.ones(3), 0, 1)


def test_learned_adapter_with_zero_parameters_is_zero():
    a = LearnedAdapter.init(2, 3, 10, np.random.default_rng(0))
    for name in a.params:
        a.params[name][...] = 0.0
    out = a(np.random.default_rng(1).standard_normal((5, 2)), np.array([0, 1, 2, 0, 1]), 4)
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_learned_adapter_rejects_unknown_class():
    a = LearnedAdapter.init(2, 2, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        a(np.zeros((1, 2)), 2, 3)


def test_learned_adapter_is_deterministic():
    a = LearnedAdapter.init(2, 2, 10, np.random.default_rng(0))
    x = np.random.default_rng(2).standard_normal((6, 2))
    np.testing.assert_array_equal(a(x, 1, 3), a(x, 1, 3))


def test_bias_worked_value():
    # abar = 0.25 gives k = 0.5 * 0.5 = 0.25
    s = schedule_from_alpha_bars([0.5, 0.25, 0.1])
    assert s.k_gains[2] == 0.25
    b = bias(LinearToyAdapter(2, 0.2), s, np.array([1.0, 0.0]), 0, 2)
    np.testing.assert_allclose(b, [0.05, 0.0], rtol=1e-15, atol=0)


def test_bias_vanishes_at_both_ends():
    s = make_schedule("cosine", 20)
    a = LearnedAdapter.init(2, 2, 20, np.random.default_rng(4))
    x = np.random.default_rng(5).standard_normal((3, 2))
    np.testing.assert_array_equal(bias(a, s, x, 1, 0), np.zeros((3, 2)))
    np.testing.assert_array_equal(bias(a, s, x, 1, s.T), np.zeros((3, 2)))


def test_bias_per_row_timesteps():
    s = make_schedule("cosine", 20)
    a = LinearToyAdapter(1, 0.5)
    x = np.ones((3, 1))
    t = np.array([1, 5, 20])
    np.testing.assert_allclose(bias(a, s, x, 0, t)[:, 0], 0.5 * s.k_gains[t], rtol=1e-15)


def test_lipschitz_estimates():
    x = np.random.default_rng(0).standard_normal((200, 2))
    c = np.zeros(200, dtype=int)
    assert estimate_lipschitz(ZeroAdapter(2), x, c, 3, n_pairs=500) == 0.0
    assert estimate_lipschitz(LinearToyAdapter(2, 0.2), x, c, 3, n_pairs=500) == pytest.approx(0.2, rel=1e-12)


def test_lipschitz_needs_distinct_samples():
    with pytest.raises(ValueError):
        estimate_lipschitz(ZeroAdapter(2), np.ones((1, 2)), 0, 1)
    with pytest.raises(ValueError):
        estimate_lipschitz(ZeroAdapter(2), np.ones((4, 2)), 0, 1, n_pairs=10)


def test_learned_lipschitz_bounded_by_weight_norms():
    a = LearnedAdapter.init(2, 2, 10, np.random.default_rng(3))
    x = np.random.default_rng(1).standard_normal((300, 2))
    est = estimate_lipschitz(a, x, np.zeros(300, dtype=int), 4, n_pairs=10_000)
    assert est > 0
    # |tanh'| <= 1, so the map is bounded by |W_out| * max|hc| * |W_x| in spectral norm
    from ctxdiff.nn import timestep_features
    p = a.params
    tf = timestep_features([4], 10, a.time_dim)
    hc = np.concatenate([p["class_embed"][0:1], tf], axis=1) @ p["ctx_proj.W"] + p["ctx_proj.b"]
    bound = np.linalg.norm(p["out.W"], 2) * np.abs(hc).max() * np.linalg.norm(p["x_proj.W"], 2)
    assert est <= bound


def test_spec_round_trip():
    a = LearnedAdapter.init(2, 3, 10, np.random.default_rng(0), hidden=4)
    b = adapter_from_spec(a.to_spec(), a.params.copy())
    x = np.random.default_rng(1).standard_normal((4, 2))
    np.testing.assert_array_equal(a(x, 2, 5), b(x, 2, 5))
    toy = adapter_from_spec(LinearToyAdapter(2, 0.3).to_spec())
    assert toy(np.ones(2), 0, 1)[0] == 0.3
    with pytest.raises(ValueError):
        adapter_from_spec({"variant": "attention", "dim": 2})


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_learned_adapter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = LearnedAdapter.init(2, 3, 10, rng, hidden=5, cond_dim=3, time_dim=4)
    x = rng.standard_normal((4, 2))
    c = rng.integers(0, 3, 4)
    t = rng.integers(0, 11, 4)

    def loss():
        tape = nn.Tape()
        out = a.on_tape(tape.input(x), c, t)
        val = nn.mean(nn.sum_rows(nn.mul(out, out)))
        return float(val.value), nn.backward(tape, val).for_params(a.params)

    rep = nn.grad_check(a.params, loss)
    assert rep.passed, rep.worst
