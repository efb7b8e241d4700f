import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gradcases import CASES, check_case
from mmglab.errors import ConfigError, NumericError
from mmglab.numcore import Adam, AdamState, adam_step, backprop, finite_difference_check, parameter
from mmglab.numcore import autograd as ag
from mmglab.numcore import layers


# -- backprop ------------------------------------------------------------------

def test_square_gradient_is_six_at_three():
    w = parameter(np.array(3.0))
    assert backprop(ag.square(w), [w])[w] == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient():
    w = parameter(np.random.default_rng(0).standard_normal(6))
    g = backprop(ag.softmax(w).sum(), [w])[w]
    assert np.max(np.abs(g)) < 1e-12


def test_backprop_rejects_vector_output():
    w = parameter(np.ones(3))
    with pytest.raises(ConfigError):
        backprop(w * 2.0, [w])


def test_unreached_parameter_gets_zero_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones(3))
    grads = backprop((a * a).sum(), [a, b])
    assert np.array_equal(grads[b], np.zeros(3))


def test_shared_subexpression_accumulates():
    x = parameter(np.array(2.0))
    y = x * x
    out = y + y * x  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert backprop(out, [x])[x] == pytest.approx(4 + 12)


def test_nan_is_a_hard_error():
    with pytest.raises(NumericError):
        ag.log(parameter(np.array([-1.0])))
    with pytest.raises(NumericError):
        ag.exp(parameter(np.array([1e4])))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    worst = max(check_case(name, seed) for seed in range(5))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


# -- gradient checker ----------------------------------------------------------

def test_checker_exact_on_linear_function():
    c = np.array([1.5, -2.0, 0.25])
    w = parameter(np.array([0.3, 0.1, -0.7]))
    rep = finite_difference_check(lambda: (w * c).sum(), w)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_checker_catches_doubled_gradient():
    w = parameter(np.array([0.4, -1.2]))
    fn = lambda: ag.square(w).sum()  # noqa: E731
    good = backprop(fn(), [w])[w]
    assert not finite_difference_check(fn, w, analytic=good * 2).passed


def test_checker_rejects_nonpositive_step():
    w = parameter(np.ones(1))
    with pytest.raises(ConfigError):
        finite_difference_check(lambda: w.sum(), w, step=0.0)


# -- softmax / layer norm --------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    s = ag.softmax(parameter(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1) <= 1e-9)
    for row, ref in zip(s, x):
        assert np.allclose(row, oracles.softmax(list(ref)), atol=1e-12)


def test_layer_norm_constant_row_is_zero():
    out = layers.layer_norm(parameter(np.full((1, 4), 3.0)), np.ones(4), np.zeros(4))
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_of_normalised_pair():
    out = layers.layer_norm(parameter(np.array([[1.0, -1.0]])), np.ones(2), np.zeros(2), eps=1e-14)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(4)
    x, g, b = rng.standard_normal((6, 7)), rng.standard_normal(7), rng.standard_normal(7)
    out = layers.layer_norm(parameter(x), g, b, eps=1e-5).data
    for row, ref in zip(out, x):
        assert np.allclose(row, oracles.layer_norm_row(list(ref), list(g), list(b), 1e-5), atol=1e-9)
    plain = layers.layer_norm(parameter(x), np.ones(7), np.zeros(7)).data
    assert np.all(np.abs(plain.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(plain.var(axis=-1) - 1) < 1e-4)  # eps shrinks variance slightly


def test_layer_norm_needs_positive_eps():
    with pytest.raises(ConfigError):
        layers.layer_norm(parameter(np.ones((1, 2))), np.ones(2), np.zeros(2), eps=0.0)


# -- attention -------------------------------------------------------------------

def _attn_params(rng, d):
    p = {}
    for n in ("q", "k", "v", "o"):
        p["w" + n] = parameter(rng.standard_normal((d, d)) * 0.5)
        p["b" + n] = parameter(rng.standard_normal(d) * 0.1)
    return p


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(8)
    d, heads = 6, 3
    p = _attn_params(rng, d)
    x = rng.standard_normal((2, 5, d))
    out = layers.multi_head_self_attention(parameter(x), p, heads).data
    plain = {k: v.data.tolist() for k, v in p.items()}
    for b in range(2):
        ref = oracles.self_attention(x[b].tolist(), plain, heads)
        assert np.allclose(out[b], ref, atol=1e-12)


def test_attention_is_exactly_permutation_equivariant():
    rng = np.random.default_rng(9)
    p = _attn_params(rng, 8)
    for _ in range(20):
        x = rng.standard_normal((7, 8))
        perm = rng.permutation(7)
        a = layers.multi_head_self_attention(parameter(x), p, 2).data
        b = layers.multi_head_self_attention(parameter(x[perm]), p, 2).data
        assert np.array_equal(a[perm], b)


def test_attention_rejects_indivisible_heads():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        layers.multi_head_self_attention(parameter(rng.standard_normal((3, 6))), _attn_params(rng, 6), 4)


def test_operations_are_pure():
    rng = np.random.default_rng(1)
    p = _attn_params(rng, 4)
    x = rng.standard_normal((3, 4))
    a = layers.multi_head_self_attention(parameter(x), p, 2).data
    b = layers.multi_head_self_attention(parameter(x.copy()), p, 2).data
    assert a.tobytes() == b.tobytes()


# -- distances -------------------------------------------------------------------

def test_cosine_examples():
    v = parameter(np.array([0.3, -2.0, 1.0]))
    assert layers.cosine_similarity(v, v).item() == pytest.approx(1.0)
    assert layers.cosine_similarity(v, -v).item() == pytest.approx(-1.0)
    assert layers.cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == 0.0
    with pytest.raises(NumericError):
        layers.cosine_similarity(np.zeros(2), np.ones(2))


def test_squared_distance_examples():
    assert layers.sq_l2_distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])).item() == 25.0
    v = np.array([1.0, 2.0])
    assert layers.sq_l2_distance(v, v).item() == 0.0
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert layers.sq_l2_distance(a, b).item() == layers.sq_l2_distance(b, a).item()
    with pytest.raises(ConfigError):
        layers.sq_l2_distance(np.ones(2), np.ones(3))


# -- Adam --------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    g = np.array([3.0, -0.01, 250.0])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), lr=0.01)
    assert np.allclose(np.abs(new["w"]), 0.01, rtol=1e-5)
    assert np.all(np.sign(new["w"]) == -np.sign(g))


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, 2.0])}
    _, s1 = adam_step(p, {"w": np.array([1.0, 1.0])}, AdamState())
    new, s2 = adam_step(p, {"w": np.zeros(2)}, s1)
    assert np.allclose(s2.m["w"], 0.9 * s1.m["w"]) and np.allclose(s2.v["w"], 0.999 * s1.v["w"])
    # with stale momentum the parameters still move; a fresh state with zero grad does not
    fresh, _ = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(fresh["w"], p["w"])


def test_adam_descends_a_bowl():
    w = parameter(np.array(1.0))
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(100):
        opt.step(backprop(ag.square(w), {"w": w}))
    assert abs(w.item()) < 0.5 and opt.steps == 100


def test_adam_rejects_bad_lr_and_is_deterministic():
    with pytest.raises(ConfigError):
        adam_step({"w": np.ones(1)}, {"w": np.ones(1)}, AdamState(), lr=0.0)
    a = adam_step({"w": np.ones(2)}, {"w": np.array([0.5, -3.0])}, AdamState())[0]["w"]
    b = adam_step({"w": np.ones(2)}, {"w": np.array([0.5, -3.0])}, AdamState())[0]["w"]
    assert a.tobytes() == b.tobytes()


def test_gelu_tanh_form():
    x = np.linspace(-3, 3, 13)
    ref = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in x]
    assert np.allclose(ag.gelu(parameter(x)).data, ref, atol=1e-14)
