import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrmcap import autodiff as ad
from ctrmcap.gradcheck import PRIMITIVE_CASES

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_registry_covers_every_primitive():
    assert set(PRIMITIVE_CASES) == set(ad.PRIMITIVES)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_matches_finite_differences(name):
    for seed in range(3):
        values, fn = PRIMITIVE_CASES[name](np.random.default_rng(seed))
        err = ad.max_relative_error(ad.analytic_gradient(fn, values), ad.numeric_gradient(fn, values))
        assert err <= 1e-6, (name, seed, err)


def test_tensor_is_immutable_and_copies_input():
    src = np.ones((2, 2))
    t = ad.constant(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 3.0


def test_tensor_rejects_empty_dimension():
    with pytest.raises(ad.ShapeError):
        ad.constant(np.zeros((0, 3)))


def test_shape_errors_are_raised():
    a, b = ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, a)
    with pytest.raises(ad.ShapeError):
        ad.add_row(a, ad.constant(np.ones(2)))
    with pytest.raises(ad.ShapeError):
        ad.split_heads(a, 2)


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ad.log(ad.constant([1.0, 0.0]))


def test_fully_masked_softmax_row_is_an_error():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ValueError):
        ad.row_softmax(ad.constant(np.zeros((2, 2))), mask)


def test_gradient_requires_scalar_loss():
    x = ad.parameter(np.ones(3), "x")
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.ShapeError):
        ad.gradient(tape, y)


def test_gradient_accumulates_over_reuse():
    x = ad.parameter(np.array([1.0, 2.0]), "x")
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    assert np.array_equal(ad.gradient(tape, loss)["x"], [2.0, 4.0])


def test_unused_parameter_gets_zero_gradient():
    x, y = ad.parameter(np.ones(2), "x"), ad.parameter(np.ones(3), "y")
    with ad.Tape() as tape:
        loss = ad.sum(x)
    grads = ad.gradient(tape, loss, {"x": x, "y": y})
    assert np.array_equal(grads["y"], np.zeros(3))


def test_ops_outside_a_tape_are_not_recorded():
    x = ad.parameter(np.ones(2), "x")
    ad.sum(x)
    with ad.Tape() as tape:
        ad.sum(x)
    assert tape.ops() == ["sum"]


def test_corruption_hook_scales_only_the_named_op():
    values, fn = PRIMITIVE_CASES["matmul"](np.random.default_rng(0))
    clean = ad.analytic_gradient(fn, values)
    relu_values, relu_fn = PRIMITIVE_CASES["relu"](np.random.default_rng(0))
    relu_clean = ad.analytic_gradient(relu_fn, relu_values)
    ad.corrupt_gradient("matmul", 2.0)
    try:
        bad = ad.analytic_gradient(fn, values)
        relu_after = ad.analytic_gradient(relu_fn, relu_values)
    finally:
        ad.clear_corruption()
    np.testing.assert_allclose(bad["a"], 2.0 * clean["a"])
    assert np.array_equal(relu_after["x"], relu_clean["x"])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = ad.row_softmax(ad.constant(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_log_softmax_agrees_with_softmax(x):
    np.testing.assert_allclose(np.exp(ad.log_softmax(ad.constant(x)).data),
                               ad.row_softmax(ad.constant(x)).data, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite))
def test_layer_norm_standardises_rows(x):
    x = x + np.arange(6) * 0.1  # keeps every row non-constant
    y = ad.layer_norm(ad.constant(x), ad.constant(np.ones(6)), ad.constant(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_split_then_merge_heads_is_identity(batch, t, heads, dh):
    x = np.random.default_rng(0).normal(size=(batch * t, heads * dh))
    y = ad.merge_heads(ad.split_heads(ad.constant(x), heads, batch), batch)
    assert np.array_equal(y.data, x)


def test_split_heads_layout_is_sample_major():
    x = np.arange(2 * 3 * 4, dtype=float).reshape(6, 4)  # batch 2, T 3, d 4
    y = ad.split_heads(ad.constant(x), 2, batch=2).data
    assert y.shape == (4, 3, 2)
    assert np.array_equal(y[1], x[:3, 2:])   # sample 0, head 1
    assert np.array_equal(y[2], x[3:, :2])   # sample 1, head 0


def test_numeric_gradient_of_quadratic():
    fn = lambda p: ad.sum(ad.mul(p["x"], p["x"]))  # noqa: E731
    g = ad.numeric_gradient(fn, {"x": np.array([1.0, -2.0])})
    np.testing.assert_allclose(g["x"], [2.0, -4.0], atol=1e-8)
