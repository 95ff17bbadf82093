import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordiff import numerics as nx
from affordiff.checks import TOLERANCE, primitive_cases, primitive_suite


def test_sum_of_squares_gradient():
    rep = nx.grad_check(lambda x: nx.sum(nx.square(x)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(rep.analytic, [2.0, 4.0])
    np.testing.assert_allclose(rep.numeric, [2.0, 4.0], rtol=1e-8)
    assert rep.passed


def test_corrupted_gradient_fails():
    f = lambda x: nx.sum(nx.square(x))  # noqa: E731
    rep = nx.grad_check(f, np.array([1.0, 2.0]), analytic=np.array([4.0, 8.0]))
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5)


def test_matmul_shapes():
    a = nx.Tensor(np.ones((2, 3)))
    b = nx.Tensor(np.ones((3, 4)))
    assert nx.matmul(a, b).shape == (2, 4)
    with pytest.raises(nx.ShapeError):
        nx.matmul(a, nx.Tensor(np.ones((2, 4))))


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(0)
    q = nx.Tensor(rng.normal(size=(3, 4)))
    k = nx.Tensor(rng.normal(size=(5, 4)))
    v = nx.Tensor(np.tile(np.arange(5.0)[:, None], (1, 4)))
    out = nx.attention(q, k, v).data
    assert np.all(out >= 0) and np.all(out <= 4)


def test_attention_fully_masked_row_is_zero_and_warns():
    q = nx.Tensor(np.ones((2, 4)))
    k = nx.Tensor(np.ones((3, 4)))
    v = nx.Tensor(np.ones((3, 4)))
    with pytest.warns(nx.DegenerateMaskWarning):
        out = nx.attention(q, k, v, mask=np.zeros(3, dtype=bool))
    np.testing.assert_array_equal(out.data, 0.0)


def test_attention_masked_keys_get_no_weight():
    rng = np.random.default_rng(1)
    q = nx.Tensor(rng.normal(size=(2, 4)))
    k = nx.Tensor(rng.normal(size=(3, 4)))
    v = rng.normal(size=(3, 4))
    mask = np.array([True, True, False])
    a = nx.attention(q, k, nx.Tensor(v), mask).data
    v2 = v.copy()
    v2[2] = 1e3
    b = nx.attention(q, k, nx.Tensor(v2), mask).data
    np.testing.assert_array_equal(a, b)


def test_nonfinite_output_raises():
    x = nx.Tensor(np.array([1e308, 1e308]))
    with np.errstate(over="ignore"), pytest.raises(nx.NonFiniteError):
        nx.mul(x, x)


def test_mse_mask_must_select_something():
    with pytest.raises(ValueError):
        nx.mse(nx.Tensor(np.ones(3)), np.zeros(3), np.zeros(3, dtype=bool))


def test_masked_mse_ignores_unselected_entries():
    pred = nx.Tensor(np.array([1.0, 2.0, 3.0]))
    mask = np.array([True, False, True])
    a = nx.mse(pred, np.array([0.0, 0.0, 0.0]), mask).data
    b = nx.mse(pred, np.array([0.0, 99.0, 0.0]), mask).data
    assert a == b == pytest.approx(5.0)


def test_gradient_of_unreachable_source_is_zero():
    a = nx.Tensor(np.ones(3), requires_grad=True)
    b = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.GradientTape() as tape:
        y = nx.sum(nx.square(a))
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_array_equal(ga, 2.0)
    np.testing.assert_array_equal(gb, 0.0)


def test_broadcast_gradient_is_reduced():
    x = nx.Tensor(np.ones((4, 3)), requires_grad=True)
    b = nx.Tensor(np.arange(3.0), requires_grad=True)
    with nx.GradientTape() as tape:
        y = nx.sum(nx.add(x, b))
    _, gb = tape.gradient(y, [x, b])
    np.testing.assert_array_equal(gb, 4.0)


def test_default_dtype_context_restores():
    before = nx.get_default_dtype()
    with nx.default_dtype(np.float64):
        assert nx.Tensor([1.0]).dtype == np.float64
        with nx.default_dtype(np.float32):
            assert nx.Tensor([1.0]).dtype == np.float32
        assert nx.Tensor([1.0]).dtype == np.float64
    assert nx.get_default_dtype() == before


def test_float_arrays_keep_their_precision():
    assert nx.Tensor(np.ones(2, dtype=np.float64)).dtype == np.float64
    assert nx.Tensor(np.ones(2, dtype=np.float32)).dtype == np.float32


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_primitive_suite(dtype):
    results = primitive_suite(dtype, range(10))
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_primitives_deterministic(seed):
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(seed)
        outs.append([float(f(nx.Tensor(p)).data) for _, f, p in primitive_cases(rng, np.float64)])
    assert outs[0] == outs[1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_primitive_gradients_random_instances(seed):
    rng = np.random.default_rng(seed)
    for name, f, p in primitive_cases(rng, np.float64):
        rep = nx.grad_check(f, p, tol=TOLERANCE[np.dtype(np.float64)])
        assert rep.passed, (name, rep.max_rel_error)


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(2)
    x = nx.Tensor(rng.normal(3.0, 2.0, size=(5, 16)))
    y = nx.layer_norm(x, nx.Tensor(np.ones(16)), nx.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-5)


def test_embedding_repeated_ids_accumulate():
    table = nx.Tensor(np.zeros((4, 2)), requires_grad=True)
    with nx.GradientTape() as tape:
        y = nx.sum(nx.embedding(table, np.array([1, 1, 3])))
    (g,) = tape.gradient(y, [table])
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 1])


def test_no_warning_for_partial_mask():
    q = nx.Tensor(np.ones((1, 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        nx.attention(q, q, q, mask=np.array([True]))
