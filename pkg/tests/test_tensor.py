import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtrxl import tensor as tc
from gtrxl.gradcheck import check_gradients, finite_diff_grad, relative_error
from gtrxl.optim import AdamState, adam_step
from gtrxl.oracles import loop_contract_av, loop_contract_qk, loop_layer_norm
from gtrxl.tensor import ContractError, DimensionError, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = tc.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert tc.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
    tc.backward(tc.sum(tc.matmul(a, b)))
    numeric = finite_diff_grad(lambda x: tc.sum(tc.matmul(x, b)), a)
    assert relative_error(a.grad, numeric) < 1e-6


# --- batched contractions ---------------------------------------------------


def test_contract_qk_scalar_case():
    assert tc.batched_contract_qk([[[2.0]]], [[[3.0]]]).data.tolist() == [[[6.0]]]


def test_contract_qk_orthogonal_rows_give_zero():
    q = np.array([[[1.0, 0.0]]])
    k = np.array([[[0.0, 5.0], [0.0, -2.0]]])
    np.testing.assert_array_equal(tc.batched_contract_qk(q, k).data, np.zeros((1, 1, 2)))


def test_contract_qk_matches_loops(rng):
    q, k = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(tc.batched_contract_qk(q, k).data, loop_contract_qk(q, k), rtol=0, atol=1e-12)


def test_contract_qk_rejects_head_mismatch():
    with pytest.raises(DimensionError):
        tc.batched_contract_qk(np.ones((2, 3, 4)), np.ones((3, 3, 4)))
    with pytest.raises(DimensionError):
        tc.batched_contract_qk(np.ones((2, 3, 4)), np.ones((2, 3, 5)))


def test_contract_av_one_hot_selects_row(rng):
    v = rng.normal(size=(1, 4, 3))
    w = np.zeros((1, 1, 4))
    w[0, 0, 2] = 1.0
    np.testing.assert_array_equal(tc.batched_contract_av(w, v).data[0, 0], v[0, 2])


def test_contract_av_uniform_weights_average(rng):
    v = rng.normal(size=(1, 4, 3))
    w = np.full((1, 1, 4), 0.25)
    np.testing.assert_allclose(tc.batched_contract_av(w, v).data[0, 0], v[0].mean(axis=0), atol=1e-15)


def test_contract_av_matches_loops(rng):
    w, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(tc.batched_contract_av(w, v).data, loop_contract_av(w, v), rtol=0, atol=1e-12)


# --- layer norm -------------------------------------------------------------


def test_layer_norm_already_normalized_row():
    out = tc.layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_constant_row_returns_bias():
    bias = np.array([0.5, -2.0, 3.0])
    out = tc.layer_norm(np.full((1, 3), 7.0), np.ones(3), bias).data
    np.testing.assert_allclose(out[0], bias, atol=1e-12)


def test_layer_norm_statistics(rng):
    x = rng.normal(3.0, 5.0, size=(6, 16))
    out = tc.layer_norm(x, np.ones(16), np.zeros(16)).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)


def test_layer_norm_matches_loop_oracle(rng):
    x, g, b = rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(tc.layer_norm(x, g, b).data, loop_layer_norm(x, g, b), atol=1e-12)


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng, 4, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.normal(size=(4, 8))
    errs = check_gradients(lambda: tc.sum(tc.layer_norm(x, g, b) * w), {"x": x, "g": g, "b": b})
    assert max(errs.values()) < 1e-5


# --- masked softmax ---------------------------------------------------------


def test_softmax_uniform():
    out = tc.masked_softmax(np.zeros((1, 1, 3)), np.ones((1, 3), dtype=bool)).data
    np.testing.assert_allclose(out[0, 0], [1 / 3] * 3, atol=1e-15)


def test_softmax_two_way_closed_form():
    out = tc.masked_softmax(np.array([[[1.0, 2.0, 3.0]]]), np.array([[True, True, False]])).data[0, 0]
    e = math.e
    np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e), 0.0], atol=1e-12)
    assert out[2] == 0.0


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(2, 3, 4))
    mask = np.tril(np.ones((3, 4), dtype=bool), k=1)
    a = tc.masked_softmax(x, mask).data
    b = tc.masked_softmax(x + 17.5, mask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_overflow_safe():
    out = tc.masked_softmax(np.array([[[1000.0, 1001.0]]]), np.ones((1, 2), dtype=bool)).data
    assert np.all(np.isfinite(out))


def test_softmax_fully_masked_row_zeros_with_warning():
    mask = np.array([[True, False], [False, False]])
    with pytest.warns(RuntimeWarning):
        out = tc.masked_softmax(np.ones((1, 2, 2)), mask).data
    np.testing.assert_array_equal(out[0, 1], [0.0, 0.0])
    np.testing.assert_array_equal(out[0, 0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(T, S, seed):
    rng = np.random.default_rng(seed)
    mask = np.tril(np.ones((T, S + T), dtype=bool), k=S)
    out = tc.masked_softmax(rng.normal(scale=10.0, size=(2, T, S + T)), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out[:, ~mask] == 0.0)
    assert np.all(out[:, mask] > 0.0)


# --- activations --------------------------------------------------------------


def test_activation_values():
    assert tc.activation("sigmoid", 0.0).item() == 0.5
    assert tc.activation("tanh", 0.0).item() == 0.0
    assert tc.activation("relu", -3.0).item() == 0.0
    assert tc.activation("relu", 3.0).item() == 3.0


def test_activation_unknown_kind():
    with pytest.raises(ContractError):
        tc.activation("gelu", 1.0)


def test_tanh_gradient_is_analytic(rng):
    x = leaf(rng, 10)
    tc.backward(tc.sum(tc.tanh(x)))
    np.testing.assert_allclose(x.grad, 1.0 - np.tanh(x.data) ** 2, atol=1e-10)


def test_sigmoid_stable_for_large_inputs():
    out = tc.sigmoid(np.array([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


# --- backward and stop-gradient --------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = leaf(rng, 3, 2)
    tc.backward(tc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_stop_gradient_contract(rng):
    x, y = leaf(rng, 4), leaf(rng, 4)
    tc.backward(tc.sum(tc.stop_gradient(x) * y))
    np.testing.assert_array_equal(y.grad, x.data)
    assert x.grad is None


def test_stop_gradient_contributes_zero_upstream(rng):
    x = leaf(rng, 4)
    tc.backward(tc.sum(x * 3.0 + tc.stop_gradient(x * x) * 5.0))
    np.testing.assert_array_equal(x.grad, np.full(4, 3.0))


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        tc.backward(leaf(rng, 2) * 2.0)


def test_tape_visits_each_node_once(rng):
    x = leaf(rng, 3)
    h = tc.tanh(x)
    loss = tc.sum(h * h + h)  # h is shared by two consumers
    tape = tc.Tape(loss)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    assert tape.nodes[-1] is loss
    assert tape.leaves() == [x]


def test_replaying_tape_is_bit_identical(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    loss = tc.sum(tc.tanh(tc.matmul(a, b)) * tc.sigmoid(tc.matmul(a, b)))
    tape = tc.backward(loss)
    first = (a.grad.copy(), b.grad.copy())
    a.grad = b.grad = None
    tc.backward(loss, tape)
    np.testing.assert_array_equal(first[0], a.grad)
    np.testing.assert_array_equal(first[1], b.grad)


def test_gradients_accumulate_over_calls(rng):
    x = leaf(rng, 2)
    tc.backward(tc.sum(x))
    tc.backward(tc.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 2)
    with tc.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_tensor_invariants():
    t = Tensor([[1, 2, 3]])
    assert t.shape == (1, 3) and t.data.dtype == np.float64 and t.size == 3


@pytest.mark.parametrize("rank", [1, 2, 3, 4])
def test_elementwise_gradients_every_rank(rank, rng):
    shape = (2, 3, 2, 2)[:rank]
    x, y = leaf(rng, *shape), leaf(rng, *shape)
    w = rng.normal(size=shape)
    errs = check_gradients(lambda: tc.sum((tc.tanh(x) * tc.sigmoid(y) + tc.exp(x * 0.3) - tc.relu(y)) * w),
                           {"x": x, "y": y})
    assert max(errs.values()) < 1e-5


# --- finite differences ----------------------------------------------------------


def test_finite_diff_quadratic():
    x = Tensor([1.0, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda t: tc.sum(t * t), x), [2.0, 4.0], atol=1e-6)


@pytest.mark.parametrize("h", [1e-2, 1e-4, 1e-6])
def test_finite_diff_linear_is_step_independent(h):
    x = Tensor([0.3, -1.2, 2.0])
    c = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(finite_diff_grad(lambda t: tc.sum(t * c), x, h), c, rtol=1e-7)


def test_finite_diff_leaves_input_unchanged(rng):
    x = leaf(rng, 3)
    before = x.data.copy()
    finite_diff_grad(lambda t: tc.sum(t * t), x)
    np.testing.assert_array_equal(x.data, before)


def test_finite_diff_agrees_with_backward_on_composition(rng):
    x, w = leaf(rng, 4, 6), leaf(rng, 6, 8)
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    probe = rng.normal(size=(4, 8))
    errs = check_gradients(lambda: tc.sum(tc.layer_norm(tc.matmul(x, w), g, b) * probe), {"x": x, "w": w})
    assert max(errs.values()) < 1e-5


# --- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState.for_params([p], lr=0.1)
    assert adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.array([1.0])], state)
    np.testing.assert_allclose(p.data, [0.9], atol=1e-8)
    assert state.step == 1


def test_adam_nan_gradient_signals_divergence():
    p = Tensor([1.0, 2.0], requires_grad=True)
    state = AdamState.for_params([p], lr=0.1)
    assert not adam_step([p], [np.array([np.nan, 1.0])], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 0


def test_adam_state_shapes_and_counter(rng):
    params = [leaf(rng, 3, 2), leaf(rng, 5)]
    state = AdamState.for_params(params)
    for k in range(1, 4):
        adam_step(params, [rng.normal(size=p.shape) for p in params], state)
        assert state.step == k
    assert [m.shape for m in state.m] == [(3, 2), (5,)]
    assert [v.shape for v in state.v] == [(3, 2), (5,)]


def test_adam_is_deterministic(rng):
    grads = [rng.normal(size=4) for _ in range(5)]
    results = []
    for _ in range(2):
        p = Tensor(np.arange(4.0), requires_grad=True)
        state = AdamState.for_params([p], lr=0.01)
        for g in grads:
            adam_step([p], [g], state)
        results.append(p.data.copy())
    np.testing.assert_array_equal(*results)


def test_layer_norm_warning_free(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tc.layer_norm(np.zeros((2, 4)), np.ones(4), np.zeros(4))
