import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterlab import autodiff as ad

from helpers import assert_grads_close, finite_difference_grad


def test_matmul_identity():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3))
    eye = ad.Tensor(np.eye(2))
    out = ad.matmul(eye, x)
    np.testing.assert_array_equal(out.data, x.data)


def test_softmax_symmetry():
    out = ad.softmax(ad.Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_layer_norm_constant_vector_returns_bias():
    x = ad.Tensor(np.full((1, 4), 3.7))
    gamma = ad.Tensor(np.ones(4))
    beta = ad.Tensor(np.arange(4.0))
    out = ad.layer_norm(x, gamma, beta)
    np.testing.assert_allclose(out.data, beta.data[None, :], atol=1e-9)


def test_shape_mismatch_names_op_and_shapes():
    a = ad.Tensor(np.zeros((2, 3)))
    b = ad.Tensor(np.zeros((4, 2)))
    with pytest.raises(ad.ShapeMismatch) as exc:
        ad.matmul(a, b)
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_non_finite_input_rejected():
    a = ad.Tensor([1.0, np.inf])
    with pytest.raises(ad.NonFiniteInput):
        ad.relu(a)


def test_backward_sum_gives_ones():
    x = ad.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    x = ad.Tensor([3.0], requires_grad=True)
    ad.backward(ad.tsum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_non_scalar_root_errors():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.mul(x, x))


def test_backward_accumulates_without_zero_grad():
    x = ad.Tensor([2.0], requires_grad=True)
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(ad.tsum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * first)


def test_no_graph_mode_records_nothing():
    x = ad.Tensor(np.ones((2, 2)))
    y = ad.gelu(ad.matmul(x, x))
    assert y._parents == () and y._backward is None and not y.requires_grad
    with pytest.raises(ad.GraphError):
        ad.backward(ad.tsum(y))


OP_CASES = {
    "add": lambda rng: (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": lambda rng: (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": lambda rng: (lambda a, b: ad.sub(a, b), [(2, 5), (2, 5)]),
    "mul": lambda rng: (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "div": lambda rng: (lambda a, b: ad.div(a, ad.add(ad.mul(b, b), ad.Tensor(np.ones(b.shape)))), [(3, 4), (3, 4)]),
    "matmul": lambda rng: (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": lambda rng: (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "softmax": lambda rng: (lambda a: ad.softmax(a), [(3, 5)]),
    "gelu": lambda rng: (lambda a: ad.gelu(a), [(3, 4)]),
    "relu": lambda rng: (lambda a: ad.relu(ad.add(a, ad.Tensor(np.full((3, 4), 0.3)))), [(3, 4)]),
    "tanh": lambda rng: (lambda a: ad.tanh(a), [(3, 4)]),
    "sqrt": lambda rng: (lambda a: ad.sqrt(ad.add(ad.mul(a, a), ad.Tensor(np.ones(a.shape)))), [(3, 4)]),
    "reshape": lambda rng: (lambda a, _c=ad.Tensor(rng.normal(size=(4, 3))): ad.mul(ad.reshape(a, (4, 3)), _c), [(3, 4)]),
    "transpose": lambda rng: (lambda a, _c=ad.Tensor(rng.normal(size=(4, 3))): ad.mul(ad.transpose(a, (1, 0)), _c), [(3, 4)]),
    "mean": lambda rng: (lambda a: ad.mean(a, axis=1), [(3, 4)]),
    "sum_axis": lambda rng: (lambda a: ad.tsum(a, axis=0), [(3, 4)]),
    "layer_norm": lambda rng: (
        lambda a, g, b: ad.layer_norm(a, g, b),
        [(3, 6), (6,), (6,)],
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    op_fn, shapes = OP_CASES[name](rng)
    tensors = [ad.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    # squared output keeps the reduced loss sensitive to every element
    probe = ad.Tensor(rng.normal(size=op_fn(*tensors).shape))

    def forward():
        out = op_fn(*tensors)
        return ad.tsum(ad.mul(out, probe))

    loss = forward()
    ad.backward(loss)
    for t in tensors:
        numeric = finite_difference_grad(lambda: forward().item(), t.data)
        assert_grads_close(t.grad, numeric)


def test_embedding_gradient_scatters():
    table = ad.Tensor(np.random.default_rng(1).normal(size=(5, 3)), requires_grad=True)
    ids = np.array([0, 2, 2])
    out = ad.embedding(table, ids)
    ad.backward(ad.tsum(out))
    expected = np.zeros((5, 3))
    expected[0] = 1.0
    expected[2] = 2.0
    np.testing.assert_allclose(table.grad, expected)


def test_embedding_rejects_out_of_range():
    table = ad.Tensor(np.zeros((4, 2)))
    with pytest.raises(ad.OpError):
        ad.embedding(table, np.array([4]))


def test_cross_entropy_uniform_logits():
    logits = ad.Tensor(np.zeros((2, 7)), requires_grad=True)
    loss = ad.cross_entropy(logits, np.array([1, 3]))
    np.testing.assert_allclose(loss.item(), np.log(7.0))


def test_cross_entropy_ignore_index_and_gradcheck():
    rng = np.random.default_rng(7)
    logits = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    targets = np.array([1, -1, 3, 0])

    def forward():
        return ad.cross_entropy(logits, targets, ignore_index=-1)

    ad.backward(forward())
    numeric = finite_difference_grad(lambda: forward().item(), logits.data)
    assert_grads_close(logits.grad, numeric)
    # ignored row contributes no gradient
    np.testing.assert_array_equal(logits.grad[1], np.zeros(5))


def test_cross_entropy_all_ignored_errors():
    logits = ad.Tensor(np.zeros((2, 3)))
    with pytest.raises(ad.OpError):
        ad.cross_entropy(logits, np.array([-1, -1]), ignore_index=-1)


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(42)
    dims = [4, 6, 5, 3]
    params = {}
    for i in range(3):
        params[f"w{i}"] = ad.Tensor(rng.normal(size=(dims[i], dims[i + 1])) * 0.5, requires_grad=True)
        params[f"b{i}"] = ad.Tensor(rng.normal(size=(dims[i + 1],)) * 0.1, requires_grad=True)
    x = np.asarray(rng.normal(size=(2, 4)))
    targets = np.array([0, 2])

    def forward():
        h = ad.Tensor(x)
        for i in range(3):
            h = ad.add(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"])
            if i < 2:
                h = ad.gelu(h)
        return ad.cross_entropy(h, targets)

    ad.backward(forward())
    for name, p in params.items():
        numeric = finite_difference_grad(lambda: forward().item(), p.data)
        assert_grads_close(p.grad, numeric)


def test_forward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(123)
        x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = ad.mean(ad.gelu(ad.matmul(x, w)))
        ad.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(ad.Tensor([vals]))
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-12)
    assert (out.data >= 0).all()


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = ad.AdamState(learning_rate=0.1)
        ad.adam_step(state, {"p": p})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_magnitude_equals_lr(self):
        # hand evaluation: m_hat = g, v_hat = g^2, update = lr * g/(|g|+eps) ~= lr
        p = ad.Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = ad.AdamState(learning_rate=0.1)
        ad.adam_step(state, {"p": p})
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-8)

    def test_step_counter_increments(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        state = ad.AdamState()
        for _ in range(2):
            p.grad = np.array([0.5])
            ad.adam_step(state, {"p": p})
        assert state.step == 2

    def test_missing_grad_names_parameter(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ad.MissingGradient, match="w_up"):
            ad.adam_step(ad.AdamState(), {"w_up": p})

    def test_grads_untouched_by_step(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.25])
        ad.adam_step(ad.AdamState(), {"p": p})
        np.testing.assert_array_equal(p.grad, [0.25])

    def test_matches_hand_computed_two_steps(self):
        # grad 1.0 then 2.0 on a scalar, lr=0.1, default betas
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x = 0.0
        m = v = 0.0
        for t, g in enumerate([1.0, 2.0], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        p = ad.Tensor(np.array([0.0]), requires_grad=True)
        state = ad.AdamState(learning_rate=lr)
        for g in [1.0, 2.0]:
            p.grad = np.array([g])
            ad.adam_step(state, {"p": p})
        np.testing.assert_allclose(p.data, [x], atol=1e-12)
