import numpy as np
import pytest

from latentvr import autograd as ag
from latentvr.autograd import Tensor

from oracles import central_difference, rel_err, tape_grads, worst_grad_error


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_selector(self):
        out = ag.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert worst_grad_error(lambda: ag.matmul(a, b).sum(), [a, b]) <= 1e-6

    def test_batched_activations_against_weight(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
        w = rng.normal(size=(2, 3, 5))
        assert worst_grad_error(lambda: (ag.matmul(a, b) * w).sum(), [a, b]) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_closed_form(self):
        np.testing.assert_allclose(ag.softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3])

    def test_jvp(self):
        rng = np.random.default_rng(2)
        x, w = leaf(rng.normal(size=8)), rng.normal(size=8)
        assert worst_grad_error(lambda: (ag.softmax(x) * w).sum(), [x]) <= 1e-6


class TestCrossEntropy:
    def test_perfect_prediction(self):
        logits = np.full((3, 4), -1e3)
        logits[np.arange(3), [0, 2, 3]] = 0.0
        assert ag.cross_entropy(Tensor(logits), [0, 2, 3]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_vocab(self):
        loss = ag.cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0])
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_mask_is_mean_over_kept(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 5))
        t = rng.integers(0, 5, size=6)
        mask = np.array([1, 0, 1, 0, 1, 0], dtype=bool)
        direct = np.mean([np.log(np.exp(x[i]).sum()) - x[i, t[i]] for i in np.nonzero(mask)[0]])
        assert ag.cross_entropy(Tensor(x), t, mask).item() == pytest.approx(direct, rel=1e-12)

    def test_weights(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 3))
        t = [0, 1, 2, 0]
        w = np.array([0.5, 0.0, 0.25, 0.25])
        nll = [np.log(np.exp(x[i]).sum()) - x[i, t[i]] for i in range(4)]
        assert ag.cross_entropy(Tensor(x), t, weights=w).item() == pytest.approx(np.dot(w, nll))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(5, 6)))
        t, m = rng.integers(0, 6, size=5), np.array([1, 1, 0, 1, 0], bool)
        assert worst_grad_error(lambda: ag.cross_entropy(x, t, m), [x]) <= 1e-6

    def test_everything_masked(self):
        with pytest.raises(ag.EmptyLossError):
            ag.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


class TestMse:
    def test_equal(self):
        assert ag.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_example(self):
        assert ag.mse(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 2.0

    def test_gradient_is_two_diff(self):
        rng = np.random.default_rng(6)
        a, b = leaf(rng.normal(size=7)), Tensor(rng.normal(size=7))
        (g,) = tape_grads(lambda: ag.mse(a, b), [a])
        np.testing.assert_allclose(g, 2 * (a.data - b.data), rtol=1e-14)
        assert worst_grad_error(lambda: ag.mse(a, b), [a]) <= 1e-6


class TestAttention:
    def test_rows_are_distributions_over_prefix(self):
        rng = np.random.default_rng(7)
        q, k, v = (Tensor(rng.normal(size=(2, 5, 3))) for _ in range(3))
        _, p = ag.attention(q, k, v, ag.causal_mask(5))
        np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
        assert np.all(np.triu(p, 1) == 0.0)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        q, k, v = (leaf(rng.normal(size=(2, 4, 3))) for _ in range(3))
        w = rng.normal(size=(2, 4, 3))
        fn = lambda: (ag.attention(q, k, v, ag.causal_mask(4))[0] * w).sum()
        assert worst_grad_error(fn, [q, k, v]) <= 1e-6

    def test_dead_row(self):
        m = np.ones((2, 2), bool)
        m[1] = False
        with pytest.raises(ag.MaskedRowError):
            ag.attention(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 2, 2))),
                         Tensor(np.ones((1, 2, 2))), m)


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu2", "rmsnorm", "mean", "getitem",
                                "concat", "embedding", "replace_rows", "scatter_rows"])
def test_elementary_gradients(op):
    rng = np.random.default_rng(9)
    x = leaf(rng.normal(size=(4, 3)))
    y = leaf(rng.normal(size=(2, 3)))
    w = rng.normal(size=(4, 3))
    fns = {
        "sigmoid": lambda: (ag.sigmoid(x) * w).sum(),
        "tanh": lambda: (ag.tanh(x) * w).sum(),
        "relu2": lambda: (ag.relu2(x) * w).sum(),
        "rmsnorm": lambda: (ag.rmsnorm(x, y[0]) * w).sum(),
        "mean": lambda: (ag.mean(x * w, axis=0) * y[1]).sum(),
        "getitem": lambda: (x[np.array([0, 2, 2])] * w[:3]).sum(),
        "concat": lambda: (ag.concat([x, y], axis=0) * np.ones((6, 3))).sum() + (x * w).sum(),
        "embedding": lambda: (ag.embedding(x, [3, 1, 3]) * w[:3]).sum(),
        "replace_rows": lambda: (ag.replace_rows(x, [1, 3], y) * w).sum(),
        "scatter_rows": lambda: (ag.scatter_rows(y, [2, 0], 4) * w).sum(),
    }
    assert worst_grad_error(fns[op], [x, y]) <= 1e-6


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    with ag.Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    with pytest.raises(ag.AutogradError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ag.Tape() as tape:
        with ag.no_grad():
            (x * x).sum()
    assert len(tape) == 0


def test_gradcheck_helper_agrees_with_independent_differences():
    rng = np.random.default_rng(10)
    a = leaf(rng.normal(size=(3, 3)))
    err = ag.gradcheck(lambda t: (ag.tanh(t) * t).sum(), [a])
    assert err <= 1e-6
    num = central_difference(lambda: float(np.sum(np.tanh(a.data) * a.data)), a.data)
    assert rel_err(ag.numerical_grad(lambda: float(np.sum(np.tanh(a.data) * a.data)), a.data),
                   num) <= 1e-9
