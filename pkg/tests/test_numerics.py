import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd_oracle import central_difference, rel_err
from stratmoe import numerics as nx
from stratmoe.numerics import ParameterStore, ShapeError, Tape, TapeError, Tensor


def grad_check(build, shapes, seed=0, eps=1e-4, tol=1e-4, avoid_zero=False):
    """Compare tape gradients of sum(build(*params)) with central differences."""
    rng = np.random.default_rng(seed)
    params = []
    for shp in shapes:
        data = rng.normal(size=shp)
        if avoid_zero:
            data = np.where(np.abs(data) < 1e-2, 0.5, data)
        params.append(Tensor(data, requires_grad=True))
    # random projection so every output entry gets a distinct cotangent
    out_shape = build(*params).shape
    proj = Tensor(rng.normal(size=out_shape))

    def scalar():
        return float((build(*params).data * proj.data).sum())

    with Tape():
        out = nx.sum_all(nx.mul(build(*params), proj))
        nx.backward(out)
    for p in params:
        num = central_difference(scalar, p.data, eps)
        assert rel_err(p.grad, num) < tol


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_row_times_column(self):
        assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_sum_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
        b = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        with Tape():
            nx.backward(nx.sum_all(nx.matmul(a, b)))

        def f():
            return float((a.data @ b.data).sum())

        assert rel_err(a.grad, central_difference(f, a.data)) < 1e-4
        assert rel_err(b.grad, central_difference(f, b.data)) < 1e-4


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(nx.relu(Tensor([[-1, 0, 2]])).data, [[0, 0, 2]])

    def test_all_negative(self):
        assert not nx.relu(Tensor(-np.ones((3, 4)))).data.any()

    def test_gradient_is_positive_indicator(self):
        x = Tensor([[-1.5, 0.0, 2.0, 0.3]], requires_grad=True)
        with Tape():
            nx.backward(nx.sum_all(nx.relu(x)))
        np.testing.assert_array_equal(x.grad, [[0, 0, 1, 1]])

    def test_finite_differences_away_from_kink(self):
        grad_check(nx.relu, [(4, 6)], avoid_zero=True)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[0, 0, 0, 0]])).data, [[0.25] * 4])

    def test_analytic(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[math.log(1), math.log(3)]])).data,
                                   [[0.25, 0.75]], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_gradient(self):
        grad_check(nx.softmax_rows, [(3, 5)])

    @given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, a):
        s = nx.softmax_rows(Tensor(a)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
        assert (s >= 0).all() and (s <= 1).all()


class TestLayerNorm:
    def ones(self, n):
        return Tensor(np.ones((1, n))), Tensor(np.zeros((1, n)))

    def test_already_standardized(self):
        out = nx.layer_norm(Tensor([[1.0, -1.0]]), *self.ones(2), epsilon=0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]])

    def test_constant_row(self):
        out = nx.layer_norm(Tensor([[5.0, 5.0, 5.0]]), *self.ones(3), epsilon=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_random_rows_standardized(self):
        x = np.random.default_rng(3).normal(2.0, 4.0, size=(4, 8))
        out = nx.layer_norm(Tensor(x), *self.ones(8)).data
        assert np.abs(out.mean(axis=1)).max() < 1e-6
        assert np.abs(out.var(axis=1) - 1).max() < 1e-3

    def test_bad_gain_shape(self):
        with pytest.raises(ShapeError):
            nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))))

    def test_gradient_including_affine(self):
        grad_check(lambda x, g, b: nx.layer_norm(x, g, b), [(4, 6), (1, 6), (1, 6)])

    @given(arrays(np.float64, (2, 5), elements=st.floats(-100, 100)))
    def test_mean_zero(self, a):
        out = nx.layer_norm(Tensor(a), *self.ones(5)).data
        assert np.abs(out.mean(axis=1)).max() < 1e-6


class TestCrossEntropy:
    def test_uniform_two_class(self):
        assert nx.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))

    def test_confident(self):
        assert nx.cross_entropy(Tensor([[20.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            nx.cross_entropy(Tensor([[0.0, 0.0]]), [-100])

    def test_ignored_rows_get_no_gradient(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape():
            nx.backward(nx.cross_entropy(logits, [1, -100, 2]))
        assert not logits.grad[1].any()

    def test_gradient_through_softmax_path(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(6, 5)))
        targets = np.array([0, 2, 1, 1, -100, 0])
        with Tape():
            nx.backward(nx.cross_entropy(nx.matmul(x, w), targets))

        def f():
            return nx.cross_entropy(Tensor(x.data @ w.data), targets).item()

        assert rel_err(w.grad, central_difference(f, w.data)) < 1e-4


@pytest.mark.parametrize("name,build,shapes", [
    ("add_broadcast_row", lambda a, b: nx.add(a, b), [(4, 3), (1, 3)]),
    ("sub_broadcast_col", lambda a, b: nx.sub(a, b), [(4, 3), (4, 1)]),
    ("mul_broadcast", lambda a, b: nx.mul(a, b), [(4, 3), (4, 1)]),
    ("scale", lambda a: nx.scale(a, -2.5), [(2, 3)]),
    ("transpose", lambda a: nx.transpose(a), [(2, 5)]),
    ("mean_rows", lambda a: nx.mean_rows(a), [(5, 3)]),
    ("take_rows_repeat", lambda a: nx.take_rows(a, [2, 0, 2, 1]), [(3, 4)]),
    ("concat_rows", lambda a, b: nx.concat_rows([a, b]), [(2, 3), (4, 3)]),
    ("scatter_rows", lambda a: nx.scatter_rows(a, [3, 0, 3], 5), [(3, 2)]),
    ("pick", lambda a: nx.pick(a, [0, 2, 2], [1, 0, 3]), [(3, 4)]),
])
def test_op_gradients(name, build, shapes):
    grad_check(build, shapes)


@pytest.mark.parametrize("causal", [False, True])
def test_attention_gradient(causal):
    key_mask = np.array([[True, True, True, False], [True, True, True, True]])

    def build(q, k, v):
        return nx.attention(q, k, v, n_heads=2, batch=2, key_mask=key_mask, causal=causal)

    grad_check(build, [(8, 6), (8, 6), (8, 6)])


def test_attention_respects_key_mask():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    mask = np.array([[True, False, False]])
    out = nx.attention(q, k, v, n_heads=1, batch=1, key_mask=mask)
    # only the first key is visible, so every query returns v[0]
    np.testing.assert_allclose(out.data, np.tile(v.data[:1], (3, 1)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            nx.backward(nx.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_accumulates_without_zeroing(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        for _ in range(2):
            with Tape():
                nx.backward(nx.sum_all(nx.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, 6.0)

    def test_unreached_parameter_gets_zero(self):
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        unused = Tensor(np.ones((1, 2)), requires_grad=True)
        with Tape():
            nx.backward(nx.sum_all(x))
        assert not unused.grad.any()

    def test_output_not_on_tape(self):
        x = Tensor(np.ones((1, 1)), requires_grad=True)
        out = nx.sum_all(x)  # no tape active
        with pytest.raises(TapeError):
            nx.backward(out)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            with pytest.raises(ShapeError):
                nx.backward(nx.scale(x, 1.0))

    def test_each_node_visited_once(self):
        calls = []
        x = Tensor(np.ones((1, 1)), requires_grad=True)
        with Tape() as tape:
            y = nx.scale(x, 2.0)
            z = nx.add(y, y)
            out = nx.sum_all(z)
            wrapped = []
            for node in tape.nodes:
                o, parents, fn = node
                wrapped.append((o, parents, (lambda f, o=o: lambda g: calls.append(o) or f(g))(fn)))
            tape.nodes[:] = wrapped
            nx.backward(out)
        assert len(calls) == len(set(map(id, calls))) == 3
        assert x.grad[0, 0] == 4.0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            x = Tensor(rng.normal(size=(3, 4)))
            with Tape():
                out = nx.cross_entropy(nx.matmul(nx.relu(nx.matmul(x, w)), w), [0, 1, 2])
                nx.backward(out)
            return out.item(), w.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2 and np.array_equal(g1, g2)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        store = ParameterStore()
        p = store.add("w", np.array([[1.0, -2.0]]))
        nx.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.data, [[1.0, -2.0]])

    def test_first_step_moves_by_lr(self):
        store = ParameterStore()
        p = store.add("w", np.array([[0.0]]))
        p.grad[...] = 1.0
        nx.adam_step(store, lr=0.01)
        assert p.data[0, 0] == pytest.approx(-0.01, rel=1e-6)
        assert store.step == 1

    def test_converges_on_quadratic(self):
        store = ParameterStore()
        w = store.add("w", np.array([[0.0]]))
        for _ in range(2000):
            store.zero_grad()
            with Tape():
                d = nx.sub(w, Tensor(3.0))
                nx.backward(nx.sum_all(nx.mul(d, d)))
            nx.adam_step(store, lr=0.05, beta1=0.9, beta2=0.999)
        assert abs(w.data[0, 0] - 3.0) < 1e-2

    def test_duplicate_name(self):
        store = ParameterStore()
        store.add("w", np.zeros((1, 1)))
        with pytest.raises(KeyError):
            store.add("w", np.zeros((1, 1)))


class TestInverseSqrt:
    def test_peak_at_warmup(self):
        assert nx.inverse_sqrt_lr(100, 100, 8e-4) == pytest.approx(8e-4)

    def test_quarter_decay(self):
        assert nx.inverse_sqrt_lr(400, 100, 8e-4) == pytest.approx(4e-4)

    def test_linear_ramp(self):
        assert nx.inverse_sqrt_lr(50, 100, 8e-4) == pytest.approx(4e-4)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            nx.inverse_sqrt_lr(0, 100, 1e-3)

    @given(st.integers(1, 10_000), st.integers(1, 1000))
    @settings(max_examples=200)
    def test_never_exceeds_peak(self, step, warmup):
        assert 0 < nx.inverse_sqrt_lr(step, warmup, 1.0) <= 1.0


def test_glorot_bounds():
    w = nx.glorot_uniform(np.random.default_rng(0), 30, 50)
    assert np.abs(w).max() <= math.sqrt(6 / 80)
