import threading

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relsem import autodiff as ad


def _check(f, *shapes, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    params = [ad.Tensor(rng.normal(size=s) * scale, requires_grad=True) for s in shapes]
    return ad.gradient_check(f, params)


class TestBackward:
    def test_mean_gradient(self):
        W = ad.Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_mean(W)
        (g,) = ad.backward(tape, loss, [W])
        np.testing.assert_array_equal(g, np.full((2, 2), 0.25))
        np.testing.assert_array_equal(W.grad, g)

    def test_relu_subgradient_at_zero(self):
        W = ad.Tensor([[-1.0, 2.0, 0.0]], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.relu(W))
        (g,) = ad.backward(tape, loss, [W])
        np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])

    def test_non_scalar_loss_rejected(self):
        W = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.Tape() as tape:
            out = ad.relu(W)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(tape, out, [W])

    def test_unreachable_parameter_gets_zero(self):
        a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        b = ad.Tensor(np.ones((3, 1)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(a)
        ga, gb = ad.backward(tape, loss, [a, b])
        np.testing.assert_array_equal(ga, np.ones((2, 2)))
        np.testing.assert_array_equal(gb, np.zeros((3, 1)))

    def test_shared_input_accumulates(self):
        x = ad.Tensor([[3.0]], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(x * x + x)
        (g,) = ad.backward(tape, loss, [x])
        assert g[0, 0] == pytest.approx(7.0)

    def test_gradient_shapes_match_values(self):
        rng = np.random.default_rng(1)
        W = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_mean(ad.tanh(ad.matmul(rng.normal(size=(5, 3)), W) + b))
        for t, g in zip((W, b), ad.backward(tape, loss, [W, b])):
            assert g.shape == t.shape

    def test_tapes_are_thread_confined(self):
        seen = {}

        def work(name):
            x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
            with ad.Tape() as tape:
                ad.reduce_sum(ad.relu(x))
            seen[name] = len(tape)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert set(seen.values()) == {2}

    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(5)
            x = ad.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
            with ad.Tape() as tape:
                h = ad.dropout(ad.elu(x), 0.5, rng, training=True)
                loss = ad.reduce_mean(ad.sigmoid(h))
            return ad.backward(tape, loss, [x])[0]

        np.testing.assert_array_equal(run(), run())


class TestGradientCheck:
    def test_quadratic(self):
        x = ad.Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        res = ad.gradient_check(lambda p: ad.reduce_sum(p[0] * p[0]), [x])
        assert res.max_rel_error < 1e-7
        assert res.checked == 3

    def test_kink_coordinate_skipped(self):
        x = ad.Tensor([[0.0, 1.5]], requires_grad=True)
        res = ad.gradient_check(lambda p: ad.reduce_sum(ad.relu(p[0])), [x])
        assert res.skipped == [(0, (0, 0))]
        assert res.checked == 1

    def test_detects_wrong_gradient(self):
        def bad(x):
            x = ad.as_tensor(x)
            return ad._record("bad", x.value ** 2, (x,), lambda g: (g * x.value,))

        x = ad.Tensor([[1.0, -2.0]], requires_grad=True)
        assert ad.gradient_check(lambda p: ad.reduce_sum(bad(p[0])), [x]).max_rel_error > 0.1

    def test_sampled_coordinates(self):
        x = ad.Tensor(np.ones((10, 10)), requires_grad=True)
        res = ad.gradient_check(lambda p: ad.reduce_sum(ad.tanh(p[0])), [x], max_coords=7)
        assert res.checked == 7


A = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 2], [0, 0, 1.5]]))
SEG = np.array([0, 0, 1, 2, 2, 2])


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,f,shapes", [
        ("matmul", lambda p: ad.reduce_sum(ad.matmul(p[0], p[1])), [(3, 4), (4, 2)]),
        ("spmm", lambda p: ad.reduce_sum(ad.tanh(ad.spmm(A, p[0]))), [(3, 2)]),
        ("add-broadcast", lambda p: ad.reduce_sum(ad.tanh(p[0] + p[1])), [(3, 4), (1, 4)]),
        ("sub", lambda p: ad.reduce_sum(ad.tanh(p[0] - p[1])), [(3, 4), (3, 4)]),
        ("mul-broadcast", lambda p: ad.reduce_sum(ad.mul(p[0], p[1])), [(3, 4), (3, 1)]),
        ("concat", lambda p: ad.reduce_sum(ad.tanh(ad.concat([p[0], p[1]]))), [(3, 2), (3, 1)]),
        ("relu", lambda p: ad.reduce_sum(ad.relu(p[0]) * p[0]), [(4, 3)]),
        ("leaky_relu", lambda p: ad.reduce_sum(ad.leaky_relu(p[0]) * p[0]), [(4, 3)]),
        ("elu", lambda p: ad.reduce_sum(ad.elu(p[0]) * p[0]), [(4, 3)]),
        ("tanh", lambda p: ad.reduce_sum(ad.tanh(p[0])), [(4, 3)]),
        ("sigmoid", lambda p: ad.reduce_sum(ad.sigmoid(p[0]) * p[0]), [(4, 3)]),
        ("row_l2_normalize", lambda p: ad.reduce_sum(ad.mul(ad.row_l2_normalize(p[0]), p[1])), [(4, 3), (4, 3)]),
        ("segment_softmax", lambda p: ad.reduce_sum(ad.mul(ad.segment_softmax(p[0], SEG, 3), p[1])), [(6, 2), (6, 2)]),
        ("segment_sum", lambda p: ad.reduce_sum(ad.tanh(ad.segment_sum(p[0], SEG, 3))), [(6, 2)]),
        ("segment_mean", lambda p: ad.reduce_sum(ad.tanh(ad.segment_mean(p[0], SEG, 4))), [(6, 2)]),
        ("gather_rows", lambda p: ad.reduce_sum(ad.tanh(ad.gather_rows(p[0], [2, 0, 2]))), [(3, 2)]),
        ("scatter_rows", lambda p: ad.reduce_sum(ad.tanh(ad.scatter_rows(p[0], [3, 1], 5))), [(2, 2)]),
        ("bce", lambda p: ad.reduce_mean(ad.bce_with_logits(p[0], np.eye(3)[:, :2])), [(3, 2)]),
        ("reduce_sum-axis", lambda p: ad.reduce_sum(ad.tanh(ad.reduce_sum(p[0], axis=1))), [(3, 4)]),
    ])
    def test_primitive(self, name, f, shapes):
        assert _check(f, *shapes).max_rel_error < 1e-6

    def test_batch_norm_training(self):
        state = ad.BatchNormState.create(3)

        def f(p):
            y = ad.batch_norm(p[0], p[1], p[2], state, training=True)
            return ad.reduce_sum(ad.tanh(y) * np.arange(15.0).reshape(5, 3))

        assert _check(f, (5, 3), (1, 3), (1, 3)).max_rel_error < 1e-6

    def test_batch_norm_eval_uses_running_stats(self):
        state = ad.BatchNormState.create(2)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        ad.batch_norm(x, np.ones((1, 2)), np.zeros((1, 2)), state, training=True)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        y1 = ad.batch_norm(x, np.ones((1, 2)), np.zeros((1, 2)), state, training=False).value
        y2 = ad.batch_norm(x, np.ones((1, 2)), np.zeros((1, 2)), state, training=False).value
        np.testing.assert_array_equal(y1, y2)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (5, 2), elements=st.floats(-5, 5)))
    def test_segment_softmax_rows_sum_to_one(self, scores):
        y = ad.segment_softmax(scores, np.array([0, 1, 1, 2, 2]), 3).value
        sums = np.zeros((3, 2))
        np.add.at(sums, [0, 1, 1, 2, 2], y)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_segment_softmax_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(6, 1))
        v = rng.normal(size=(6, 1))
        x = ad.Tensor(s, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(ad.segment_softmax(x, SEG, 3), v))
        (g,) = ad.backward(tape, loss, [x])
        d = rng.normal(size=(6, 1))
        eps = 1e-6
        fp = np.sum(ad.segment_softmax(s + eps * d, SEG, 3).value * v)
        fm = np.sum(ad.segment_softmax(s - eps * d, SEG, 3).value * v)
        assert np.sum(g * d) == pytest.approx((fp - fm) / (2 * eps), rel=1e-7)


class TestPrimitiveContracts:
    def test_shape_mismatch_messages(self):
        with pytest.raises(ValueError, match="matmul shape mismatch"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError, match="add shape mismatch"):
            ad.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_rank_three_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            ad.Tensor(np.ones((2, 2, 2)))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            ad.apply("softplus", np.ones((1, 1)))

    def test_apply_by_name(self):
        out = ad.apply("elementwise_mul", np.full((1, 2), 2.0), np.full((1, 2), 3.0))
        np.testing.assert_array_equal(out.value, [[6.0, 6.0]])

    def test_dropout_eval_is_identity_and_train_needs_rng(self):
        x = ad.Tensor(np.ones((3, 3)))
        assert ad.dropout(x, 0.5, None, training=False) is x
        with pytest.raises(ValueError):
            ad.dropout(x, 0.5, None, training=True)

    def test_top_k_ties_by_index(self):
        np.testing.assert_array_equal(ad.top_k(np.array([1.0, 3.0, 3.0, 0.0]), 2), [1, 2])

    def test_sigmoid_is_stable(self):
        y = ad.sigmoid(np.array([[-800.0, 0.0, 800.0]])).value
        np.testing.assert_array_equal(y, [[0.0, 0.5, 1.0]])

    def test_bce_extreme_logits_finite(self):
        out = ad.bce_with_logits(np.array([[1000.0, -1000.0]]), np.array([[0.0, 1.0]])).value
        np.testing.assert_allclose(out, [[1000.0, 1000.0]])
