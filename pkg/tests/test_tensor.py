import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grad
from hybridact import tensor as T
from hybridact.optim import AdamW, MissingGradientError
from hybridact.tensor import ShapeError, Tensor


class TestForwardOps:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(3, 5))
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a, rtol=1e-6)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_softmax_uniform(self):
        out = T.softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-7)

    def test_softmax_rows_sum_to_one(self, rng):
        x = rng.normal(size=(4, 7), scale=5.0)
        y = T.softmax(Tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-6)

    def test_layer_norm_constant_row_is_zero_pre_affine(self):
        x = Tensor(np.full((2, 8), 3.7))
        gamma = Tensor(np.ones(8))
        beta = Tensor(np.zeros(8))
        out = T.layer_norm(x, gamma, beta)
        np.testing.assert_array_equal(out.data, np.zeros((2, 8)))

    def test_layer_norm_normalizes(self, rng):
        x = rng.normal(size=(5, 16), loc=2.0, scale=3.0)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=-1), 1, atol=1e-2)

    def test_embedding_lookup(self, rng):
        table = Tensor(rng.normal(size=(10, 4)))
        ids = np.array([[1, 3], [9, 1]])
        out = T.embedding(table, ids)
        np.testing.assert_array_equal(out.data, table.data[ids])

    def test_embedding_range_check(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.zeros((4, 2))), np.array([4]))

    def test_concat_and_slice_roundtrip(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        cat = T.concat([Tensor(a), Tensor(b)], axis=0)
        np.testing.assert_array_equal(cat.data[:3], a)
        np.testing.assert_array_equal(cat.data[3:], b)

    def test_deterministic(self, rng):
        x = rng.normal(size=(6, 6))
        r1 = T.gelu(Tensor(x)).data
        r2 = T.gelu(Tensor(x)).data
        np.testing.assert_array_equal(r1, r2)

    def test_add_broadcast_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


class TestLosses:
    def test_mse_zero_when_equal(self, rng):
        x = rng.normal(size=(3, 3))
        assert float(T.mse_loss(Tensor(x), Tensor(x.copy())).data) == 0.0

    def test_mse_hand_value(self):
        out = T.mse_loss(Tensor(np.array([1.0, 1.0])), Tensor(np.array([0.0, 0.0])))
        assert float(out.data) == pytest.approx(1.0)

    def test_mse_matches_elementwise_resummation(self, rng):
        p = rng.normal(size=(4, 5)).astype(np.float64)
        t = rng.normal(size=(4, 5)).astype(np.float64)
        ours = float(T.mse_loss(Tensor(p, dtype=np.float64), Tensor(t, dtype=np.float64)).data)
        oracle = sum((pv - tv) ** 2 for pv, tv in zip(p.reshape(-1), t.reshape(-1))) / p.size
        assert abs(ours - oracle) < 1e-12

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_cross_entropy_saturated(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = 1e6
        logits[1, 0] = 1e6
        loss = T.cross_entropy_loss(Tensor(logits), np.array([3, 0]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_cross_entropy_uniform(self):
        loss = T.cross_entropy_loss(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]))
        assert float(loss.data) == pytest.approx(np.log(4), rel=1e-6)

    def test_cross_entropy_matches_explicit_softmax_oracle(self, rng):
        logits = rng.normal(size=(6, 9), scale=3.0).astype(np.float64)
        targets = rng.integers(0, 9, size=6)
        ours = float(T.cross_entropy_loss(Tensor(logits, dtype=np.float64), targets).data)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        oracle = -np.mean([np.log(probs[i, targets[i]]) for i in range(6)])
        assert abs(ours - oracle) < 1e-10

    def test_cross_entropy_ignore_mask(self, rng):
        logits = rng.normal(size=(4, 5)).astype(np.float64)
        targets = np.array([0, 1, 2, 3])
        ignore = np.array([False, True, True, False])
        ours = float(T.cross_entropy_loss(Tensor(logits, dtype=np.float64), targets, ignore).data)
        full = T.cross_entropy_loss(Tensor(logits[[0, 3]], dtype=np.float64), targets[[0, 3]])
        assert ours == pytest.approx(float(full.data), rel=1e-12)

    def test_cross_entropy_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_all_masked(self):
        with pytest.raises(ValueError, match="all positions masked"):
            T.cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([True, True]))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.add(x, x).backward()

    def test_backward_accumulates(self):
        x = Tensor(np.ones(4), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        loss.backward()
        g1 = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * g1)

    def test_linear_mse_grad_matches_finite_differences(self, rng):
        x = rng.normal(size=(4, 3)).astype(np.float64)
        y = rng.normal(size=(5, 3)).astype(np.float64)
        w0 = rng.normal(size=(5, 4)).astype(np.float64)

        def loss_of_w(w):
            return T.mse_loss(T.matmul(w, Tensor(x, dtype=np.float64)), Tensor(y, dtype=np.float64))

        check_grad(loss_of_w, w0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck_all_ops_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        n, m, k = rng.integers(2, 6, size=3)
        a = rng.normal(size=(n, m))
        b = rng.normal(size=(m, k))
        w = rng.normal(size=(n, m))
        gamma = rng.normal(size=m) + 1.5
        beta = rng.normal(size=m)
        targets = rng.integers(0, k, size=n)

        check_grad(lambda t: T.mse_loss(T.matmul(t, Tensor(b, dtype=np.float64)),
                                        Tensor(np.ones((n, k)), dtype=np.float64)), a)
        check_grad(lambda t: T.mean_all(T.mul(t, Tensor(w, dtype=np.float64))), a)
        check_grad(lambda t: T.mean_all(T.add(t, Tensor(w, dtype=np.float64))), a)
        check_grad(lambda t: T.mean_all(T.softmax(t)), a * 2)
        check_grad(lambda t: T.mean_all(T.mul(T.softmax(t), Tensor(w, dtype=np.float64))), a)
        check_grad(lambda t: T.mean_all(T.gelu(t)), a)
        check_grad(lambda t: T.mean_all(
            T.layer_norm(t, Tensor(gamma, dtype=np.float64), Tensor(beta, dtype=np.float64))), a)
        check_grad(lambda t: T.cross_entropy_loss(T.matmul(t, Tensor(b, dtype=np.float64)), targets), a)
        check_grad(lambda t: T.mean_all(T.mul(T.reshape(t, (m, n)), Tensor(w.T, dtype=np.float64))), a)
        check_grad(lambda t: T.mean_all(T.mul(T.transpose(t, (1, 0)), Tensor(w.T, dtype=np.float64))), a)
        check_grad(lambda t: T.sum_all(T.mul(t[1:, :], t[1:, :])), a)
        check_grad(lambda t: T.sum_all(T.mul(T.concat([t, t], axis=0), Tensor(np.vstack([w, w]), dtype=np.float64))), a)

    def test_gradcheck_embedding(self):
        rng = np.random.default_rng(0)
        table0 = rng.normal(size=(6, 3))
        ids = np.array([0, 2, 2, 5])
        w = rng.normal(size=(4, 3))
        check_grad(lambda t: T.mean_all(T.mul(T.embedding(t, ids), Tensor(w, dtype=np.float64))), table0)

    def test_gradcheck_batched_matmul(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        check_grad(lambda t: T.mean_all(T.matmul(t, Tensor(b, dtype=np.float64))), a)
        a2 = rng.normal(size=(2, 3, 4))
        check_grad(lambda t: T.mean_all(T.matmul(Tensor(a2, dtype=np.float64), t)), b)


class TestAdamW:
    def test_zero_grad_zero_decay_no_change(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.zeros(2)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, np.array([1.0, -2.0]))

    def test_single_step_hand_computed(self):
        # p=1, g=1: bias-corrected m_hat = v_hat = 1, update = lr/(1+eps)
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([1.0])
        opt = AdamW({"p": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        opt.step()
        assert float(p.data[0]) == pytest.approx(0.9, abs=1e-6)
        assert opt.t == 1

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
        initial = float((p.data ** 2).sum())
        for _ in range(1000):
            opt.zero_grad()
            loss = T.sum_all(T.mul(p, p))
            loss.backward()
            opt.step()
        assert float((p.data ** 2).sum()) < initial

    def test_missing_grad_raises(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = AdamW({"p": p})
        with pytest.raises(MissingGradientError, match="'p'"):
            opt.step()

    def test_step_counter_increases(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.0)
        for expected in (1, 2, 3):
            p.grad = np.ones(2, dtype=p.data.dtype)
            opt.step()
            assert opt.t == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
def test_softmax_simplex_property(xs):
    y = T.softmax(Tensor(np.array(xs, dtype=np.float64))).data
    assert (y >= 0).all()
    assert abs(y.sum() - 1.0) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_softmax_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=8, scale=4.0)
    y1 = T.softmax(Tensor(x, dtype=np.float64)).data
    y2 = T.softmax(Tensor(x + 13.5, dtype=np.float64)).data
    np.testing.assert_allclose(y1, y2, atol=1e-12)
