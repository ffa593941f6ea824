"""Unit tests for the manual forward/backward primitives."""

import numpy as np
import pytest

from iciia import Param, UsageError, cross_entropy, layer_norm, linear, relu, \
    scaled_dot_attention, softmax_rows
from iciia.errors import ShapeError

from conftest import numeric_grad, rel_error


def _p(values):
    return Param(np.asarray(values, dtype=np.float64))


class TestLinear:
    def test_identity(self):
        y, _ = linear(np.array([[1.0, 2.0]]), _p(np.eye(2)), _p([[0.0, 0.0]]))
        assert np.array_equal(y, [[1.0, 2.0]])

    def test_hand_arithmetic(self):
        y, _ = linear(np.array([[1.0, 1.0]]), _p([[2.0, 3.0], [4.0, 5.0]]), _p([[0.0, 0.0]]))
        assert np.allclose(y, [[6.0, 8.0]])

    def test_hand_arithmetic_bias(self):
        y, _ = linear(np.array([[1.0, 1.0]]), _p([[2.0, 3.0], [4.0, 5.0]]), _p([[1.0, 1.0]]))
        assert np.allclose(y, [[7.0, 9.0]])

    def test_backward_identity(self):
        w, b = _p(np.eye(2)), _p([[0.0, 0.0]])
        _, bwd = linear(np.array([[3.0, 4.0]]), w, b)
        dx = bwd(np.array([[1.0, 0.0]]))
        assert np.array_equal(dx, [[1.0, 0.0]])

    def test_backward_hand_arithmetic(self):
        w, b = _p([[2.0, 3.0], [4.0, 5.0]]), _p([[0.0, 0.0]])
        _, bwd = linear(np.array([[1.0, 1.0]]), w, b)
        dx = bwd(np.array([[1.0, 1.0]]))
        assert np.allclose(dx, [[5.0, 9.0]])
        assert np.allclose(w.grad, [[1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(b.grad, [[1.0, 1.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
            linear(np.ones((1, 3)), _p(np.eye(2)), _p([[0.0, 0.0]]))

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(0)
        for bsz, din, dout in [(1, 1, 1), (3, 4, 5), (8, 6, 2)]:
            x = rng.normal(size=(bsz, din))
            w = _p(rng.normal(size=(din, dout)))
            b = _p(rng.normal(size=(1, dout)))
            y, _ = linear(x, w, b)
            ref = np.zeros((bsz, dout))
            for i in range(bsz):
                for j in range(dout):
                    acc = b.value[0, j]
                    for k in range(din):
                        acc += x[i, k] * w.value[k, j]
                    ref[i, j] = acc
            assert rel_error(y, ref) < 1e-12


class TestLayerNorm:
    def test_symmetric_row(self):
        y, _ = layer_norm(np.array([[1.0, 3.0]]), _p([[1.0, 1.0]]), _p([[0.0, 0.0]]),
                          eps=1e-12)
        assert np.allclose(y, [[-1.0, 1.0]], atol=1e-6)

    def test_zero_variance_row_maps_to_bias(self):
        y, _ = layer_norm(np.array([[5.0, 5.0, 5.0]]), _p([[1.0] * 3]), _p([[0.0] * 3]))
        assert np.allclose(y, [[0.0, 0.0, 0.0]])
        y2, _ = layer_norm(np.array([[5.0, 5.0, 5.0]]), _p([[2.0] * 3]), _p([[0.7] * 3]))
        assert np.allclose(y2, [[0.7, 0.7, 0.7]])

    def test_rows_normalized(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 9)) * 3 + 1
        y, _ = layer_norm(x, _p(np.ones((1, 9))), _p(np.zeros((1, 9))), eps=1e-12)
        assert np.allclose(y.mean(axis=1), 0.0, atol=1e-9)
        assert np.allclose((y * y).mean(axis=1), 1.0, atol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        y, _ = softmax_rows(np.array([[0.0, 0.0]]))
        assert np.allclose(y, [[0.5, 0.5]])

    def test_large_inputs_no_overflow(self):
        y, _ = softmax_rows(np.array([[1000.0, 1000.0]]))
        assert np.all(np.isfinite(y))
        assert np.allclose(y, [[0.5, 0.5]])

    def test_hand_arithmetic(self):
        y, _ = softmax_rows(np.array([[0.0, np.log(3.0)]]))
        assert np.allclose(y, [[0.25, 0.75]])

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 8)) * 5
        y, _ = softmax_rows(x)
        assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-6
        y2, _ = softmax_rows(x + 123.456)
        assert np.allclose(y, y2, atol=1e-12)


class TestAttention:
    def test_zero_scores_uniform_weights(self):
        q = k = np.zeros((2, 1))
        v = np.array([[2.0], [4.0]])
        out, _, probs = scaled_dot_attention(q, k, v)
        assert np.allclose(out, [[3.0], [3.0]])
        assert np.allclose(probs, 0.5)

    def test_single_row_attends_to_itself(self):
        rng = np.random.default_rng(3)
        q, k = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        v = rng.normal(size=(1, 4))
        out, _, probs = scaled_dot_attention(q, k, v)
        assert np.array_equal(out, v)
        assert probs == pytest.approx(1.0)

    def test_single_valid_key(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(size=(2, 3)) for _ in range(3))
        out, _, _ = scaled_dot_attention(q, k, v, valid=np.array([True, False]))
        assert np.array_equal(out[0], v[0])

    def test_all_false_mask_raises(self):
        z = np.zeros((2, 2))
        with pytest.raises(UsageError):
            scaled_dot_attention(z, z, z, valid=np.array([False, False]))

    def test_masked_equals_truncated_bitwise(self):
        rng = np.random.default_rng(5)
        for dtype in (np.float32, np.float64):
            q, k, v = (rng.normal(size=(6, 4)).astype(dtype) for _ in range(3))
            valid = np.array([True, False, True, True, False, True])
            out, _, _ = scaled_dot_attention(q, k, v, valid=valid)
            ref, _, _ = scaled_dot_attention(q[valid], k[valid], v[valid])
            assert np.array_equal(out[valid], ref)


class TestRelu:
    def test_values(self):
        y, _ = relu(np.array([[-1.0, 2.0]]))
        assert np.array_equal(y, [[0.0, 2.0]])

    def test_subgradient_at_zero_is_zero(self):
        y, bwd = relu(np.array([[0.0]]))
        assert np.array_equal(y, [[0.0]])
        assert np.array_equal(bwd(np.array([[1.0]])), [[0.0]])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(np.log(2.0), abs=1e-6)

    def test_confident_correct(self):
        loss, _ = cross_entropy(np.array([[100.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([-1]))


class TestGradients:
    """Central finite differences, float64, h=1e-6, rel error < 1e-5."""

    @pytest.mark.parametrize("bsz,din,dout", [(1, 1, 2), (2, 3, 4), (5, 8, 3), (3, 5, 5)])
    def test_linear(self, bsz, din, dout):
        rng = np.random.default_rng(bsz * 100 + din)
        x = rng.normal(size=(bsz, din))
        w = Param(rng.normal(size=(din, dout)))
        b = Param(rng.normal(size=(1, dout)))
        up = rng.normal(size=(bsz, dout))

        def loss():
            y, _ = linear(x, w, b)
            return float((y * up).sum())

        _, bwd = linear(x, w, b)
        dx = bwd(up)
        assert rel_error(dx, numeric_grad(loss, x)) < 1e-5
        assert rel_error(w.grad, numeric_grad(loss, w.value)) < 1e-5
        assert rel_error(b.grad, numeric_grad(loss, b.value)) < 1e-5

    @pytest.mark.parametrize("bsz,d", [(1, 2), (2, 5), (5, 8), (3, 3)])
    def test_layer_norm(self, bsz, d):
        rng = np.random.default_rng(bsz * 10 + d)
        x = rng.normal(size=(bsz, d))
        g = Param(rng.normal(size=(1, d)))
        b = Param(rng.normal(size=(1, d)))
        up = rng.normal(size=(bsz, d))

        def loss():
            y, _ = layer_norm(x, g, b)
            return float((y * up).sum())

        _, bwd = layer_norm(x, g, b)
        dx = bwd(up)
        assert rel_error(dx, numeric_grad(loss, x)) < 1e-5
        assert rel_error(g.grad, numeric_grad(loss, g.value)) < 1e-5
        assert rel_error(b.grad, numeric_grad(loss, b.value)) < 1e-5

    def test_softmax(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 6))
        up = rng.normal(size=(4, 6))

        def loss():
            y, _ = softmax_rows(x)
            return float((y * up).sum())

        _, bwd = softmax_rows(x)
        assert rel_error(bwd(up), numeric_grad(loss, x)) < 1e-5

    @pytest.mark.parametrize("valid", [None, np.array([True, False, True, True, False])])
    def test_attention(self, valid):
        rng = np.random.default_rng(8)
        n = 5
        q, k, v = (rng.normal(size=(n, 3)) for _ in range(3))
        up = rng.normal(size=(n, 3))
        if valid is not None:
            up = up * valid[:, None]

        def loss():
            out, _, _ = scaled_dot_attention(q, k, v, valid=valid)
            return float((out * up).sum())

        _, bwd, _ = scaled_dot_attention(q, k, v, valid=valid)
        dq, dk, dv = bwd(up)
        assert rel_error(dq, numeric_grad(loss, q)) < 1e-5
        assert rel_error(dk, numeric_grad(loss, k)) < 1e-5
        assert rel_error(dv, numeric_grad(loss, v)) < 1e-5

    def test_relu_nonzero_inputs(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5))
        x[np.abs(x) < 0.05] = 0.1  # keep clear of the kink
        up = rng.normal(size=(3, 5))

        def loss():
            y, _ = relu(x)
            return float((y * up).sum())

        _, bwd = relu(x)
        assert rel_error(bwd(up), numeric_grad(loss, x)) < 1e-5

    def test_cross_entropy(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, size=4)

        def loss():
            return cross_entropy(logits, labels)[0]

        _, dlogits = cross_entropy(logits, labels)
        assert rel_error(dlogits, numeric_grad(loss, logits)) < 1e-5

    @pytest.mark.parametrize("bsz", [1, 2, 3, 5, 8])
    @pytest.mark.parametrize("d", [1, 2, 3, 5, 8])
    def test_linear_randomized_shapes(self, bsz, d):
        rng = np.random.default_rng(bsz * 17 + d)
        x = rng.normal(size=(bsz, d))
        w = Param(rng.normal(size=(d, d)))
        b = Param(rng.normal(size=(1, d)))
        up = rng.normal(size=(bsz, d))

        def loss():
            y, _ = linear(x, w, b)
            return float((y * up).sum())

        _, bwd = linear(x, w, b)
        bwd(up)
        assert rel_error(w.grad, numeric_grad(loss, w.value)) < 1e-5

    @pytest.mark.parametrize("bsz", [1, 2, 3, 5, 8])
    @pytest.mark.parametrize("d", [1, 2, 3, 5, 8])
    def test_all_ops_randomized_shapes(self, bsz, d):
        """Input gradients of every primitive across the full shape grid."""
        rng = np.random.default_rng(bsz * 31 + d)
        x = rng.normal(size=(bsz, d))
        x[np.abs(x) < 0.05] = 0.11
        up = rng.normal(size=(bsz, d))

        cases = []
        g, be = Param(rng.normal(size=(1, d))), Param(rng.normal(size=(1, d)))
        cases.append((lambda: layer_norm(x, g, be)[0], lambda: layer_norm(x, g, be)[1]))
        cases.append((lambda: softmax_rows(x)[0], lambda: softmax_rows(x)[1]))
        cases.append((lambda: relu(x)[0], lambda: relu(x)[1]))
        for fwd, bwd_of in cases:
            def loss():
                return float((fwd() * up).sum())
            dx = bwd_of()(up)
            assert rel_error(dx, numeric_grad(loss, x)) < 1e-5

        q, k, v = (rng.normal(size=(bsz, d)) for _ in range(3))

        def attn_loss():
            return float((scaled_dot_attention(q, k, v)[0] * up).sum())

        _, bwd, _ = scaled_dot_attention(q, k, v)
        dq, dk, dv = bwd(up)
        for arr, grad in ((q, dq), (k, dk), (v, dv)):
            assert rel_error(grad, numeric_grad(attn_loss, arr)) < 1e-5

        labels = rng.integers(0, d, size=bsz) if d > 1 else np.zeros(bsz, dtype=int)
        _, dlog = cross_entropy(x, labels)
        assert rel_error(dlog, numeric_grad(lambda: cross_entropy(x, labels)[0], x)) < 1e-5


class TestFiniteness:
    def test_outputs_finite_on_finite_inputs(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 8)).astype(np.float32) * 50
        for y in (softmax_rows(x)[0], relu(x)[0],
                  layer_norm(x, Param(np.ones((1, 8), np.float32)),
                             Param(np.zeros((1, 8), np.float32)))[0]):
            assert np.all(np.isfinite(y))
        out, bwd, _ = scaled_dot_attention(x, x, x)
        assert np.all(np.isfinite(out))
        grads = bwd(np.ones_like(x))
        assert all(np.all(np.isfinite(g)) for g in grads)
