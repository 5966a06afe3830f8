import numpy as np
import pytest

import notebench.tensor as nt
from notebench.errors import DimensionError, StaleGraphError
from notebench.tensor import Tensor
from util import fd_max_rel_err, random_graph_case


class TestForwardExamples:
    def test_softmax_of_zeros_is_uniform(self):
        out = nt.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_layer_norm_of_constant_vector_is_zero_before_affine(self):
        gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
        out = nt.layer_norm(Tensor([2.5, 2.5, 2.5, 2.5]), gamma, beta)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)

    def test_matmul_matches_hand_computation(self):
        a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = Tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
        out = nt.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[58.0, 64.0], [139.0, 154.0]])

    def test_softmax_bias_equals_explicit_add(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        bias = np.where(rng.random((3, 5)) < 0.3, -1e9, 0.0)
        fused = nt.softmax(Tensor(x), bias=bias)
        explicit = nt.softmax(Tensor(x + bias))
        np.testing.assert_array_equal(fused.data, explicit.data)

    def test_sigmoid_stable_at_extremes(self):
        out = nt.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


class TestBackwardExamples:
    def test_grad_of_sum_is_ones(self):
        x = Tensor(np.array([1.0, 5.0, -2.0]), requires_grad=True)
        nt.backward(nt.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_grad_of_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        nt.backward(nt.tsum(nt.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_three_layer_network_finite_differences(self):
        rng = np.random.default_rng(42)
        w1 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        w3 = Tensor(rng.normal(size=(8, 2)), requires_grad=True)
        x = rng.normal(size=(3, 4))

        def build():
            h = nt.tanh(nt.matmul(Tensor(x), w1))
            h = nt.gelu(nt.matmul(h, w2))
            return nt.tmean(nt.mul(nt.matmul(h, w3), nt.matmul(h, w3)))

        assert fd_max_rel_err(build, [w1, w2, w3]) < 1e-4

    def test_random_graphs_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(8):
            build, leaves = random_graph_case(rng)
            assert fd_max_rel_err(build, leaves) < 1e-4

    def test_embedding_scatter_gradient(self):
        table = Tensor(np.zeros((5, 3)), requires_grad=True)
        ids = np.array([1, 1, 4])
        nt.backward(nt.tsum(nt.embedding_lookup(table, ids)))
        expected = np.zeros((5, 3))
        expected[1] = 2.0
        expected[4] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_broadcast_bias_gradient(self):
        b = Tensor(np.zeros(4), requires_grad=True)
        x = Tensor(np.ones((2, 3, 4)))
        nt.backward(nt.tsum(nt.add(x, b)))
        np.testing.assert_array_equal(b.grad, np.full(4, 6.0))

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

        def build():
            u = nt.tanh(x)
            return nt.tsum(nt.add(nt.mul(u, u), u))

        assert fd_max_rel_err(build, [x]) < 1e-6


class TestGraphContract:
    def test_backward_twice_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = nt.tsum(nt.mul(x, x))
        nt.backward(loss)
        with pytest.raises(StaleGraphError):
            nt.backward(loss)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            nt.backward(nt.mul(x, x))

    def test_no_grad_skips_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with nt.no_grad():
            out = nt.mul(x, x)
        assert not out.requires_grad
        assert out._parents == ()

    def test_shape_errors_name_the_operation(self):
        with pytest.raises(DimensionError, match="matmul"):
            nt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(DimensionError, match="add"):
            nt.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with pytest.raises(DimensionError, match="layer_norm"):
            nt.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.ones(4)))

    def test_cross_entropy_matches_log_vocab_at_zero_logits(self):
        logits = Tensor(np.zeros((6, 11)))
        loss = nt.cross_entropy(logits, np.zeros(6, dtype=int))
        np.testing.assert_allclose(loss.data, np.log(11), atol=1e-12)

    def test_bce_known_value(self):
        loss = nt.bce_with_logits(Tensor(np.zeros(4)), np.array([1.0, 0.0, 1.0, 0.0]))
        np.testing.assert_allclose(loss.data, np.log(2), atol=1e-12)
