"""Tensor, graph, and gradient tests against independent oracles."""

import math

import numpy as np
import pytest

from topocast import tensor as tt
from topocast.tensor import (
    Graph,
    NumericalError,
    ShapeError,
    Tensor,
    check_gradients,
    elementwise,
)


def loop_matmul(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestElementwise:
    def test_add(self):
        out = tt.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = tt.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert tt.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_dispatcher(self):
        out = elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
        assert np.array_equal(out.data, [8.0, 15.0])
        out = elementwise("scale-by-constant", Tensor([2.0]), 3.0)
        assert out.data[0] == 6.0
        with pytest.raises(ValueError, match="unknown elementwise"):
            elementwise("cosh", Tensor([1.0]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            tt.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)

    def test_scalar_broadcast(self):
        out = tt.mul(Tensor([[1.0, 2.0]]), Tensor(3.0))
        assert np.array_equal(out.data, [[3.0, 6.0]])
        out = tt.sub(Tensor([5.0]), 2.0)
        assert out.data[0] == 3.0

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2, 2)))


class TestMatmul:
    def test_identity(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        out = tt.matmul(Tensor(np.eye(2)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_row_times_column(self):
        out = tt.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_random_pair_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        out = tt.matmul(Tensor(a), Tensor(b))
        assert np.allclose(out.data, loop_matmul(a, b), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxRows:
    def test_uniform(self):
        out = tt.softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.array_equal(out.data, [[0.5, 0.5]])

    def test_large_inputs_stable(self):
        out = tt.softmax_rows(Tensor([[1000.0, 1000.0]]))
        assert np.array_equal(out.data, [[0.5, 0.5]])

    def test_row_matches_direct_formula(self):
        x = np.array([[1.0, 2.0, 3.0]])
        e = np.exp(x[0])
        expected = e / e.sum()
        out = tt.softmax_rows(Tensor(x))
        assert np.allclose(out.data[0], expected, atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = tt.softmax_rows(Tensor(rng.normal(size=(5, 7)) * 10))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_shift_invariance_bitwise(self):
        # values on a 2^-6 grid so adding the constant is itself exact;
        # max subtraction then reproduces identical inputs to exp
        rng = np.random.default_rng(2)
        x = np.round(rng.normal(size=(4, 6)) * 64) / 64
        a = tt.softmax_rows(Tensor(x)).data
        b = tt.softmax_rows(Tensor(x + 7.25)).data
        assert np.array_equal(a, b)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalError):
            tt.softmax_rows(Tensor([[np.nan, 0.0]]))
        with pytest.raises(NumericalError):
            tt.softmax_rows(Tensor([[np.inf, 0.0]]))


class TestLayerNorm:
    def test_constant_row_goes_to_zero(self):
        out = tt.layer_norm(
            Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))
        )
        assert np.abs(out.data).max() < 1e-6

    def test_already_normalized_row(self):
        out = tt.layer_norm(
            Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
            eps=1e-12,
        )
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_random_rows_mean_zero_var_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 9)) * 3 + 1
        out = tt.layer_norm(
            Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=1e-10
        ).data
        assert np.abs(out.mean(axis=1)).max() < 1e-12
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-8

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            tt.layer_norm(
                Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0
            )


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Graph() as g:
            g.backward(tt.sum_all(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            g.backward(tt.sum_all(tt.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b1 = Tensor(rng.normal(size=5), requires_grad=True)
        w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)))

        def f():
            h = tt.relu(tt.add_bias(tt.matmul(x, w1), b1))
            out = tt.sigmoid(tt.matmul(h, w2))
            return tt.sum_all(tt.mul(out, out))

        assert check_gradients(f, [w1, b1, w2], h=1e-5) < 1e-5

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            y = tt.mul(x, x)
            with pytest.raises(ShapeError):
                g.backward(y)

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            loss = tt.sum_all(tt.mul(x, x))
            g.backward(loss)
            g.backward(loss)
        assert np.array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_grad_zero_after_construction(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph():
            y = tt.mul(x, x)
        assert np.array_equal(x.grad, [0.0, 0.0])
        assert np.array_equal(y.grad, [0.0, 0.0])
        assert y.grad.shape == y.data.shape

    def test_backward_is_linear(self):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=4)

        def grad_of(a, b):
            x = Tensor(xv, requires_grad=True)
            with Graph() as g:
                l1 = tt.sum_all(tt.mul(x, x))
                l2 = tt.sum_all(tt.sigmoid(x))
                g.backward(tt.add(tt.scale(l1, a), tt.scale(l2, b)))
            return x.grad.copy()

        ga = grad_of(1.0, 0.0)
        gb = grad_of(0.0, 1.0)
        gc = grad_of(2.0, -3.0)
        assert np.abs(gc - (2.0 * ga - 3.0 * gb)).max() < 1e-12

    def test_untracked_leaves_get_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        with Graph() as g:
            g.backward(tt.sum_all(tt.mul(x, c)))
        assert np.array_equal(c.grad, [0.0, 0.0])
        assert np.array_equal(x.grad, [3.0, 4.0])

    def test_ops_outside_graph_do_not_record(self):
        x = Tensor([1.0], requires_grad=True)
        y = tt.mul(x, x)
        assert not y._tracked


class TestCheckGradients:
    def test_square_at_three(self):
        x = Tensor([3.0], requires_grad=True)

        def f():
            return tt.sum_all(tt.mul(x, x))

        err = check_gradients(f, [x], h=1e-5)
        assert err < 1e-9
        x.zero_grad()
        with Graph() as g:
            g.backward(f())
        assert abs(x.grad[0] - 6.0) < 1e-12

    def test_known_derivatives_at_zero(self):
        # sigmoid'(0) = 1/4, softplus'(0) = 1/2
        x = Tensor([0.0], requires_grad=True)
        for op, expected in ((tt.sigmoid, 0.25), (tt.softplus, 0.5)):
            x.zero_grad()

            def f():
                return tt.sum_all(op(x))

            assert check_gradients(f, [x]) < 1e-10
            x.zero_grad()
            with Graph() as g:
                g.backward(f())
            assert abs(x.grad[0] - expected) < 1e-12

    def test_step_size_bounds(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            check_gradients(lambda: tt.sum_all(x), [x], h=1e-2)

    def test_nonfinite_objective_rejected(self):
        x = Tensor([1.0], requires_grad=True)

        def f():
            return tt.sum_all(tt.mul(x, Tensor([np.nan])))

        with pytest.raises(NumericalError):
            check_gradients(f, [x])


class TestCompositeGradients:
    """Random compositions of the op set match central differences."""

    @pytest.mark.parametrize("seed", range(5))
    def test_random_composites(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.uniform(-10, 10, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-10, 10, size=(4, 3)), requires_grad=True)
        gain = Tensor(rng.uniform(0.5, 2.0, size=3), requires_grad=True)
        bias = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        w = rng.normal(size=(3, 3))

        def f():
            h = tt.softmax_rows(tt.matmul(a, b))
            h = tt.layer_norm(h, gain, bias)
            h = tt.relu(tt.add(h, 0.1))
            return tt.sum_all(tt.mul(h, Tensor(w)))

        assert check_gradients(f, [a, b, gain, bias], h=1e-5) < 1e-5

    def test_structure_ops(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 6)), requires_grad=True)

        def f():
            c = tt.conv3(a, k)
            left = tt.slice_cols(c, 0, 3)
            right = tt.slice_cols(c, 3, 6)
            j = tt.concat_cols([right, left])
            r = tt.reshape(tt.transpose(j), (2, 12))
            picked = tt.pick(r, (1, 3))
            return tt.add(tt.sum_all(tt.softplus(r)), tt.mul(picked, picked))

        assert check_gradients(f, [a, k], h=1e-5) < 1e-5


class TestSecondOrder:
    def test_cubic_second_derivative(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph(second_order=True) as g:
            loss = tt.sum_all(tt.mul(tt.mul(x, x), x))
            grads = g.backward(loss, create_graph=True)
            g.backward(tt.sum_all(grads[x.node_id]))
        assert np.allclose(x.grad, [6.0, 12.0], atol=1e-12)

    def test_create_graph_requires_second_order(self):
        x = Tensor([1.0], requires_grad=True)
        with Graph() as g:
            loss = tt.sum_all(tt.mul(x, x))
            with pytest.raises(ValueError):
                g.backward(loss, create_graph=True)

    def test_grad_of_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        p0 = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 4))
        probe = rng.normal(size=(3, 4))

        def grad_vector(pv):
            p = Tensor(pv, requires_grad=True)
            with Graph(second_order=True) as g:
                y = tt.softmax_rows(tt.matmul(p, Tensor(w)))
                loss = tt.sum_all(tt.mul(y, tt.softplus(y)))
                grads = g.backward(loss, create_graph=True)
                return p, g, grads[p.node_id]

        p, g, gp = grad_vector(p0)
        with g:
            g.backward(tt.sum_all(tt.mul(gp, Tensor(probe))))
        analytic = p.grad.copy()

        h = 1e-5
        fd = np.zeros_like(p0)
        for i in range(p0.shape[0]):
            for j in range(p0.shape[1]):
                up, down = p0.copy(), p0.copy()
                up[i, j] += h
                down[i, j] -= h
                _, _, gu = grad_vector(up)
                _, _, gd = grad_vector(down)
                fd[i, j] = ((gu.data - gd.data) * probe).sum() / (2 * h)
        assert np.abs(analytic - fd).max() < 1e-6


class TestInvariants:
    def test_shape_value_grad_lengths_agree(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.data.size == int(np.prod(t.shape)) == t.grad.size

    def test_node_ids_unique(self):
        seen = {Tensor([0.0]).node_id for _ in range(100)}
        assert len(seen) == 100

    def test_independent_graphs_do_not_interfere(self):
        x = Tensor([2.0], requires_grad=True)
        with Graph() as g1:
            l1 = tt.sum_all(tt.mul(x, x))
        with Graph() as g2:
            g2.backward(tt.sum_all(tt.scale(x, 3.0)))
        assert np.array_equal(x.grad, [3.0])
        g1.backward(l1)
        assert np.array_equal(x.grad, [7.0])
