"""Unit and gradient tests for the autodiff tensor engine."""

import numpy as np
import pytest

from phqfuse import tensor as T
from phqfuse.errors import ContractError, DimensionError, NonFiniteError


def _rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape).astype(np.float32)


def _probe(rng, shape):
    mag = rng.uniform(0.5, 1.5, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (mag * sign).astype(np.float32)


class TestMatmul:
    def test_identity_left(self):
        rng = np.random.default_rng(0)
        b = T.Tensor(_rand(rng, 3, 7))
        eye = T.Tensor(np.eye(3, dtype=np.float32))
        out = T.matmul(eye, b)
        assert np.array_equal(out.data, b.data)

    def test_identity_right(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        out = T.matmul(a, eye)
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = _rand(rng, 4, 5)
        b = _rand(rng, 5, 3)
        expected = np.zeros((4, 3), dtype=np.float64)
        for i in range(4):
            for j in range(3):
                for t in range(5):
                    expected[i, j] += float(a[i, t]) * float(b[t, j])
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        assert np.max(np.abs(out.data - expected)) < 1e-6

    def test_identity_associativity_bitwise(self):
        rng = np.random.default_rng(2)
        a = T.Tensor(_rand(rng, 6, 6))
        b = T.Tensor(_rand(rng, 6, 4))
        eye = T.Tensor(np.eye(6, dtype=np.float32))
        left = T.matmul(T.matmul(a, eye), b)
        right = T.matmul(a, b)
        assert np.array_equal(left.data, right.data)

    def test_shape_mismatch_names_both_shapes(self):
        a = T.Tensor(np.zeros((2, 3), dtype=np.float32))
        b = T.Tensor(np.zeros((4, 2), dtype=np.float32))
        with pytest.raises(DimensionError) as err:
            T.matmul(a, b)
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(3)
        a = _rand(rng, 5, 4, 6)
        b = _rand(rng, 5, 6, 2)
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        for i in range(5):
            ref = T.matmul(T.Tensor(a[i]), T.Tensor(b[i]))
            assert np.array_equal(out.data[i], ref.data)

    def test_nd_times_2d_matches_flattened(self):
        rng = np.random.default_rng(4)
        a = _rand(rng, 3, 4, 6)
        w = _rand(rng, 6, 5)
        out = T.matmul(T.Tensor(a), T.Tensor(w))
        flat = T.matmul(T.Tensor(a.reshape(12, 6)), T.Tensor(w))
        assert np.array_equal(out.data.reshape(12, 5), flat.data)


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 0.25, atol=1e-7)

    def test_large_value_no_overflow(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
        assert abs(out.data[0, 0] - 1.0) < 1e-6
        assert abs(out.data[0, 1]) < 1e-6

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, 7, 9)
        out = T.softmax_rows(T.Tensor(x))
        ref = np.exp(x - x.max(axis=-1, keepdims=True))
        ref = ref / ref.sum(axis=-1, keepdims=True)
        assert np.max(np.abs(out.data - ref)) < 1e-6

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(6)
        x = _rand(rng, 20, 11)
        out = T.softmax_rows(T.Tensor(x))
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-6
        shifted = T.softmax_rows(T.Tensor(x + 3.25))
        assert np.max(np.abs(out.data - shifted.data)) < 1e-6


class TestBackwardBasics:
    def test_square_at_three(self):
        x = T.Tensor(3.0, requires_grad=True)
        loss = T.mul(x, x)
        T.backward(loss)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_product_gradient(self):
        rng = np.random.default_rng(7)
        a = T.Tensor(_rand(rng, 3, 4), requires_grad=True)
        b = T.Tensor(_rand(rng, 4, 2), requires_grad=True)
        loss = T.sum_(T.matmul(a, b))
        T.backward(loss)
        assert np.allclose(a.grad, np.ones((3, 2), dtype=np.float32) @ b.data.T, atol=1e-6)
        assert np.allclose(b.grad, a.data.T @ np.ones((3, 2), dtype=np.float32), atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x)

    def test_backward_twice_is_idempotent(self):
        rng = np.random.default_rng(8)
        a = T.Tensor(_rand(rng, 5, 5), requires_grad=True)
        loss = T.mean(T.silu(T.matmul(a, a)))
        T.backward(loss)
        first = a.grad.copy()
        T.backward(loss)
        assert np.array_equal(first, a.grad)

    def test_reused_operand_accumulates(self):
        x = T.Tensor(2.0, requires_grad=True)
        loss = T.add(T.mul(x, x), x)  # x^2 + x
        T.backward(loss)
        assert x.grad == pytest.approx(5.0)

    def test_graph_visits_each_node_once(self):
        x = T.Tensor(1.5, requires_grad=True)
        y = T.mul(x, x)
        loss = T.add(y, y)
        graph = T.ComputeGraph.from_root(loss)
        assert len(set(id(n) for n in graph.nodes)) == len(graph)
        T.backward(loss)
        assert x.grad == pytest.approx(6.0)  # d(2x^2)/dx at 1.5


class TestElementwise:
    def test_silu_zero(self):
        out = T.silu(T.Tensor([0.0]))
        assert out.data[0] == 0.0

    def test_silu_extreme_inputs_stay_finite(self):
        out = T.silu(T.Tensor([-200.0, 200.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[1] == pytest.approx(200.0)

    def test_mean_example(self):
        out = T.mean(T.Tensor([2.0, 4.0, 6.0]))
        assert out.item() == pytest.approx(4.0)

    def test_mean_axis_keepdims(self):
        rng = np.random.default_rng(9)
        x = _rand(rng, 4, 6)
        out = T.mean(T.Tensor(x), axis=-1, keepdims=True)
        assert out.shape == (4, 1)
        assert np.allclose(out.data, x.mean(axis=-1, keepdims=True), atol=1e-6)

    def test_nonfinite_result_raises(self):
        big = T.Tensor(np.full((2, 2), 3e38, dtype=np.float32))
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                T.mul(big, big)

    def test_broadcast_add_backward(self):
        rng = np.random.default_rng(10)
        x = T.Tensor(_rand(rng, 5, 3), requires_grad=True)
        bias = T.Tensor(_rand(rng, 3), requires_grad=True)
        T.backward(T.sum_(T.add(x, bias)))
        assert np.allclose(bias.grad, np.full(3, 5.0), atol=1e-6)
        assert np.allclose(x.grad, 1.0, atol=1e-6)


class TestGatherAndShapes:
    def test_gather_rows_scatter_backward(self):
        table = T.Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
        out = T.gather_rows(table, [1, 1, 3])
        T.backward(T.sum_(out))
        expected = np.zeros((4, 3), dtype=np.float32)
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad, expected)

    def test_gather_out_of_range(self):
        table = T.Tensor(np.zeros((4, 3), dtype=np.float32))
        with pytest.raises(ContractError):
            T.gather_rows(table, [4])

    def test_select_positions(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(_rand(rng, 3, 5, 2), requires_grad=True)
        out = T.select_positions(x, [4, 0, 2])
        assert np.array_equal(out.data, x.data[[0, 1, 2], [4, 0, 2]])
        T.backward(T.sum_(out))
        assert x.grad.sum() == pytest.approx(6.0)

    def test_concat_split_backward(self):
        a = T.Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        b = T.Tensor(np.ones((4, 3), dtype=np.float32), requires_grad=True)
        out = T.concat([a, b], axis=0)
        assert out.shape == (6, 3)
        T.backward(T.sum_(T.mul(out, out)))
        assert np.allclose(a.grad, 2.0)
        assert np.allclose(b.grad, 2.0)

    def test_stack_padded_shapes_and_backward(self):
        a = T.Tensor(np.ones((2, 4), dtype=np.float32), requires_grad=True)
        b = T.Tensor(np.ones((5, 4), dtype=np.float32), requires_grad=True)
        out = T.stack_padded([a, b])
        assert out.shape == (2, 5, 4)
        assert np.all(out.data[0, 2:] == 0.0)
        T.backward(T.sum_(out))
        assert np.allclose(a.grad, 1.0)
        assert np.allclose(b.grad, 1.0)


class TestFiniteDifference:
    """Analytic gradients of every op family vs central differences."""

    CASES = {}

    @staticmethod
    def _case(name):
        def wrap(builder):
            TestFiniteDifference.CASES[name] = builder
            return builder

        return wrap

    @pytest.mark.parametrize("op_name", [
        "add", "sub", "mul", "div", "silu", "sqrt", "mean", "sum",
        "matmul_2d", "matmul_nd_2d", "matmul_3d", "softmax", "gather",
        "select_positions", "concat", "stack_padded", "transpose", "reshape",
    ])
    def test_op_gradient(self, op_name):
        result = run_op_gradcheck(op_name, seed=100)
        assert result.ok, repr(result)


def run_op_gradcheck(op_name: str, seed: int) -> T.GradCheckResult:
    """Build a small random instance of the op and gradient-check it."""
    rng = np.random.default_rng(seed + hash(op_name) % 1000)

    def leaf(*shape):
        return T.Tensor(_rand(rng, *shape), requires_grad=True)

    if op_name in ("add", "sub", "mul"):
        a, b = leaf(4, 5), leaf(5)
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[op_name]
        out_shape = (4, 5)
        params = [a, b]
        build = lambda: fn(a, b)
    elif op_name == "div":
        a = leaf(4, 5)
        b = T.Tensor(rng.uniform(0.5, 2.0, size=(5,)).astype(np.float32), requires_grad=True)
        out_shape = (4, 5)
        params = [a, b]
        build = lambda: T.div(a, b)
    elif op_name == "silu":
        a = leaf(6, 4)
        out_shape = (6, 4)
        params = [a]
        build = lambda: T.silu(a)
    elif op_name == "sqrt":
        a = T.Tensor(rng.uniform(0.5, 4.0, size=(5, 3)).astype(np.float32), requires_grad=True)
        out_shape = (5, 3)
        params = [a]
        build = lambda: T.sqrt(a)
    elif op_name == "mean":
        a = leaf(4, 6)
        out_shape = (4, 1)
        params = [a]
        build = lambda: T.mean(a, axis=-1, keepdims=True)
    elif op_name == "sum":
        a = leaf(4, 6)
        out_shape = (4, 1)
        params = [a]
        build = lambda: T.sum_(a, axis=-1, keepdims=True)
    elif op_name == "matmul_2d":
        a, b = leaf(4, 6), leaf(6, 3)
        out_shape = (4, 3)
        params = [a, b]
        build = lambda: T.matmul(a, b)
    elif op_name == "matmul_nd_2d":
        a, b = leaf(2, 4, 6), leaf(6, 3)
        out_shape = (2, 4, 3)
        params = [a, b]
        build = lambda: T.matmul(a, b)
    elif op_name == "matmul_3d":
        a, b = leaf(3, 4, 5), leaf(3, 5, 2)
        out_shape = (3, 4, 2)
        params = [a, b]
        build = lambda: T.matmul(a, b)
    elif op_name == "softmax":
        a = leaf(5, 7)
        out_shape = (5, 7)
        params = [a]
        build = lambda: T.softmax_rows(a)
    elif op_name == "gather":
        a = leaf(6, 4)
        idx = rng.integers(0, 6, size=8)
        out_shape = (8, 4)
        params = [a]
        build = lambda: T.gather_rows(a, idx)
    elif op_name == "select_positions":
        a = leaf(3, 5, 4)
        pos = rng.integers(0, 5, size=3)
        out_shape = (3, 4)
        params = [a]
        build = lambda: T.select_positions(a, pos)
    elif op_name == "concat":
        a, b = leaf(3, 4), leaf(2, 4)
        out_shape = (5, 4)
        params = [a, b]
        build = lambda: T.concat([a, b], axis=0)
    elif op_name == "stack_padded":
        a, b = leaf(2, 4), leaf(5, 4)
        out_shape = (2, 5, 4)
        params = [a, b]
        build = lambda: T.stack_padded([a, b])
    elif op_name == "transpose":
        a = leaf(2, 3, 4)
        out_shape = (2, 4, 3)
        params = [a]
        build = lambda: T.transpose(a)
    elif op_name == "reshape":
        a = leaf(4, 6)
        out_shape = (2, 12)
        params = [a]
        build = lambda: T.reshape(a, (2, 12))
    else:
        raise AssertionError(f"unknown op {op_name}")

    probe = _probe(rng, out_shape)
    return T.gradient_check(
        lambda: T.probe_loss(build(), probe), params, name=op_name
    )
