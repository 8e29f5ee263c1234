"""Forward contracts of the tensor primitives against loop oracles."""

import numpy as np
import pytest

from regionmatch.tensor import (
    ComputationTape,
    ShapeError,
    Tensor,
    adaptive_avg_pool2d,
    backward,
    bilinear_upsample,
    checked_mode,
    concat,
    conv2d,
    global_max_pool,
    index_select,
    max_pool2d,
    no_grad,
    relu,
    softplus,
    tmax,
    tmean,
    tsum,
)

from oracles import avg_pool_loops, bilinear_loops, conv2d_loops


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(9.0)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = conv2d(x, Tensor(k))
        np.testing.assert_allclose(out.data, x.data)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        want = conv2d_loops(x, w, b, stride=stride, padding=padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_output_size_formula(self, rng):
        x = Tensor(rng.normal(size=(1, 7, 9)))
        w = Tensor(rng.normal(size=(4, 1, 3, 3)))
        out = conv2d(x, w, stride=2, padding=1)
        assert out.shape == (4, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_reports_dims(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 4)))
        w = Tensor(rng.normal(size=(2, 5, 3, 3)))
        with pytest.raises(ShapeError, match="3 channels.*expects 5"):
            conv2d(x, w)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_batched_equals_per_sample(self, rng):
        xs = rng.normal(size=(4, 2, 6, 6)).astype(np.float64)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        batched = conv2d(Tensor(xs), w, padding=1)
        for i in range(4):
            single = conv2d(Tensor(xs[i]), w, padding=1)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)


class TestPooling:
    def test_relu_negative(self):
        assert relu(Tensor([-2.5])).data[0] == 0.0

    def test_global_max_pool_2d(self):
        out = global_max_pool(Tensor([[0.1, 0.9], [0.4, 0.2]]))
        assert out.data == pytest.approx(0.9)

    def test_global_max_pool_channels(self, rng):
        x = rng.normal(size=(3, 4, 5))
        out = global_max_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.reshape(3, -1).max(axis=1))

    def test_max_pool_2x2(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        out = max_pool2d(Tensor(x), 2)
        assert out.shape == (1, 2, 2, 2)
        want = x.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5))
        np.testing.assert_allclose(out.data, want)

    def test_max_pool_odd_size_floors(self, rng):
        out = max_pool2d(Tensor(rng.normal(size=(1, 1, 21, 21))), 2)
        assert out.shape == (1, 1, 10, 10)

    def test_adaptive_avg_constant(self):
        x = Tensor(np.full((3, 4, 4), 7.5))
        out = adaptive_avg_pool2d(x, (2, 2))
        np.testing.assert_allclose(out.data, np.full((3, 2, 2), 7.5))

    def test_adaptive_avg_identity(self, rng):
        x = rng.normal(size=(2, 5, 5))
        out = adaptive_avg_pool2d(Tensor(x), (5, 5))
        np.testing.assert_allclose(out.data, x)

    def test_adaptive_avg_matches_oracle(self, rng):
        x = rng.normal(size=(2, 4, 4))
        for target in [(2, 2), (3, 3), (1, 1), (2, 3)]:
            got = adaptive_avg_pool2d(Tensor(x), target)
            np.testing.assert_allclose(got.data, avg_pool_loops(x, *target), atol=1e-6)

    def test_adaptive_avg_rejects_upsize(self, rng):
        with pytest.raises(ShapeError):
            adaptive_avg_pool2d(Tensor(rng.normal(size=(1, 2, 2))), (3, 3))

    def test_mean_preserved_on_exact_tiling(self, rng):
        x = rng.normal(size=(3, 4, 4))
        out = adaptive_avg_pool2d(Tensor(x), (2, 2))
        np.testing.assert_allclose(out.data.mean(axis=(1, 2)), x.mean(axis=(1, 2)), atol=1e-6)


class TestBilinear:
    def test_2x2_to_4x4_matches_oracle(self, rng):
        x = rng.normal(size=(2, 2))
        got = bilinear_upsample(Tensor(x), (4, 4))
        np.testing.assert_allclose(got.data, bilinear_loops(x, 4, 4), atol=1e-6)

    @pytest.mark.parametrize("size", [(5, 5), (7, 3), (16, 16)])
    def test_general_sizes_match_oracle(self, rng, size):
        x = rng.normal(size=(3, 4))
        got = bilinear_upsample(Tensor(x), size)
        np.testing.assert_allclose(got.data, bilinear_loops(x, *size), atol=1e-6)

    def test_constant_map_stays_constant(self):
        out = bilinear_upsample(Tensor(np.full((2, 2), 3.25)), (9, 9))
        np.testing.assert_allclose(out.data, 3.25)


class TestStructure:
    def test_concat_and_split_grad(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (2, 5)
        backward(tsum(out * out))
        np.testing.assert_allclose(a.grad, 2 * a.data, atol=1e-6)
        np.testing.assert_allclose(b.grad, 2 * b.data, atol=1e-6)

    def test_index_select_gathers(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        out = index_select(x, 0, [2, 0, 2])
        np.testing.assert_allclose(out.data, x.data[[2, 0, 2]])

    def test_index_select_grad_sums_duplicates(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        out = index_select(x, 0, [1, 1, 0])
        backward(tsum(out))
        np.testing.assert_allclose(x.grad, [[1, 1], [2, 2], [0, 0]])

    def test_mean_and_sum_axes(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(tsum(Tensor(x), axis=(0, 2)).data, x.sum(axis=(0, 2)))
        np.testing.assert_allclose(
            tmean(Tensor(x), axis=1, keepdims=True).data, x.mean(axis=1, keepdims=True)
        )

    def test_softplus_at_zero(self):
        out = softplus(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.log(2.0), rtol=1e-6)


class TestAutogradMechanics:
    def test_backward_rejects_nonscalar(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * x)

    def test_backward_rejects_empty_tape(self):
        with pytest.raises(ValueError, match="empty tape"):
            backward(Tensor([1.0], requires_grad=True))

    def test_tape_topological_order(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = x * x
        z = y + x
        loss = tsum(z * y)
        tape = ComputationTape.trace(loss)
        position = {id(t): i for i, t in enumerate(tape.records)}
        for rec in tape.records:
            for parent in rec._inputs:
                if id(parent) in position:
                    assert position[id(parent)] < position[id(rec)]

    def test_max_tie_routes_to_lowest_index(self):
        x = Tensor(np.array([1.0, 3.0, 3.0, 0.0]), requires_grad=True)
        backward(tmax(x, axis=0))
        np.testing.assert_allclose(x.grad, [0, 1, 0, 0])

    def test_grad_accumulates_across_backwards(self):
        x = Tensor([2.0], requires_grad=True)
        backward(tsum(x * x))
        backward(tsum(x * x))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_grad_suppresses_recording(self):
        x = Tensor([2.0], requires_grad=True)
        with no_grad():
            y = x * x
        assert y.is_leaf and not y.requires_grad

    def test_linearity_of_backward(self, rng):
        base = rng.normal(size=(4,))
        a, b = 2.5, -1.25

        def grad_of(scale1, scale2):
            x = Tensor(base.copy(), requires_grad=True)
            l1 = tsum(x * x)
            l2 = tsum(relu(x))
            backward(l1 * scale1 + l2 * scale2)
            return x.grad

        combined = grad_of(a, b)
        separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        np.testing.assert_allclose(combined, separate, atol=1e-6)

    def test_checked_mode_rejects_nan(self):
        x = Tensor(np.array([np.nan, 1.0]))
        with checked_mode():
            with pytest.raises(FloatingPointError):
                relu(x)
        relu(x)  # unchecked mode lets it pass

    def test_determinism_bitwise(self, rng):
        x_data = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w_data = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            x = Tensor(x_data.copy(), requires_grad=True)
            w = Tensor(w_data.copy(), requires_grad=True)
            out = max_pool2d(relu(conv2d(x, w, padding=1)), 2)
            backward(tsum(out * out))
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)
