"""Tensor engine semantics: op examples, tape rules, invariants."""

import numpy as np
import pytest

from aggpose import ops
from aggpose.errors import EngineError, NumericError, ShapeError
from aggpose.gradcheck import check_gradients, run_checks
from aggpose.tensor import Tape, Tensor

from oracles import bilinear_upsample_reference, depthwise_conv_reference


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ops.matmul(a, b).data, b.data)

    def test_hand_product(self):
        # hand multiplication: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ops.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_grad_through_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor(np.eye(2))
        with Tape() as tape:
            loss = ops.sum_all(ops.matmul(a, b))
            tape.backward(loss)
        assert np.array_equal(a.grad, np.ones((2, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_batched_leading_dims_must_match(self):
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestSoftmax:
    def test_symmetry(self):
        out = ops.softmax_lastaxis(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_stabilized_large_inputs(self):
        out = ops.softmax_lastaxis(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        out = ops.softmax_lastaxis(Tensor([np.log(1.0), np.log(2.0), np.log(3.0)]))
        assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        for _ in range(10):
            x = Tensor(rng.uniform(-30, 30, size=(4, 9)))
            out = ops.softmax_lastaxis(x).data
            assert np.all(out >= 0) and np.all(out <= 1)
            assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            ops.softmax_lastaxis(Tensor([np.nan, 0.0]))

    def test_logit_shift_invariance(self, rng):
        x = rng.uniform(-2, 2, size=(3, 5))
        a = ops.softmax_lastaxis(Tensor(x)).data
        b = ops.softmax_lastaxis(Tensor(x + 123.456)).data
        assert np.abs(a - b).max() < 1e-12


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 5, 6)))
        w = np.zeros((3, 3, 3))
        w[:, 1, 1] = 1.0
        out = ops.depthwise_conv3x3(x, Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_stencil_counts(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.depthwise_conv3x3(x, Tensor(np.ones((1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 0, 1] == 6.0

    def test_matches_loop_reference(self, rng):
        x = rng.uniform(-1, 1, size=(2, 4, 5, 3))
        w = rng.uniform(-1, 1, size=(4, 3, 3))
        b = rng.uniform(-1, 1, size=4)
        out = ops.depthwise_conv3x3(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - depthwise_conv_reference(x, w, b)).max() < 1e-12

    def test_channel_isolation(self, rng):
        x = rng.uniform(-1, 1, size=(1, 3, 4, 4))
        w = rng.uniform(-1, 1, size=(3, 3, 3))
        b = np.zeros(3)
        base = ops.depthwise_conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
        bumped = x.copy()
        bumped[:, 0] += 1.0
        out = ops.depthwise_conv3x3(Tensor(bumped), Tensor(w), Tensor(b)).data
        assert np.array_equal(out[:, 1:], base[:, 1:])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.depthwise_conv3x3(
                Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 3, 3))), Tensor(np.zeros(3))
            )


class TestUpsample:
    def test_constant_preserved(self):
        out = ops.bilinear_upsample(Tensor(np.full((1, 1, 3, 4), 3.0)), 2)
        assert np.array_equal(out.data, np.full((1, 1, 6, 8), 3.0))

    def test_degenerate_one_pixel(self):
        out = ops.bilinear_upsample(Tensor(np.full((1, 2, 1, 1), 7.5)), 2)
        assert np.array_equal(out.data, np.full((1, 2, 2, 2), 7.5))

    def test_matches_reference_on_ramp(self):
        ramp = np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4)
        for factor in (2, 4):
            out = ops.bilinear_upsample(Tensor(ramp), factor).data
            ref = bilinear_upsample_reference(ramp, factor)
            assert np.abs(out - ref).max() < 1e-12

    def test_factor_validation(self):
        with pytest.raises(ShapeError):
            ops.bilinear_upsample(Tensor(np.zeros((1, 1, 2, 2))), 1)
        with pytest.raises(ShapeError):
            ops.bilinear_upsample(Tensor(np.zeros((1, 1, 2, 2))), 3)


class TestElementwiseSuite:
    def test_layernorm_normalizes(self):
        out = ops.layer_norm(
            Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))
        ).data
        assert abs(out.mean()) < 1e-10
        assert abs(out.var() - 1.0) < 1e-10

    def test_gelu_zero_fixed_point(self):
        assert ops.gelu(Tensor([0.0])).data[0] == 0.0

    def test_masked_mse_zero_mask(self, rng):
        pred = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        target = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        loss = ops.masked_mse(pred, target, Tensor(np.zeros((2, 3))))
        assert loss.item() == 0.0

    def test_masked_mse_all_ones_is_plain_mse(self, rng):
        p = rng.uniform(-1, 1, size=(2, 3, 4, 4))
        t = rng.uniform(-1, 1, size=(2, 3, 4, 4))
        loss = ops.masked_mse(Tensor(p), Tensor(t), Tensor(np.ones((2, 3))))
        assert abs(loss.item() - ((p - t) ** 2).mean()) < 1e-14

    def test_add_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_bias_add_is_the_only_broadcast(self, rng):
        x = rng.uniform(-1, 1, size=(2, 5))
        b = rng.uniform(-1, 1, size=5)
        out = ops.add_bias(Tensor(x), Tensor(b))
        assert np.array_equal(out.data, x + b)
        with pytest.raises(ShapeError):
            ops.add_bias(Tensor(x), Tensor(rng.uniform(size=4)))

    def test_mixed_dtypes_rejected(self):
        a = Tensor(np.zeros((2, 2)), dtype=np.float32)
        b = Tensor(np.zeros((2, 2)), dtype=np.float64)
        with pytest.raises(ShapeError):
            ops.add(a, b)

    def test_concat_split_roundtrip(self, rng):
        parts = [Tensor(rng.uniform(-1, 1, size=(2, c, 3))) for c in (1, 4, 2)]
        merged = ops.concat(parts, axis=1)
        back = ops.split(merged, [1, 4, 2], axis=1)
        for orig, piece in zip(parts, back):
            assert np.array_equal(orig.data, piece.data)

    def test_determinism_bitwise(self, rng):
        x = rng.uniform(-1, 1, size=(3, 8))
        w = rng.uniform(-1, 1, size=(8, 8))
        a = ops.linear(ops.softmax_lastaxis(Tensor(x)), Tensor(w)).data
        b = ops.linear(ops.softmax_lastaxis(Tensor(x)), Tensor(w)).data
        assert a.tobytes() == b.tobytes()


class TestTape:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3, 4, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 4, 2)))

    def test_quadratic_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
            tape.backward(loss)
        assert np.allclose(x.grad, [2.0, 4.0], atol=1e-15)

    def test_backward_twice_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
            tape.backward(loss)
            with pytest.raises(EngineError):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
            with pytest.raises(EngineError):
                tape.backward(y)

    def test_empty_tape_rejected(self):
        x = Tensor(np.asarray(1.0))
        with Tape() as tape:
            with pytest.raises(EngineError):
                tape.backward(x)

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(EngineError):
                with Tape():
                    pass

    def test_grad_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.add(x, x))
            tape.backward(loss)
        assert np.array_equal(x.grad, [2.0])

    def test_grad_shape_matches_data(self, rng):
        x = Tensor(rng.uniform(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.gelu(x)))
        assert x.grad.shape == x.data.shape


class TestFiniteDifferences:
    """Every primitive's backward rule against central differences,
    ten seeds, 64-bit."""

    @pytest.mark.parametrize(
        "name",
        ["matmul", "softmax", "gelu", "layernorm", "dwconv", "upsample", "conv2d", "loss"],
    )
    def test_primitive(self, name):
        results = run_checks(name, seeds=10)
        assert results[0].passed, f"{name}: worst {results[0].worst:.3e}"

    def test_reshape_transpose_concat_path(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 4)))
        y = Tensor(rng.uniform(-1, 1, size=(2, 3, 4)))

        def build():
            merged = ops.concat([x, y], axis=2)
            moved = ops.transpose(merged, (1, 0, 2))
            flat = ops.reshape(moved, (3, 16))
            return ops.sum_all(ops.mul(flat, flat))

        assert check_gradients(build, [x, y]) < 1e-9
