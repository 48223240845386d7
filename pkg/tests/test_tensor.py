import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfocal import tensor as T
from fedfocal.errors import ConfigError, ContractError, IngestionError, NumericError, ShapeError

from helpers import fd_gradient, max_rel_err


def t64(data, requires_grad=False):
    return T.Tensor(data, requires_grad=requires_grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(t64([[1, 0], [0, 1]]), t64([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])

    def test_hand_product(self):
        out = T.matmul(t64([[1, 2]]), t64([[3], [4]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_inner_dim_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = t64(rng.normal(size=(3, 4)), requires_grad=True)
        b = t64(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return T.sum_(T.matmul(T.Tensor(a.data, dtype=np.float64),
                                   T.Tensor(b.data, dtype=np.float64))).item()

        T.backward(T.sum_(T.matmul(a, b)))
        assert max_rel_err(a.grad, fd_gradient(loss, a.data)) < 1e-5
        assert max_rel_err(b.grad, fd_gradient(loss, b.data)) < 1e-5


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_no_overflow_from_max_subtraction(self):
        out = T.softmax(t64([1000.0, 1000.0]), axis=0)
        assert np.array_equal(out.data, [0.5, 0.5])

    def test_matches_independent_evaluation(self):
        # independent oracle: math-module arithmetic, explicit normalization
        ex = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        expected = [v / sum(ex) for v in ex]
        out = T.softmax(t64([1.0, 2.0, 3.0]), axis=0)
        assert np.max(np.abs(out.data - expected)) < 1e-10

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = T.softmax(t64(rng.normal(size=(5, 7)) * 10), axis=1)
        assert np.all(out.data >= 0)
        assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) < 1e-6

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError, match="NaN"):
            T.softmax(t64([1.0, float("nan")]), axis=0)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))

        def loss():
            s = T.softmax(T.Tensor(x.data, dtype=np.float64), axis=1)
            return T.sum_(T.mul(s, T.constant(w, dtype=np.float64))).item()

        out = T.sum_(T.mul(T.softmax(x, axis=1), T.constant(w, dtype=np.float64)))
        T.backward(out)
        assert max_rel_err(x.grad, fd_gradient(loss, x.data)) < 1e-5


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        gain = t64([1.0, 1.0, 1.0])
        bias = t64([0.0, 0.0, 0.0])
        out = T.layer_norm(t64([[5.0, 5.0, 5.0]]), gain, bias, eps=1e-5)
        assert np.array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_symmetric_row_keeps_sign_unit_variance(self):
        out = T.layer_norm(t64([[1.0, -1.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-8)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-4)
        assert out.data[0, 0] > 0 > out.data[0, 1]

    def test_rows_normalized_before_affine(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 8)) * 3 + 1
        out = T.layer_norm(t64(x), t64(np.ones(8)), t64(np.zeros(8)), eps=1e-10)
        assert np.max(np.abs(out.data.mean(axis=1))) < 1e-5
        assert np.max(np.abs(out.data.var(axis=1) - 1.0)) < 1e-5

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ConfigError):
            T.layer_norm(t64([[1.0]]), t64([1.0]), t64([0.0]), eps=0.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = t64(rng.normal(size=(4, 8)), requires_grad=True)
        gain = t64(rng.normal(size=8), requires_grad=True)
        bias = t64(rng.normal(size=8), requires_grad=True)
        w = rng.normal(size=(4, 8))

        def loss():
            out = T.layer_norm(T.Tensor(x.data, dtype=np.float64),
                               T.Tensor(gain.data, dtype=np.float64),
                               T.Tensor(bias.data, dtype=np.float64), eps=1e-5)
            return T.sum_(T.mul(out, T.constant(w, dtype=np.float64))).item()

        out = T.sum_(T.mul(T.layer_norm(x, gain, bias, eps=1e-5),
                           T.constant(w, dtype=np.float64)))
        T.backward(out)
        assert max_rel_err(x.grad, fd_gradient(loss, x.data)) < 1e-5
        assert max_rel_err(gain.grad, fd_gradient(loss, gain.data)) < 1e-5
        assert max_rel_err(bias.grad, fd_gradient(loss, bias.data)) < 1e-5


class TestElementwise:
    def test_relu(self):
        out = T.relu(t64([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_pow_scalar(self):
        out = T.power(t64([0.5]), 2.0)
        assert np.array_equal(out.data, [0.25])

    def test_composite_gradient(self):
        # f(x) = sum(relu(x)^2)
        rng = np.random.default_rng(5)
        x = t64(rng.normal(size=7), requires_grad=True)

        def loss():
            return T.sum_(T.power(T.relu(T.Tensor(x.data, dtype=np.float64)), 2.0)).item()

        T.backward(T.sum_(T.power(T.relu(x), 2.0)))
        assert max_rel_err(x.grad, fd_gradient(loss, x.data)) < 1e-5

    def test_log_rejects_nonpositive_with_index(self):
        with pytest.raises(NumericError, match="flat index 2"):
            T.log(t64([1.0, 2.0, -1.0]))

    def test_power_tensor_exponent_gradients(self):
        rng = np.random.default_rng(6)
        base = t64(rng.uniform(0.1, 0.9, size=5), requires_grad=True)
        expo = t64(2.0, requires_grad=True)

        def loss():
            return T.sum_(T.power(T.Tensor(base.data, dtype=np.float64),
                                  T.Tensor(expo.data, dtype=np.float64))).item()

        T.backward(T.sum_(T.power(base, expo)))
        assert max_rel_err(base.grad, fd_gradient(loss, base.data)) < 1e-5
        assert max_rel_err(expo.grad, fd_gradient(loss, expo.data)) < 1e-5

    def test_power_tensor_exponent_rejects_nonpositive_base(self):
        with pytest.raises(NumericError):
            T.power(t64([0.0, 1.0]), t64(2.0, requires_grad=True))

    def test_clamp_gradient_masks_clamped_region(self):
        x = t64([-1.0, 0.5, 2.0], requires_grad=True)
        T.backward(T.sum_(T.clamp(x, 0.0, 1.0)))
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_no_silent_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            T.mul(t64(np.zeros(3)), t64(np.zeros(4)))

    def test_bias_broadcast_allowed_and_correct(self):
        x = t64(np.zeros((3, 2)), requires_grad=True)
        b = t64([1.0, 2.0], requires_grad=True)
        out = T.add(x, b)
        assert np.array_equal(out.data, [[1.0, 2.0]] * 3)
        T.backward(T.sum_(out))
        assert np.array_equal(b.grad, [3.0, 3.0])

    def test_structural_ops_gradient(self):
        # concat + slice + transpose + reshape composed into one scalar
        rng = np.random.default_rng(7)
        a = t64(rng.normal(size=(2, 3)), requires_grad=True)
        b = t64(rng.normal(size=(2, 3)), requires_grad=True)
        w = rng.normal(size=(3, 2))

        def build(at, bt):
            cat = T.concat([at, bt], axis=0)          # 4x3
            sl = T.slice_axis(cat, 0, 1, 4)           # 3x3
            tr = T.transpose(sl)                      # 3x3
            rs = T.reshape(tr, (3, 3))
            return T.sum_(T.mul(T.slice_axis(rs, 1, 0, 2),
                                T.constant(w, dtype=np.float64)))

        def loss():
            return build(T.Tensor(a.data, dtype=np.float64),
                         T.Tensor(b.data, dtype=np.float64)).item()

        T.backward(build(a, b))
        assert max_rel_err(a.grad, fd_gradient(loss, a.data)) < 1e-5
        assert max_rel_err(b.grad, fd_gradient(loss, b.data)) < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t64(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        T.backward(T.sum_(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        y = t64([4.0, 5.0, 6.0], requires_grad=True)
        T.backward(T.sum_(T.mul(x, y)))
        assert np.array_equal(x.grad, y.data)
        assert np.array_equal(y.grad, x.data)

    def test_repeated_backward_accumulates(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = T.sum_(x)
        T.backward(loss)
        T.backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.scale(x, 2.0))

    def test_shared_subexpression_fanout(self):
        # z = x*x reused twice: d/dx [sum(z) + sum(z)] = 4x
        x = t64([1.0, -2.0], requires_grad=True)
        z = T.mul(x, x)
        T.backward(T.add(T.sum_(z), T.sum_(z)))
        assert np.allclose(x.grad, 4 * x.data)

    def test_zero_grads(self):
        x = t64([1.0], requires_grad=True)
        T.backward(T.sum_(x))
        T.zero_grads([x])
        assert x.grad is None


class TestDeterminism:
    def test_bit_identical_replay(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(16, 16))
        b = rng.normal(size=(16, 16))

        def run():
            x = t64(a, requires_grad=True)
            out = T.mean(T.softmax(T.matmul(x, t64(b)), axis=1))
            T.backward(out)
            return out.data.copy(), x.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert o1.tobytes() == o2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64])
    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (2, 3, 4)])
    def test_round_trip(self, dtype, shape):
        rng = np.random.default_rng(9)
        arr = (rng.normal(size=shape) * 10).astype(dtype)
        buf = io.BytesIO()
        T.write_array(buf, arr)
        buf.seek(0)
        back = T.read_array(buf)
        assert back.dtype == np.dtype(dtype)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_header_is_plain_text(self):
        buf = io.BytesIO()
        T.write_array(buf, np.zeros((2, 3), dtype=np.float32))
        assert buf.getvalue().startswith(b"f32 2 2 3\n")

    def test_malformed_header_rejected(self):
        with pytest.raises(IngestionError):
            T.read_array(io.BytesIO(b"zz 1 3\n" + b"\x00" * 24))

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        T.write_array(buf, np.zeros(4, dtype=np.float64))
        data = buf.getvalue()[:-8]
        with pytest.raises(IngestionError, match="truncated"):
            T.read_array(io.BytesIO(data))

    def test_rank_dimension_count_mismatch_rejected(self):
        with pytest.raises(IngestionError):
            T.read_array(io.BytesIO(b"f32 2 3\n" + b"\x00" * 12))


class TestDtypeDiscipline:
    def test_mixed_dtypes_rejected(self):
        a = T.Tensor([1.0], dtype=np.float32)
        b = T.Tensor([1.0], dtype=np.float64)
        with pytest.raises(ContractError, match="dtype"):
            T.add(a, b)

    def test_float32_pipeline_stays_float32(self):
        x = T.Tensor(np.ones((2, 2)), dtype=np.float32, requires_grad=True)
        out = T.mean(T.relu(T.matmul(x, T.Tensor(np.ones((2, 2)), dtype=np.float32))))
        assert out.dtype == np.float32
        T.backward(out)
        assert x.grad.dtype == np.float32


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_softmax_simplex_property(values):
    out = T.softmax(T.Tensor(values, dtype=np.float64), axis=0)
    assert np.all(out.data >= 0)
    assert abs(float(out.data.sum()) - 1.0) < 1e-6


@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_matmul_matches_numpy_property(m, k, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, 3))
    out = T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64))
    assert np.array_equal(out.data, a @ b)
