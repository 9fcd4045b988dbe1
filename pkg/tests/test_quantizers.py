import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_proxy_min
from mmqlab.numerics import RngStream, randn_matrix
from mmqlab.quantizers import (
    GridScheme,
    awq_quantize,
    dequantize,
    gptq_quantize,
    proxy_loss,
    rtn_group_quantize,
    uniform_quantize,
)


class TestUniform:
    def test_worked_two_bit_example(self):
        w = np.array([[0.0, 0.4, 1.0]], dtype=np.float32)
        q = uniform_quantize(w, 2)
        assert q.codes.tolist() == [[0, 1, 3]]
        assert np.allclose(dequantize(q), [[0.0, 1.0 / 3.0, 1.0]], atol=1e-7)

    def test_constant_matrix_is_exact(self):
        w = np.full((5, 3), 0.7, dtype=np.float32)
        q = uniform_quantize(w, 4)
        assert np.array_equal(dequantize(q), w)
        assert np.all(q.codes == 0)
        assert q.grid_lo[0, 0] == q.grid_hi[0, 0] == np.float32(0.7)

    def test_sixteen_bit_error_bound(self):
        w = randn_matrix(RngStream(3), 64, 64, 1.0)
        q = uniform_quantize(w, 16)
        bound = (float(w.max()) - float(w.min())) / (2 * (2**16 - 1))
        # one ulp of the largest grid endpoint covers float32 storage rounding
        allowance = float(np.spacing(np.float32(max(abs(w.max()), abs(w.min())))))
        assert float(np.max(np.abs(w - dequantize(q)))) <= bound + allowance

    def test_round_trip_error_monotone_in_bits(self):
        w = randn_matrix(RngStream(4), 16, 16, 1.0)
        errors = [
            float(np.max(np.abs(w - dequantize(uniform_quantize(w, k))))) for k in range(2, 17)
        ]
        assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))

    def test_quantize_dequantize_fixed_point(self):
        w = dequantize(uniform_quantize(randn_matrix(RngStream(5), 8, 8, 1.0), 5))
        assert np.array_equal(dequantize(uniform_quantize(w, 5)), w)

    def test_non_finite_rejected(self):
        w = np.array([[1.0, np.nan]], dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            uniform_quantize(w, 4)

    @pytest.mark.parametrize("k", [1, 17, 0])
    def test_bits_out_of_range(self, k):
        with pytest.raises(ValueError):
            uniform_quantize(np.ones((2, 2), dtype=np.float32), k)


class TestDequantize:
    def test_grid_endpoints_exact(self):
        q = uniform_quantize(np.array([[-1.0, 0.2, 1.0]], dtype=np.float32), 6)
        out = dequantize(q)
        assert out[0, 0] == np.float32(-1.0)
        assert out[0, 2] == np.float32(1.0)


class TestRtnGroup:
    def test_group_size_numel_reduces_to_uniform(self):
        w = randn_matrix(RngStream(6), 4, 8, 1.0)
        grouped = rtn_group_quantize(w, 3, w.size)
        plain = uniform_quantize(w, 3)
        assert np.array_equal(grouped.codes, plain.codes)
        assert grouped.scheme is GridScheme.PER_TENSOR

    def test_per_row_groups_recover_endpoints(self):
        w = np.array([[0.0, 1.0], [10.0, 11.0]], dtype=np.float32)
        q = rtn_group_quantize(w, 2, 2)
        assert np.array_equal(dequantize(q), w)

    def test_per_group_error_bound(self):
        w = randn_matrix(RngStream(8), 16, 128, 1.0)
        q = rtn_group_quantize(w, 4, 64)
        out = dequantize(q)
        for g in range(2):
            sl = slice(64 * g, 64 * (g + 1))
            span = w[:, sl].max(axis=1) - w[:, sl].min(axis=1)
            err = np.abs(w[:, sl] - out[:, sl]).max(axis=1)
            assert np.all(err <= span / (2 * 15) + 1e-7)

    def test_short_last_group(self):
        w = randn_matrix(RngStream(9), 3, 10, 1.0)
        q = rtn_group_quantize(w, 4, 4)
        assert q.grid_lo.shape == (3, 3)
        assert np.all(np.isfinite(dequantize(q)))

    def test_zero_group_size_rejected(self):
        with pytest.raises(ValueError, match="group_size"):
            rtn_group_quantize(np.ones((2, 2), dtype=np.float32), 4, 0)


class TestProxyLoss:
    def test_equal_weights_give_zero(self):
        w = randn_matrix(RngStream(10), 4, 4, 1.0)
        x = randn_matrix(RngStream(11), 6, 4, 1.0)
        assert proxy_loss(w, w, x) == 0.0

    def test_identity_activations_give_frobenius(self):
        w = randn_matrix(RngStream(12), 4, 4, 1.0)
        w_hat = np.zeros_like(w)
        expected = float(np.sum(w.astype(np.float64) ** 2))
        assert proxy_loss(w, w_hat, np.eye(4, dtype=np.float32)) == pytest.approx(expected)

    def test_hand_case(self):
        w = np.eye(2, dtype=np.float32)
        w_hat = np.zeros((2, 2), dtype=np.float32)
        x = np.array([[1.0, 1.0]], dtype=np.float32)
        assert proxy_loss(w, w_hat, x) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            proxy_loss(np.ones((2, 2), np.float32), np.ones((2, 3), np.float32), np.ones((1, 2), np.float32))
        with pytest.raises(ValueError):
            proxy_loss(np.ones((2, 2), np.float32), np.ones((2, 2), np.float32), np.ones((1, 3), np.float32))


class TestGptq:
    def test_on_grid_weights_are_a_fixed_point(self):
        base = randn_matrix(RngStream(13), 4, 6, 1.0)
        w = dequantize(rtn_group_quantize(base, 3, 6))
        x = randn_matrix(RngStream(14), 8, 6, 1.0)
        q, err = gptq_quantize(w, x, 3, group_size=6)
        assert err == 0.0
        assert np.array_equal(dequantize(q), w)
        assert np.array_equal(q.codes, rtn_group_quantize(w, 3, 6).codes)

    def test_isotropic_hessian_equals_rtn(self):
        w = randn_matrix(RngStream(15), 4, 6, 1.0)
        x = (np.eye(6) * 2.0).astype(np.float32)
        q, _ = gptq_quantize(w, x, 3, group_size=6)
        assert np.array_equal(q.codes, rtn_group_quantize(w, 3, 6).codes)

    def test_sandwich_on_two_by_two(self):
        # brute-force optimum <= GPTQ <= RTN (statistically), same grids
        for i in range(10):
            s = RngStream(900 + i)
            w = randn_matrix(s, 2, 2, 1.0)
            x = randn_matrix(s, 8, 2, 1.0)
            q, gptq_err = gptq_quantize(w, x, 2, group_size=4)
            rtn_err = proxy_loss(w, dequantize(rtn_group_quantize(w, 2, 4)), x)
            assert brute_force_proxy_min(w, x, 2) <= gptq_err + 1e-9
            assert gptq_err <= rtn_err + 1e-9

    def test_beats_rtn_on_average(self):
        gptq_total = rtn_total = 0.0
        for i in range(20):
            s = RngStream(700 + i)
            w = randn_matrix(s, 8, 16, 1.0)
            x = randn_matrix(s, 32, 16, 1.0)
            _, err = gptq_quantize(w, x, 2, group_size=16)
            gptq_total += err
            rtn_total += proxy_loss(w, dequantize(rtn_group_quantize(w, 2, 16)), x)
        assert gptq_total < rtn_total

    def test_deterministic(self):
        w = randn_matrix(RngStream(16), 8, 16, 1.0)
        x = randn_matrix(RngStream(17), 12, 16, 1.0)
        q1, e1 = gptq_quantize(w, x, 4)
        q2, e2 = gptq_quantize(w, x, 4)
        assert e1 == e2
        assert np.array_equal(q1.codes, q2.codes)
        assert np.array_equal(q1.grid_lo, q2.grid_lo)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="in_features"):
            gptq_quantize(np.ones((2, 3), np.float32), np.ones((4, 2), np.float32), 4)

    def test_zero_activation_channel_handled(self):
        w = randn_matrix(RngStream(18), 4, 6, 1.0)
        x = randn_matrix(RngStream(19), 8, 6, 1.0)
        x[:, 2] = 0.0
        q, err = gptq_quantize(w, x, 4, group_size=6)
        assert np.all(np.isfinite(dequantize(q)))
        assert np.isfinite(err)


class TestAwq:
    def test_flat_activations_reduce_to_rtn_bit_exactly(self):
        w = randn_matrix(RngStream(20), 4, 8, 1.0)
        x = np.ones((10, 8), dtype=np.float32)
        q, alpha, _ = awq_quantize(w, x, 4, group_size=4)
        ref = rtn_group_quantize(w, 4, 4)
        assert alpha == 0.0
        assert np.array_equal(q.codes, ref.codes)
        assert np.array_equal(q.grid_lo, ref.grid_lo)
        assert np.array_equal(q.grid_hi, ref.grid_hi)
        assert q.group_size == ref.group_size

    def test_skewed_channel_improves_on_rtn(self):
        s = RngStream(21)
        w = randn_matrix(s, 8, 16, 1.0)
        x = randn_matrix(s, 32, 16, 1.0)
        x[:, 5] *= 1000.0
        q, alpha, err = awq_quantize(w, x, 3, group_size=8)
        rtn_err = proxy_loss(w, dequantize(rtn_group_quantize(w, 3, 8)), x)
        assert alpha > 0.0
        assert err < rtn_err

    def test_sixteen_bit_near_lossless(self):
        s = RngStream(22)
        w = randn_matrix(s, 8, 16, 1.0)
        x = randn_matrix(s, 32, 16, 1.0)
        _, _, err = awq_quantize(w, x, 16, group_size=8)
        base = float(np.sum((x.astype(np.float64) @ w.astype(np.float64).T) ** 2))
        assert err <= 1e-6 * base

    def test_zero_activation_channel_gets_unit_scale(self):
        s = RngStream(23)
        w = randn_matrix(s, 4, 8, 1.0)
        x = randn_matrix(s, 16, 8, 1.0)
        x[:, 0] = 0.0
        x[:, 3] *= 50.0
        q, alpha, err = awq_quantize(w, x, 3, group_size=8)
        assert np.all(np.isfinite(dequantize(q)))
        assert np.isfinite(err)

    def test_stored_form_reproduces_effective_weights(self):
        # dequantize alone must equal the descaled reconstruction used in the search
        s = RngStream(24)
        w = randn_matrix(s, 6, 12, 1.0)
        x = randn_matrix(s, 20, 12, 1.0)
        x[:, 7] *= 200.0
        q, alpha, err = awq_quantize(w, x, 2, group_size=6)
        assert alpha > 0.0
        assert proxy_loss(w, dequantize(q), x) == pytest.approx(err, rel=1e-12)


@st.composite
def adversarial_matrices(draw):
    rows = draw(st.integers(1, 4))
    cols = draw(st.integers(1, 6))
    values = draw(
        st.lists(
            st.floats(min_value=-3e38, max_value=3e38, allow_nan=False, allow_infinity=False),
            min_size=rows * cols,
            max_size=rows * cols,
        )
    )
    return np.array(values, dtype=np.float32).reshape(rows, cols)


class TestCodeRangeSafety:
    @given(adversarial_matrices(), st.integers(2, 16))
    @settings(max_examples=120, deadline=None)
    def test_codes_never_exceed_levels(self, w, k):
        for q in (uniform_quantize(w, k), rtn_group_quantize(w, k, 2)):
            assert int(q.codes.max()) <= 2**k - 1
            assert np.all(q.grid_lo <= q.grid_hi)
            assert np.all(np.isfinite(dequantize(q)))

    @given(st.integers(2, 16))
    @settings(max_examples=15, deadline=None)
    def test_nan_always_rejected(self, k):
        w = np.array([[np.nan, 1.0]], dtype=np.float32)
        with pytest.raises(ValueError):
            uniform_quantize(w, k)
