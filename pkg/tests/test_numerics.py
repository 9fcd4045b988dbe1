import math

import numpy as np
import pytest

from mmqlab.numerics import (
    NotPositiveDefiniteError,
    RngStream,
    cholesky_spd,
    derive_seed,
    invert_spd,
    randn_matrix,
)


class TestRngStream:
    def test_raw64_golden_sequence(self):
        # canonical splitmix64 outputs for seed 0; pins the PRNG across refactors
        assert [int(v) for v in RngStream(0).raw64(3)] == [
            16294208416658607535,
            7960286522194355700,
            487617019471545679,
        ]

    def test_counter_resume(self):
        a = RngStream(42)
        first = a.raw64(3)
        rest = a.raw64(2)
        b = RngStream(42)
        combined = b.raw64(5)
        assert np.array_equal(np.concatenate([first, rest]), combined)
        assert a.counter == b.counter == 5

    def test_uniforms_in_half_open_interval(self):
        u = RngStream(9).uniforms(10_000)
        assert np.all(u > 0.0) and np.all(u <= 1.0)

    def test_permutation_and_choice(self):
        s = RngStream(5)
        perm = s.permutation(100)
        assert sorted(perm.tolist()) == list(range(100))
        picked = RngStream(5, counter=1000).choice(50, 10)
        assert len(set(picked.tolist())) == 10
        assert np.all(np.diff(picked) > 0)
        with pytest.raises(ValueError):
            RngStream(5).choice(3, 4)

    def test_spawn_is_independent_of_parent_counter(self):
        parent = RngStream(3)
        parent.raw64(17)
        assert parent.spawn("child").seed == RngStream(3).spawn("child").seed

    def test_derive_seed_pinned(self):
        assert derive_seed(7, "model") == 7084779399996913251
        assert derive_seed(7, "model") != derive_seed(7, "probes")
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


class TestRandnMatrix:
    def test_deterministic(self):
        a = randn_matrix(RngStream(1), 2, 2, 1.0)
        b = randn_matrix(RngStream(1), 2, 2, 1.0)
        assert np.array_equal(a, b)
        assert a.dtype == np.float32

    def test_seed_separation_with_lln_bound(self):
        a = randn_matrix(RngStream(1), 64, 64, 1.0)
        b = randn_matrix(RngStream(2), 64, 64, 1.0)
        assert a.mean() != b.mean()
        bound = 4.0 / math.sqrt(4096)
        assert abs(a.mean()) < bound and abs(b.mean()) < bound

    def test_sample_std_pinned_window(self):
        m = randn_matrix(RngStream(7), 1, 4096, 0.02)
        assert 0.018 <= float(m.std()) <= 0.022

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError, match="empty matrix"):
            randn_matrix(RngStream(1), 0, 4, 1.0)
        with pytest.raises(ValueError, match="empty matrix"):
            randn_matrix(RngStream(1), 4, 0, 1.0)

    def test_bad_std_rejected(self):
        with pytest.raises(ValueError):
            randn_matrix(RngStream(1), 2, 2, 0.0)


class TestCholesky:
    def test_identity(self):
        eye = np.eye(3, dtype=np.float32)
        assert np.allclose(cholesky_spd(eye, 0.0), eye)

    def test_hand_example(self):
        a = np.array([[4.0, 2.0], [2.0, 3.0]], dtype=np.float32)
        expected = np.array([[2.0, 0.0], [1.0, math.sqrt(2.0)]])
        assert np.allclose(cholesky_spd(a, 0.0), expected, atol=1e-6)

    def test_damping_is_mean_diag_scaled(self):
        a = np.eye(2, dtype=np.float32)
        lower = cholesky_spd(a, 0.01)
        assert np.allclose(lower, np.diag([math.sqrt(1.01)] * 2), atol=1e-7)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            cholesky_spd(np.ones((2, 3), dtype=np.float32), 0.0)

    def test_asymmetric_rejected(self):
        a = np.array([[1.0, 0.5], [0.0, 1.0]], dtype=np.float32)
        with pytest.raises(ValueError, match="symmetric"):
            cholesky_spd(a, 0.0)

    def test_not_positive_definite_names_column(self):
        a = np.diag([1.0, -1.0]).astype(np.float32)
        with pytest.raises(NotPositiveDefiniteError, match="column 1"):
            cholesky_spd(a, 0.0)

    def test_reconstruction_round_trip_many(self):
        # 1000 random SPD matrices, sizes cycling 1..12
        for i in range(1000):
            n = i % 12 + 1
            m = randn_matrix(RngStream(derive_seed(100, i)), n, n, 1.0).astype(np.float64)
            a = (m @ m.T + np.eye(n)).astype(np.float32)
            lower = cholesky_spd(a, 0.0).astype(np.float64)
            rebuilt = lower @ lower.T
            rel = np.linalg.norm(rebuilt - a.astype(np.float64)) / np.linalg.norm(a)
            assert rel <= 1e-5


class TestInvertSpd:
    def test_identity(self):
        eye = np.eye(4, dtype=np.float32)
        assert np.allclose(invert_spd(eye, 0.0), eye, atol=1e-6)

    def test_diagonal(self):
        inv = invert_spd(np.diag([2.0, 4.0]).astype(np.float32), 0.0)
        assert np.allclose(inv, np.diag([0.5, 0.25]), atol=1e-7)

    def test_random_spd_residual_bound(self):
        m = randn_matrix(RngStream(17), 8, 8, 1.0).astype(np.float64)
        a = (m @ m.T + np.eye(8)).astype(np.float32)
        b = invert_spd(a, 0.0).astype(np.float64)
        residual = np.linalg.norm(a.astype(np.float64) @ b - np.eye(8))
        assert residual <= 1e-4 * 8

    def test_error_propagates(self):
        with pytest.raises(NotPositiveDefiniteError):
            invert_spd(np.diag([1.0, 0.0]).astype(np.float32), 0.0)

    def test_pure_and_bit_identical(self):
        a = np.array([[4.0, 2.0], [2.0, 3.0]], dtype=np.float32)
        assert np.array_equal(invert_spd(a, 0.01), invert_spd(a, 0.01))
