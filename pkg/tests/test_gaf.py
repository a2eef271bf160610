import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgaf import gaf
from mgaf.ops import conv2d_same, flatten4d, sigmoid
from reference import conv2d_same_ref


class TestHighBoostKernel:
    def test_unit_amplification(self):
        expected = np.array([[-1.0, -1.0, -1.0], [-1.0, 9.0, -1.0], [-1.0, -1.0, -1.0]])
        np.testing.assert_array_equal(gaf.high_boost_kernel(1.0), expected)

    def test_zero_amplification_is_pure_highpass(self):
        k = gaf.high_boost_kernel(0.0)
        assert k[1, 1] == 8.0
        assert k.sum() == 0.0

    def test_unit_kernel_preserves_constant_interior(self):
        out = conv2d_same_ref(np.full((6, 6), 2.5), gaf.high_boost_kernel(1.0))
        np.testing.assert_allclose(out[1:-1, 1:-1], 2.5, atol=1e-12)


class TestGate:
    def test_zero_features_give_half_gates(self):
        g = gaf.gate(np.zeros((4, 6)), gaf.high_boost_kernel(1.0))
        np.testing.assert_array_equal(g, np.full((4, 6), 0.5))

    def test_single_cell_gate(self):
        for v in (-2.0, 0.3, 1.7):
            g = gaf.gate(np.array([[v]]), gaf.high_boost_kernel(1.0))
            np.testing.assert_allclose(g, sigmoid(np.array([[9.0 * v]])), atol=1e-15)

    def test_constant_interior_approaches_sigmoid_of_value(self):
        v = 1.3
        g = gaf.gate(np.full((9, 9), v), gaf.high_boost_kernel(1.0))
        np.testing.assert_allclose(g[1:-1, 1:-1], sigmoid(np.array(v)), atol=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_gate_range_open_interval(self, seed):
        # |conv| stays below ~17 for features in (-1, 1), well inside the
        # range where float64 sigmoid is strictly inside (0, 1)
        rng = np.random.default_rng(seed)
        f = rng.uniform(-1, 1, size=(5, 8))
        g = gaf.gate(f, gaf.high_boost_kernel(1.0))
        assert np.all(g > 0.0) and np.all(g < 1.0)

    def test_per_sample_rows_are_independent(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(3, 12))
        k = gaf.high_boost_kernel(1.0)
        whole = gaf.gate(f, k, scope="per_sample")
        for i in range(3):
            row = gaf.gate(f[i : i + 1], k, scope="per_sample")
            np.testing.assert_array_equal(whole[i : i + 1], row)

    def test_per_sample_matches_row_conv(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(2, 9))
        k = gaf.high_boost_kernel(1.0)
        got = gaf.gate(f, k, scope="per_sample")
        for i in range(2):
            expected = sigmoid(conv2d_same(f[i : i + 1], k))
            np.testing.assert_allclose(got[i : i + 1], expected, atol=1e-12)

    def test_batch_scope_single_row_equals_per_sample(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(1, 11))
        k = gaf.high_boost_kernel(1.0)
        np.testing.assert_allclose(gaf.gate(f, k, "batch"),
                                   gaf.gate(f, k, "per_sample"), atol=1e-12)

    def test_non_finite_rejected(self):
        f = np.array([[1.0, np.nan]])
        with pytest.raises(ValueError, match="finite"):
            gaf.gate(f, gaf.high_boost_kernel(1.0))


class TestFuse:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.f1 = rng.normal(size=(5, 7))
        self.f2 = rng.normal(size=(5, 7))
        self.k = gaf.high_boost_kernel(1.0)

    def test_zero_modality_annihilates(self):
        out = gaf.fuse([self.f1, np.zeros_like(self.f1)], "gated_average", self.k)
        expected = gaf.gate(self.f1, self.k) * self.f1
        np.testing.assert_array_equal(out, expected)

    def test_average_is_elementwise_sum(self):
        out = gaf.fuse([self.f1, self.f2], "average", self.k)
        assert np.array_equal(out, self.f1 + self.f2)

    def test_gated_no_kernel_definition(self):
        out = gaf.fuse([self.f1, self.f2], "gated_no_kernel", self.k)
        expected = sigmoid(self.f1) * self.f1 + sigmoid(self.f2) * self.f2
        assert np.array_equal(out, expected)

    @pytest.mark.parametrize("k_modalities", [1, 2, 3, 4])
    @pytest.mark.parametrize("mode", ["gated_average", "average", "gated_no_kernel"])
    def test_dims_preserved_for_any_modality_count(self, k_modalities, mode):
        rng = np.random.default_rng(k_modalities)
        mats = [rng.normal(size=(4, 9)) for _ in range(k_modalities)]
        out = gaf.fuse(mats, mode, self.k)
        assert out.shape == (4, 9)

    def test_concat_grows_columns(self):
        mats = [np.zeros((4, 3)), np.zeros((4, 5)), np.zeros((4, 2))]
        out = gaf.fuse(mats, "concat")
        assert out.shape == (4, 10)

    def test_concat_requires_equal_rows_only(self):
        with pytest.raises(ValueError, match="row"):
            gaf.fuse([np.zeros((4, 3)), np.zeros((5, 3))], "concat")

    def test_summing_modes_require_equal_dims(self):
        with pytest.raises(ValueError, match="dims"):
            gaf.fuse([np.zeros((4, 3)), np.zeros((4, 5))], "average")

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            gaf.fuse([], "average")

    def test_forced_unit_gates_reproduce_average(self):
        forced = gaf.fuse([self.f1, self.f2], "gated_average", self.k,
                          gate_override=lambda f: np.ones_like(f))
        averaged = gaf.fuse([self.f1, self.f2], "average", self.k)
        np.testing.assert_array_equal(forced, averaged)

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_modality_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        mats = [rng.normal(size=(3, 6)) for _ in range(3)]
        for mode in ("gated_average", "average", "gated_no_kernel"):
            a = gaf.fuse(mats, mode, self.k)
            b = gaf.fuse(mats[::-1], mode, self.k)
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestFuseStage:
    def test_single_sample_row_vector(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(2, 3, 2, 1))
        out = gaf.fuse_stage([t], "average")
        assert out.shape == (1, 12)
        np.testing.assert_array_equal(out, flatten4d(t))

    def test_identical_modalities_average_to_double(self):
        rng = np.random.default_rng(6)
        t = rng.normal(size=(2, 2, 2, 3))
        out = gaf.fuse_stage([t, t], "average")
        np.testing.assert_array_equal(out, 2.0 * flatten4d(t))

    def test_flatten_then_fuse_equivalence(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 2, 2, 4))
        b = rng.normal(size=(3, 2, 2, 4))
        staged = gaf.fuse_stage([a, b], "gated_average")
        direct = gaf.fuse([flatten4d(a), flatten4d(b)], "gated_average")
        np.testing.assert_array_equal(staged, direct)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="share"):
            gaf.fuse_stage([np.zeros((2, 2, 1, 3)), np.zeros((2, 2, 2, 3))], "average")
