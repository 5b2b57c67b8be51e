import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import apply_crf_brute, covariance_brute, crf_ls_brute, crf_point
from spatialcodec.signal import CODEC_WINDOW, SpectrogramTensor
from spatialcodec.spatial import (
    CRFTensor,
    apply_crf,
    band_slices,
    covariance,
    default_band_map,
    estimate_crf,
    input_feature,
    rtf_extract,
)


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def small_band_map(F, n):
    return default_band_map(F, n)


class TestCovariance:
    def test_unit_vector(self):
        X = np.zeros((3, 1, 1), complex)
        X[0] = 1
        phi = covariance(X)[0, 0]
        np.testing.assert_array_equal(phi, np.diag([1, 0, 0]))

    def test_two_channel_example(self):
        X = np.array([1, 1j]).reshape(2, 1, 1)
        np.testing.assert_allclose(covariance(X)[0, 0], [[1, -1j], [1j, 1]])

    def test_single_channel_rejected(self):
        with pytest.raises(ValueError):
            covariance(np.ones((1, 2, 2), complex))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), M=st.integers(2, 8))
    def test_hermitian_rank_one(self, seed, M):
        X = crandn(np.random.default_rng(seed), M, 3, 5)
        phi = covariance(X)
        assert np.max(np.abs(phi - np.conj(np.swapaxes(phi, -1, -2)))) <= 1e-12
        ev = np.linalg.eigvalsh(phi)
        assert np.all(np.abs(ev[..., :-1]) <= 1e-10 * ev[..., -1:])
        assert np.all(ev[..., -1] >= 0)

    def test_matches_brute_force(self):
        X = crandn(np.random.default_rng(3), 4, 6, 7)
        np.testing.assert_allclose(covariance(X), covariance_brute(X), rtol=1e-12)


class TestInputFeature:
    def test_length_for_eight_channels(self):
        X = crandn(np.random.default_rng(0), 8, 2, 3)
        assert input_feature(X).shape == (2, 3, 130)

    def test_zero_input(self):
        assert not np.any(input_feature(np.zeros((4, 2, 3), complex)))

    def test_declared_order(self):
        X = crandn(np.random.default_rng(1), 3, 2, 2)
        feat = input_feature(X, ref=1)
        for t in range(2):
            for f in range(2):
                x = X[:, t, f]
                phi = np.outer(x, x.conj())
                manual = np.concatenate([phi.real.ravel(), phi.imag.ravel(), [x[1].real, x[1].imag]])
                np.testing.assert_allclose(feat[t, f], manual, atol=1e-15)


class TestBands:
    def test_default_band_sizes(self):
        sizes = [s.stop - s.start for s in band_slices(default_band_map())]
        assert sizes == [54, 54, 54, 53, 53, 53]

    def test_non_contiguous_rejected(self):
        with pytest.raises(ValueError):
            band_slices(np.array([0, 1, 0]))


class TestApplyCrf:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.T, self.F = 12, 11
        self.band_map = small_band_map(self.F, 3)
        self.x_ref = crandn(rng, self.T, self.F)
        self.taps = crandn(rng, 2, 3, 3, 9, 3)

    def crf(self, taps):
        return CRFTensor(taps, 4, 1, 5, self.band_map, self.T)

    def test_identity_filter(self):
        taps = np.zeros((2, 3, 3, 9, 3), complex)
        taps[:, :, :, 4, 1] = 1
        out = apply_crf(self.crf(taps), self.x_ref)
        for m in range(2):
            np.testing.assert_array_equal(out[m], self.x_ref)

    def test_zero_filter(self):
        out = apply_crf(self.crf(np.zeros((2, 3, 3, 9, 3))), self.x_ref)
        assert not np.any(out)

    def test_matches_double_sum_everywhere(self):
        out = apply_crf(self.crf(self.taps), self.x_ref)
        ref = apply_crf_brute(self.taps, self.x_ref, 5, self.band_map)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_boundary_bins(self):
        out = apply_crf(self.crf(self.taps), self.x_ref)
        for t, f in [(0, 0), (0, self.F - 1), (self.T - 1, 0), (self.T - 1, self.F - 1), (3, 0), (0, 5)]:
            w = self.taps[1, t // 5, self.band_map[f]]
            assert out[1, t, f] == pytest.approx(crf_point(w, self.x_ref, t, f), rel=1e-12)

    def test_spectrogram_in_spectrogram_out(self):
        S = SpectrogramTensor(np.zeros((1, 3, 321), complex), CODEC_WINDOW, 640)
        W = CRFTensor(np.zeros((1, 1, 6, 9, 3)), 4, 1, 3, default_band_map(), 3)
        out = apply_crf(W, S)
        assert isinstance(out, SpectrogramTensor) and out.values.shape == (1, 3, 321)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_crf(self.crf(self.taps), self.x_ref[:, :-1])
        with pytest.raises(ValueError):
            apply_crf(self.crf(self.taps), self.x_ref[:-6])

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.complex_numbers(max_magnitude=10), b=st.complex_numbers(max_magnitude=10))
    def test_linear_in_filter_and_input(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x1, x2 = crandn(rng, self.T, self.F), crandn(rng, self.T, self.F)
        w1, w2 = crandn(rng, 2, 3, 3, 9, 3), crandn(rng, 2, 3, 3, 9, 3)
        lhs = apply_crf(self.crf(w1), a * x1 + b * x2)
        rhs = a * apply_crf(self.crf(w1), x1) + b * apply_crf(self.crf(w1), x2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))
        lhs = apply_crf(self.crf(a * w1 + b * w2), x1)
        rhs = a * apply_crf(self.crf(w1), x1) + b * apply_crf(self.crf(w2), x1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


class TestEstimateCrf:
    def test_scaled_copy(self):
        rng = np.random.default_rng(5)
        x_ref = crandn(rng, 50, 20)
        alpha = 0.3 - 0.8j
        X = np.stack([x_ref, alpha * x_ref])
        W = estimate_crf(X, L=4, K=1, block_len=50, band_map=small_band_map(20, 2), lam=1e-8)
        taps = W.taps[0, 0]
        for b in range(2):
            assert taps[b, 4, 1] == pytest.approx(alpha, abs=1e-6)
            off = taps[b].copy()
            off[4, 1] = 0
            assert np.max(np.abs(off)) < 1e-6

    def test_shifted_relation(self):
        rng = np.random.default_rng(6)
        x_ref = crandn(rng, 60, 20)
        x_m = np.zeros_like(x_ref)
        x_m[1:] = x_ref[:-1]  # X_m(t, f) = X_ref(t - 1, f)
        W = estimate_crf(np.stack([x_ref, x_m]), L=4, K=1, block_len=60, band_map=small_band_map(20, 1))
        taps = W.taps[0, 0, 0]
        assert abs(taps[4 - 1, 1]) == pytest.approx(1.0, abs=1e-2)
        assert np.argmax(np.abs(taps)) == np.ravel_multi_index((3, 1), taps.shape)

    def test_exact_relation_reconstructs(self):
        rng = np.random.default_rng(7)
        x_ref = crandn(rng, 40, 30)
        true = crandn(rng, 1, 1, 2, 9, 3)
        band_map = small_band_map(30, 2)
        W0 = CRFTensor(true, 4, 1, 40, band_map, 40)
        X = np.concatenate([x_ref[None], apply_crf(W0, x_ref)])
        W = estimate_crf(X, block_len=40, band_map=band_map, lam=1e-8)
        rec = apply_crf(W, x_ref)
        assert np.linalg.norm(rec - X[1:]) / np.linalg.norm(X[1:]) <= 1e-4

    def test_matches_augmented_lstsq(self):
        rng = np.random.default_rng(8)
        X = crandn(rng, 3, 17, 13)
        band_map = small_band_map(13, 3)
        W = estimate_crf(X, ref=1, L=2, K=1, block_len=6, band_map=band_map)
        ref = crf_ls_brute(X, 1, 2, 1, 6, band_map)
        np.testing.assert_allclose(W.taps, ref, rtol=1e-8, atol=1e-10)
        assert W.channels == (0, 2)

    def test_full_fit_beats_single_tap(self):
        rng = np.random.default_rng(9)
        x_ref = crandn(rng, 50, 24)
        x_m = 0.5 * x_ref + 0.3 * np.roll(x_ref, 1, axis=0) + 0.2 * crandn(rng, 50, 24)
        band_map = small_band_map(24, 2)
        W = estimate_crf(np.stack([x_ref, x_m]), block_len=50, band_map=band_map, lam=0.0)
        full_err = np.abs(apply_crf(W, x_ref)[0] - x_m) ** 2
        for s in band_slices(band_map):
            a, y = x_ref[:, s].ravel(), x_m[:, s].ravel()
            g = np.vdot(a, y) / np.vdot(a, a)
            single = np.sum(np.abs(y - g * a) ** 2)
            assert full_err[:, s].sum() <= single

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        X = crandn(rng, 3, 20, 12)
        c = 3.0 - 4.0j
        bm = small_band_map(12, 2)
        a = estimate_crf(X, block_len=10, band_map=bm, lam=0.5).taps
        b = estimate_crf(c * X, block_len=10, band_map=bm, lam=0.5 * abs(c) ** 2).taps
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(estimate_crf(X, block_len=10, band_map=bm).taps,
                                   estimate_crf(c * X, block_len=10, band_map=bm).taps, rtol=1e-9, atol=1e-12)

    def test_degenerate_fallback(self):
        # 6 equations for 27 unknowns: singular normal matrix
        x_ref = crandn(np.random.default_rng(15), 1, 6)
        X = np.stack([x_ref, 2 * x_ref])
        W = estimate_crf(X, block_len=1, band_map=np.zeros(6, int), lam=0.0)
        assert W.degenerate.all()
        assert np.all(np.isfinite(W.taps))
        silent = estimate_crf(np.zeros((2, 4, 6), complex), block_len=4, band_map=np.zeros(6, int))
        assert silent.degenerate.all() and not np.any(silent.taps)

    def test_argument_errors(self):
        X = np.ones((2, 4, 6), complex)
        with pytest.raises(ValueError):
            estimate_crf(X, block_len=0, band_map=np.zeros(6, int))
        with pytest.raises(ValueError):
            estimate_crf(X, lam=-1.0, band_map=np.zeros(6, int))
        with pytest.raises(ValueError):
            estimate_crf(X[:1])


class TestRtf:
    def test_rank_one_known_steering(self):
        rng = np.random.default_rng(11)
        v = crandn(rng, 4)
        g = crandn(rng, 30)
        X = (v[:, None] * g.conj()[None])[:, :, None]
        a = rtf_extract(X, ref=0)
        np.testing.assert_allclose(a.values[0], v / v[0], rtol=1e-10)
        assert a.values[0, 0] == 1

    def test_identical_channels(self):
        s = crandn(np.random.default_rng(12), 20, 5)
        a = rtf_extract(np.stack([s, s, s]))
        np.testing.assert_allclose(a.values, np.ones((5, 3)), atol=1e-12)

    def test_zero_bin_flagged(self):
        X = crandn(np.random.default_rng(13), 3, 10, 4)
        X[:, :, 2] = 0
        a = rtf_extract(X)
        assert a.valid.tolist() == [True, True, False, True]
        assert np.all(np.isnan(a.values[2]))

    def test_weak_reference_fallback(self):
        rng = np.random.default_rng(14)
        v = np.array([0.0, 1.0, 2.0j])
        X = (v[:, None] * crandn(rng, 10)[None])[:, :, None]
        a = rtf_extract(X, ref=0)
        assert a.fallback[0]
        np.testing.assert_allclose(a.values[0], v / v[2], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3))
    def test_scale_invariant(self, seed, c):
        X = crandn(np.random.default_rng(seed), 3, 12, 4)
        np.testing.assert_allclose(rtf_extract(c * X).values, rtf_extract(X).values, rtol=1e-7, atol=1e-9)
