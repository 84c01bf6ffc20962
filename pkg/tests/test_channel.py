"""Readback synthesis, kernels, sampling, and test patterns."""

import numpy as np
import pytest

from bpmlab import channel as ch
from bpmlab import lattice as lm
from bpmlab._rng import substream


class TestGaussianKernel:
    def test_half_peak_at_half_fwhm(self, gauss_kernel):
        val = gauss_kernel.evaluate(15.0, 0.0)
        assert abs(val - 0.5 * gauss_kernel.peak) < 0.01 * gauss_kernel.peak

    def test_integral_matches_analytic(self, gauss_kernel):
        sx = 30.0 * ch.FWHM_TO_SIGMA
        sy = 35.0 * ch.FWHM_TO_SIGMA
        expected = 2 * np.pi * sx * sy / 2.0**2
        assert abs(gauss_kernel.data.sum() - expected) < 0.005 * expected

    def test_symmetry(self, gauss_kernel):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-40, 40, size=(50, 2))
        a = gauss_kernel.evaluate(pts[:, 0], pts[:, 1])
        b = gauss_kernel.evaluate(-pts[:, 0], -pts[:, 1])
        assert np.allclose(a, b)

    def test_undersampled_guard(self):
        with pytest.raises(ValueError, match="undersampled"):
            ch.gaussian_kernel(30.0, 35.0, 1.0, pixel_pitch=11.0)

    def test_truncation_beyond_window(self, gauss_kernel):
        assert gauss_kernel.evaluate(46.0, 0.0) == 0.0
        assert gauss_kernel.evaluate(0.0, 53.0) == 0.0


class TestRender:
    def test_single_island_equals_shifted_kernel(self, gauss_kernel):
        params = lm.LatticeParams(extent_dt=19.0, extent_ct=23.0, sigma_pos_dt=0.0,
                                  sigma_pos_ct=0.0, defect_rate=0.0)
        lat = lm.generate_lattice(params)
        assert lat.n_islands == 1
        img = ch.render_image(lat, np.array([1], np.int8), gauss_kernel)
        expected = gauss_kernel.evaluate(
            img.x_coords()[None, :] - lat.x[0], img.y_coords()[:, None] - lat.y[0]
        )
        assert np.max(np.abs(img.data - expected)) < 1e-6 * gauss_kernel.peak

    def test_checkerboard_zero_mean(self, preset_lattice_32, gauss_kernel):
        bits = ch.ac_demag_pattern(preset_lattice_32, np.inf)
        img = ch.render_image(preset_lattice_32, bits, gauss_kernel)
        peak = np.abs(img.data).max()
        # Interior balance: alternating deposits cancel the DC term.
        assert abs(img.data.mean()) < 1e-3 * max(peak, 1e-30)

    def test_linearity_on_disjoint_supports(self, preset_lattice_32, gauss_kernel):
        lat = preset_lattice_32
        rng = np.random.default_rng(4)
        bits = ch.random_bits(lat.n_islands, rng)
        left = bits.copy()
        left[lat.cols >= lat.n_cols // 2] = 0
        right = bits - left
        r = ch.Renderer(lat, gauss_kernel)
        whole = r.render_batch(bits)
        parts = r.render_batch(left) + r.render_batch(right)
        denom = np.abs(whole).max()
        assert np.max(np.abs(whole - parts)) < 1e-9 * denom

    def test_flip_all_bits_negates(self, preset_lattice_32, gauss_kernel):
        rng = np.random.default_rng(4)
        bits = ch.random_bits(preset_lattice_32.n_islands, rng)
        r = ch.Renderer(preset_lattice_32, gauss_kernel)
        assert np.array_equal(r.render_batch(bits), -r.render_batch(-bits))

    def test_deterministic_per_seed(self, preset_lattice_32, gauss_kernel):
        rng = np.random.default_rng(4)
        bits = ch.random_bits(preset_lattice_32.n_islands, rng)
        noise = ch.NoiseParams(9.5, 22.0, rng_seed=12)
        r = ch.Renderer(preset_lattice_32, gauss_kernel)
        assert np.array_equal(r.render_batch(bits, noise), r.render_batch(bits, noise))

    def test_margin_noise_std_matches_read_snr(self, preset_lattice_32, gauss_kernel):
        lat = preset_lattice_32
        rng = np.random.default_rng(4)
        bits = ch.random_bits(lat.n_islands, rng)
        r = ch.Renderer(lat, gauss_kernel, margin=90.0)
        noise = ch.NoiseParams(None, 22.0, rng_seed=12)
        img = r.render_batch(bits, noise)[0]
        clean = ch.ideal_samples(lat, bits, gauss_kernel, matrix=r.matrix)
        sigma_expected = np.std(clean) / 10 ** (22.0 / 20.0)
        margin_strip = img[:10, :]  # 20 nm strip, ~80 nm from the first row
        assert abs(np.std(margin_strip) - sigma_expected) < 0.03 * sigma_expected

    def test_missing_island_deposits_nothing(self, gauss_kernel):
        params = lm.LatticeParams(extent_dt=18.5 * 8, extent_ct=22.0 * 4, sigma_pos_dt=0.0,
                                  sigma_pos_ct=0.0, defect_rate=0.0)
        lat = lm.generate_lattice(params)
        lat.defect[5] = lm.DEFECT_MISSING
        bits = np.ones(lat.n_islands, np.int8)
        img = ch.render_image(lat, bits, gauss_kernel)
        lat_ok = lm.generate_lattice(params)
        bits_ok = bits.copy()
        img_ref = ch.render_image(lat_ok, bits_ok, gauss_kernel)
        assert np.abs(img.data - img_ref.data).max() > 0.5  # island 5 is absent
        sample = ch.sample_at_islands(img, lat.x[5:6], lat.y[5:6])
        full = ch.sample_at_islands(img_ref, lat.x[5:6], lat.y[5:6])
        assert sample[0] < full[0] - 0.5


class TestSampling:
    def test_pixel_center_equals_pixel_value(self, preset_lattice_32, gauss_kernel):
        r = ch.Renderer(preset_lattice_32, gauss_kernel)
        rng = np.random.default_rng(4)
        img = r.render(ch.random_bits(preset_lattice_32.n_islands, rng))
        x = img.origin_x + 30 * img.pixel_pitch_x
        y = img.origin_y + 40 * img.pixel_pitch_y
        val = ch.sample_at_islands(img, np.array([x]), np.array([y]))
        assert abs(val[0] - img.data[40, 30]) < 1e-12

    def test_single_island_center_near_peak(self, gauss_kernel):
        params = lm.LatticeParams(extent_dt=19.0, extent_ct=23.0, sigma_pos_dt=0.0,
                                  sigma_pos_ct=0.0, defect_rate=0.0)
        lat = lm.generate_lattice(params)
        img = ch.render_image(lat, np.array([1], np.int8), gauss_kernel)
        val = ch.sample_at_islands(img, lat.x, lat.y)
        assert abs(val[0] - gauss_kernel.peak) < 0.01 * gauss_kernel.peak

    def test_uniform_image_constant(self):
        img = ch.ReadbackImage(np.full((40, 50), 3.25), 2.0, 2.0)
        xs = np.array([10.0, 33.3, 71.9])
        ys = np.array([5.0, 41.2, 60.0])
        assert np.allclose(ch.sample_at_islands(img, xs, ys), 3.25)

    def test_out_of_bounds_names_island(self):
        img = ch.ReadbackImage(np.zeros((10, 10)), 2.0, 2.0)
        with pytest.raises(ValueError, match="island 1"):
            ch.sample_at_islands(img, np.array([3.0, 99.0]), np.array([3.0, 3.0]))


class TestPrbs:
    def test_full_period_balance(self):
        seq = ch.prbs(2**15 - 1, seed=1, order=15)
        ones = np.count_nonzero(seq == 1)
        zeros = np.count_nonzero(seq == -1)
        assert abs(ones - zeros) == 1

    def test_autocorrelation_low_at_nonzero_lag(self):
        n = 2**15 - 1
        seq = ch.prbs(n, seed=1, order=15).astype(float)
        for lag in (1, 7, 100):
            rho = np.dot(seq[:-lag], seq[lag:]) / (n - lag)
            assert abs(rho) < 2 / np.sqrt(n)

    def test_same_seed_identical(self):
        assert np.array_equal(ch.prbs(5000, seed=42), ch.prbs(5000, seed=42))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            ch.prbs(0, seed=1)


class TestAcDemag:
    def test_infinite_strength_checkerboard(self, preset_lattice_32):
        bits = ch.ac_demag_pattern(preset_lattice_32, np.inf)
        assert ch.nn_correlation(preset_lattice_32, bits) == -1.0

    def test_zero_strength_uncorrelated(self, preset_lattice_32):
        bits = ch.ac_demag_pattern(preset_lattice_32, 0.0, seed=3)
        n_pairs = 2 * preset_lattice_32.n_rows * preset_lattice_32.n_cols
        assert abs(ch.nn_correlation(preset_lattice_32, bits)) < 3 / np.sqrt(n_pairs)

    def test_default_strength_in_band(self, preset_lattice_32):
        for seed in range(3):
            c = ch.nn_correlation(
                preset_lattice_32, ch.ac_demag_pattern(preset_lattice_32, seed=seed)
            )
            assert -0.9 <= c <= -0.3
