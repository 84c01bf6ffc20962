"""Lattice generation and island-location recovery."""

import numpy as np
import pytest

from bpmlab import channel as ch
from bpmlab import lattice as lm

from conftest import nearest_distances

BP = 18.5
TP = 22.0
K_DT = 2 * np.pi / BP


class TestGenerate:
    def test_rejects_degenerate_extent(self):
        with pytest.raises(ValueError, match="degenerate"):
            lm.generate_lattice(lm.LatticeParams(extent_dt=10.0, extent_ct=300.0))

    def test_rejects_bad_defect_rate(self):
        with pytest.raises(ValueError):
            lm.generate_lattice(lm.LatticeParams(defect_rate=1.0))

    def test_zero_jitter_on_grid(self):
        params = lm.LatticeParams(sigma_pos_dt=0.0, sigma_pos_ct=0.0, defect_rate=0.0,
                                  extent_dt=BP * 10, extent_ct=TP * 5)
        lat = lm.generate_lattice(params)
        assert np.array_equal(lat.x, lat.nominal_x())
        assert np.array_equal(lat.y, lat.nominal_y())
        assert (lat.defect == 0).all()

    def test_deterministic_per_seed(self):
        params = lm.LatticeParams(extent_dt=BP * 20, extent_ct=TP * 10, defect_rate=1e-2, rng_seed=9)
        a = lm.generate_lattice(params)
        b = lm.generate_lattice(params)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.defect, b.defect)

    def test_position_spread_matches_sigmas(self):
        # Paper geometry: sigma 1.1 nm down-track, 1.2 nm cross-track.
        params = lm.LatticeParams(extent_dt=BP * 110, extent_ct=TP * 92,
                                  defect_rate=1e-3, rng_seed=5)
        lat = lm.generate_lattice(params)
        assert lat.n_islands >= 10_000
        std_dt = np.std(lat.x - lat.nominal_x())
        std_ct = np.std(lat.y - lat.nominal_y())
        assert 1.0 <= std_dt <= 1.2
        assert 1.1 <= std_ct <= 1.3

    def test_defects_split_and_partner(self):
        params = lm.LatticeParams(extent_dt=BP * 110, extent_ct=TP * 92,
                                  defect_rate=5e-3, rng_seed=5)
        lat = lm.generate_lattice(params)
        n_bad = np.count_nonzero(lat.defect)
        assert 0 < n_bad < 2 * 5e-3 * lat.n_islands
        merged = lat.defect == lm.DEFECT_MERGED
        assert (lat.merge_partner[merged] >= 0).all()
        assert (lat.merge_partner[~merged] == -1).all()


class TestFitSegment:
    def test_pure_cosine_recovers_model(self):
        x = np.arange(0, 400, 2.0)
        fit = lm.fit_segment(np.cos(K_DT * x + 0.3), 2.0, BP)
        assert abs(fit.wavevector - K_DT) < 1e-4
        assert abs(fit.phase - 0.3) < 0.01

    @pytest.mark.parametrize("bin_offset", [-0.3, 0.3])
    def test_resolves_k_finer_than_fft_bin(self, bin_offset):
        x = np.arange(0, 400, 2.0)
        bin_width = 2 * np.pi / 400.0
        k = K_DT + bin_offset * bin_width
        fit = lm.fit_segment(np.cos(k * x + 1.0), 2.0, BP)
        assert abs(fit.wavevector - k) < 0.05 * bin_width

    def test_white_noise_raises(self):
        rng = np.random.default_rng(0)
        with pytest.raises(lm.LatticeNotDetectedError):
            lm.fit_segment(rng.normal(0, 1, 256), 2.0, BP)

    def test_jittered_readback_k_accuracy(self, exp_kernel):
        # Monte-Carlo over the segment population of one noisy image.
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  defect_rate=0.0, rng_seed=6)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(
            ch.ac_demag_pattern(lat, 1.0, seed=6), ch.NoiseParams(None, 22.0, rng_seed=7)
        )
        fdt, _ = lm.extract_phase_fields(img, 750.0)
        ks = fdt.wavevector[fdt.valid]
        assert len(ks) >= 100
        assert abs(np.median(ks) - K_DT) < 1e-4
        assert np.median(np.abs(ks - K_DT)) < 1e-3


class TestPhaseFields:
    def test_undistorted_fields_constant(self, exp_kernel):
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  sigma_pos_dt=0.0, sigma_pos_ct=0.0,
                                  defect_rate=0.0, rng_seed=5)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(ch.ac_demag_pattern(lat, 1.0, seed=6))
        fdt, fct = lm.extract_phase_fields(img, 750.0)
        for fld, k in ((fdt, K_DT), (fct, 2 * np.pi / TP)):
            dev = fld.deviation_nm()
            assert np.nanmax(np.abs(np.nanmedian(dev, axis=0))) * k < 0.05

    def test_distortion_recovered_in_deviation_map(self, distorted_scan):
        lattice0, stretch, image, _ = distorted_scan
        fdt, _ = lm.extract_phase_fields(image, 750.0)
        dev = fdt.deviation_nm()
        xs = fdt.seg_pos
        # Islands shifted by +dx appear as a phase deficit of k*dx.
        imposed = -stretch(xs)
        imposed -= np.polyval(np.polyfit(xs, imposed, 1), xs)
        col_median = np.nanmedian(dev, axis=0)
        assert np.nanmax(np.abs(col_median - imposed)) < 2.0

    def test_halved_segment_length_agrees(self, exp_kernel):
        # Jitter-free: different window sizes otherwise average different
        # island subsets and genuinely disagree at the ~k*sigma/sqrt(n) level.
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  sigma_pos_dt=0.0, sigma_pos_ct=0.0,
                                  defect_rate=0.0, rng_seed=6)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(
            ch.ac_demag_pattern(lat, 1.0, seed=6), ch.NoiseParams(None, 22.0, rng_seed=9)
        )
        f_a, _ = lm.extract_phase_fields(img, 750.0)
        f_b, _ = lm.extract_phase_fields(img, 375.0)
        diffs = []
        for i in range(f_a.n_lines):
            va, vb = f_a.valid[i], f_b.valid[i]
            if va.sum() < 2 or not vb.any():
                continue
            inside = vb & (f_b.seg_pos >= f_a.seg_pos[va][0]) & (f_b.seg_pos <= f_a.seg_pos[va][-1])
            if not inside.any():
                continue
            interp = np.interp(f_b.seg_pos[inside], f_a.seg_pos[va], f_a.phase[i, va])
            diffs.extend(interp - f_b.phase[i, inside])
        diffs = np.asarray(diffs)
        assert len(diffs) > 100
        # Allow one global 2*pi branch difference between the two runs.
        diffs -= 2 * np.pi * np.round(np.median(diffs) / (2 * np.pi))
        assert np.percentile(np.abs(diffs - np.median(diffs)), 90) < 0.1

    def test_too_many_undetected_cells_raises(self, gauss_kernel):
        params = lm.LatticeParams(extent_dt=BP * 40, extent_ct=TP * 8,
                                  defect_rate=0.0, rng_seed=5)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, gauss_kernel).render(ch.ac_demag_pattern(lat, 1.0, seed=1))
        noise = np.random.default_rng(0).normal(0, 10 * np.abs(img.data).max(), img.data.shape)
        bad = ch.ReadbackImage(img.data + noise, 2.0, 2.0, img.origin_x, img.origin_y)
        with pytest.raises(lm.LatticeNotDetectedError):
            lm.extract_phase_fields(bad, 750.0)


def _constant_field(direction, pitch, n_lines, n_segments, span):
    k = 2 * np.pi / pitch
    seg_pos = np.linspace(span * 0.05, span * 0.95, n_segments)
    line_pos = np.linspace(0.0, 100.0, n_lines)
    shape = (n_lines, n_segments)
    return lm.PhaseField(
        direction, line_pos, seg_pos,
        amplitude=np.ones(shape), wavevector=np.full(shape, k),
        phase=np.broadcast_to(k * seg_pos, shape).copy(),
        valid=np.ones(shape, bool), axis_lo=0.0, axis_hi=span,
    )


class TestIslandLocations:
    def test_constant_fields_exact_pitch_spacing(self):
        fdt = _constant_field("DT", BP, 40, 6, 600.0)
        fct = _constant_field("CT", TP, 6, 4, 110.0)
        # CT field lines sit along x; swap roles accordingly.
        fct = lm.PhaseField(
            "CT", fdt.seg_pos[:4], np.linspace(5, 105, 5),
            amplitude=np.ones((4, 5)), wavevector=np.full((4, 5), 2 * np.pi / TP),
            phase=np.broadcast_to(2 * np.pi / TP * np.linspace(5, 105, 5), (4, 5)).copy(),
            valid=np.ones((4, 5), bool), axis_lo=0.0, axis_hi=110.0,
        )
        locs = lm.island_locations(fdt, fct)
        xs = np.unique(np.round(locs[:, 0], 6))
        ys = np.unique(np.round(locs[:, 1], 6))
        assert np.allclose(np.diff(xs), BP, atol=1e-9)
        assert np.allclose(np.diff(ys), TP, atol=1e-9)

    def test_perfect_lattice_rms(self, exp_kernel):
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  sigma_pos_dt=0.0, sigma_pos_ct=0.0,
                                  defect_rate=0.0, rng_seed=5)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(ch.ac_demag_pattern(lat, 1.0, seed=6))
        locs = lm.island_locations(*lm.extract_phase_fields(img, 750.0))
        d = nearest_distances(locs, np.column_stack([lat.x, lat.y]))
        assert np.sqrt(np.mean(d**2)) < 0.5

    def test_count_within_boundary_ambiguity(self, exp_kernel):
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  sigma_pos_dt=0.0, sigma_pos_ct=0.0,
                                  defect_rate=0.0, rng_seed=5)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(ch.ac_demag_pattern(lat, 1.0, seed=6))
        locs = lm.island_locations(*lm.extract_phase_fields(img, 750.0))
        n_rows, n_cols = lat.n_rows, lat.n_cols
        assert n_rows * n_cols <= len(locs) <= (n_rows + 2) * (n_cols + 2)

    def test_noisy_position_recovery_under_1nm(self, exp_kernel):
        # Invariant: read SNR >= 20 dB, >= 1e3 islands, RMS < 1 nm.
        params = lm.LatticeParams(extent_dt=BP * 120, extent_ct=TP * 12,
                                  defect_rate=0.0, rng_seed=6)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(
            ch.ac_demag_pattern(lat, 1.0, seed=6), ch.NoiseParams(None, 22.0, rng_seed=7)
        )
        locs = lm.island_locations(*lm.extract_phase_fields(img, 750.0))
        grid = np.column_stack([lat.nominal_x(), lat.nominal_y()])
        assert len(grid) >= 1000
        d = nearest_distances(locs, grid)
        assert np.sqrt(np.mean(d**2)) < 1.0

    def test_translation_equivariance(self, exp_kernel):
        params = lm.LatticeParams(extent_dt=BP * 60, extent_ct=TP * 10,
                                  sigma_pos_dt=0.0, sigma_pos_ct=0.0,
                                  defect_rate=0.0, rng_seed=5)
        lat = lm.generate_lattice(params)
        img = ch.Renderer(lat, exp_kernel).render(ch.ac_demag_pattern(lat, 1.0, seed=6))
        shift = (4.3, -2.7)
        shifted = ch.ReadbackImage(
            img.data, img.pixel_pitch_x, img.pixel_pitch_y,
            img.origin_x + shift[0], img.origin_y + shift[1],
        )
        a = lm.island_locations(*lm.extract_phase_fields(img, 750.0))
        b = lm.island_locations(*lm.extract_phase_fields(shifted, 750.0))
        assert len(a) == len(b)
        from scipy.spatial import cKDTree

        d, idx = cKDTree(b).query(a + np.asarray(shift))
        assert len(np.unique(idx)) == len(a)
        assert d.max() < 0.3
