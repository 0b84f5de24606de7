"""
doawave — Direction-of-Arrival Tests
"""

import math

import numpy as np
import pytest

from conftest import make_record
from errors import DoaError, GridError
from models import DoaConfig, DoaMethod, StftConfig, TopsReference
from services.doa import (
    DoaEstimate,
    DoaPosterior,
    SpatialSpectrum,
    angular_grid,
    estimate_doa,
    expected_doa,
    music_spectrum,
    pick_peaks,
    posterior_entropy_bits,
    posterior_from_spectrum,
    srp_spectrum,
    tops_spectrum,
)
from services.metrics import cyclic_error_deg, permutation_min_doa_error
from services.signals import MultichannelSpectrogram, stft


def spectrum_from(scores, gamma=10.0, method=DoaMethod.SRP) -> SpatialSpectrum:
    return SpatialSpectrum(angular_grid(gamma), np.asarray(scores, dtype=float), method)


def bump(grid, center_deg, width_deg=6.0, height=1.0):
    d = np.abs(grid.classes_deg - center_deg) % 360.0
    d = np.minimum(d, 360.0 - d)
    return height * np.exp(-0.5 * (d / width_deg) ** 2)


@pytest.fixture(scope="module")
def single_source_spec():
    # 63 degrees is the centre of a 5-degree class
    record = make_record([63.0], max_order=0, duration_s=1.0, seed=3)
    return stft(record.mixture, StftConfig()), record


@pytest.fixture(scope="module")
def two_source_spec():
    record = make_record([48.0, 128.0], max_order=0, duration_s=1.0, seed=4)
    return stft(record.mixture, StftConfig()), record


class TestAngularGrid:
    def test_ten_degree_grid(self):
        grid = angular_grid(10.0)
        assert grid.size == 36
        assert grid.classes_deg[0] == pytest.approx(5.5)
        assert grid.classes_deg[-1] == pytest.approx(355.5)

    def test_one_degree_grid(self):
        grid = angular_grid(1.0)
        assert grid.size == 360
        assert grid.classes_deg[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("gamma", [0.0, -5.0, 150.0])
    def test_rejected_resolutions(self, gamma):
        with pytest.raises(GridError):
            angular_grid(gamma)


class TestExpectedDoa:
    def test_uniform_posterior(self):
        grid = angular_grid(10.0)
        post = DoaPosterior(np.full((1, grid.size), 1.0 / grid.size))
        est = expected_doa(post, grid)
        assert math.degrees(est.thetas[0]) == pytest.approx(180.5)
        assert est.interpolated

    def test_one_hot_gives_class_center(self):
        grid = angular_grid(5.0)
        probs = np.zeros((2, grid.size))
        probs[0, 3] = probs[1, 40] = 1.0
        est = expected_doa(DoaPosterior(probs), grid)
        np.testing.assert_allclose(est.thetas, grid.classes[[3, 40]])

    def test_linear_in_posterior(self, rng):
        grid = angular_grid(10.0)
        p = rng.dirichlet(np.ones(grid.size), size=1)
        q = rng.dirichlet(np.ones(grid.size), size=1)
        mixed = expected_doa(DoaPosterior(0.3 * p + 0.7 * q), grid).thetas
        separate = 0.3 * expected_doa(DoaPosterior(p), grid).thetas + 0.7 * expected_doa(DoaPosterior(q), grid).thetas
        np.testing.assert_allclose(mixed, separate)

    def test_circular_mean_across_the_seam(self):
        grid = angular_grid(10.0)
        probs = np.zeros((1, grid.size))
        probs[0, 0] = probs[0, -1] = 0.5  # 5.5 and 355.5 degrees
        plain = expected_doa(DoaPosterior(probs), grid)
        circular = expected_doa(DoaPosterior(probs), grid, circular=True)
        assert math.degrees(plain.thetas[0]) == pytest.approx(180.5)
        assert cyclic_error_deg(circular.thetas[0], 0.0) == pytest.approx(0.5, abs=1e-9)

    @pytest.mark.parametrize("anchor", [0, -1])
    def test_anchored_mean_unwraps_the_seam(self, anchor):
        grid = angular_grid(10.0)
        probs = np.zeros((1, grid.size))
        probs[0, 0] = probs[0, -1] = 0.5
        est = expected_doa(DoaPosterior(probs), grid, anchors=grid.classes[[anchor]])
        assert math.degrees(est.thetas[0]) == pytest.approx(0.5, abs=1e-9)

    def test_anchored_mean_matches_plain_away_from_the_seam(self, rng):
        grid = angular_grid(10.0)
        probs = np.zeros((1, grid.size))
        probs[0, 15:20] = rng.dirichlet(np.ones(5))
        plain = expected_doa(DoaPosterior(probs), grid).thetas
        anchored = expected_doa(DoaPosterior(probs), grid, anchors=grid.classes[[17]]).thetas
        np.testing.assert_allclose(anchored, plain, atol=1e-12)


class TestPosterior:
    def test_cold_temperature_is_one_hot(self):
        grid = angular_grid(10.0)
        spectrum = spectrum_from(bump(grid, 95.5), 10.0)
        peaks = pick_peaks(spectrum, 1)
        post = posterior_from_spectrum(spectrum, peaks, window_deg=20.0, temperature=1e-4)
        assert post.probs[0, peaks.class_indices[0]] == pytest.approx(1.0)
        assert expected_doa(post, grid).thetas[0] == pytest.approx(grid.classes[peaks.class_indices[0]])

    def test_symmetric_spectrum_interpolates_between_classes(self):
        grid = angular_grid(10.0)
        scores = np.zeros(grid.size)
        scores[[9, 10]] = 1.0  # 95.5 and 105.5 straddle 100.5
        spectrum = spectrum_from(scores, 10.0)
        peaks = pick_peaks(spectrum, 1)
        post = posterior_from_spectrum(spectrum, peaks, window_deg=20.0, temperature=0.01)
        theta = math.degrees(expected_doa(post, grid).thetas[0])
        assert 95.5 < theta < 105.5
        assert theta == pytest.approx(100.5, abs=1e-6)

    def test_support_limited_to_window(self):
        grid = angular_grid(10.0)
        spectrum = spectrum_from(bump(grid, 45.5) + bump(grid, 225.5), 10.0)
        peaks = pick_peaks(spectrum, 2)
        post = posterior_from_spectrum(spectrum, peaks, window_deg=20.0)
        for row, idx in zip(post.probs, peaks.class_indices):
            far = np.degrees(np.abs(grid.classes - grid.classes[idx])) > 21.0
            assert np.all(row[far] == 0.0)
            assert row.sum() == pytest.approx(1.0)

    def test_entropy(self):
        assert posterior_entropy_bits(DoaPosterior(np.array([[1.0, 0.0, 0.0, 0.0]]))) == 0.0
        assert posterior_entropy_bits(DoaPosterior(np.full((1, 4), 0.25))) == pytest.approx(2.0)


class TestPeakPicking:
    def test_two_clear_peaks(self):
        grid = angular_grid(5.0)
        spectrum = spectrum_from(bump(grid, 43.0) + bump(grid, 203.0, height=0.8), 5.0)
        est = pick_peaks(spectrum, 2)
        np.testing.assert_allclose(est.thetas_deg, [43.0, 203.0])
        assert not est.fallback

    def test_exclusion_zone(self):
        grid = angular_grid(5.0)
        # 93 and 98 tie; 98 sits inside the exclusion zone of 93
        scores = np.zeros(grid.size)
        scores[[18, 19]] = 1.0
        scores[52] = 0.5
        est = pick_peaks(spectrum_from(scores, 5.0), 2, min_separation_deg=10.0)
        assert est.thetas_deg[0] == pytest.approx(93.0)
        assert est.thetas_deg[1] == pytest.approx(263.0)
        assert cyclic_error_deg(est.thetas[1], est.thetas[0]) >= 10.0

    def test_ties_go_to_lowest_index(self):
        grid = angular_grid(10.0)
        scores = np.zeros(grid.size)
        scores[[4, 20]] = 1.0
        est = pick_peaks(spectrum_from(scores), 1)
        assert est.class_indices == (4,)

    def test_flat_spectrum_picks_distinct_classes(self):
        est = pick_peaks(spectrum_from(np.ones(36)), 2, min_separation_deg=10.0)
        assert len(est.class_indices) == 2
        assert len(set(est.class_indices)) == 2

    def test_single_peak_for_two_sources_sets_fallback(self):
        grid = angular_grid(10.0)
        est = pick_peaks(spectrum_from(bump(grid, 185.5, 30.0)), 2, min_separation_deg=10.0)
        assert est.fallback
        assert len(est.class_indices) == 2
        assert cyclic_error_deg(est.thetas[0], est.thetas[1]) >= 10.0

    def test_needs_a_source(self):
        with pytest.raises(DoaError):
            pick_peaks(spectrum_from(np.ones(36)), 0)


class TestSpectra:
    def test_srp_single_source(self, geom, single_source_spec):
        spec, record = single_source_spec
        spectrum = srp_spectrum(spec, geom, angular_grid(5.0), band_hz=(300.0, 4000.0))
        best = spectrum.grid.classes[int(np.argmax(spectrum.scores))]
        assert cyclic_error_deg(best, record.truth_doas[0]) <= 5.0

    def test_srp_spatially_white_is_flat(self, geom, rng, stft_cfg):
        phases = rng.uniform(0, 2 * np.pi, (60, 6, stft_cfg.n_bins))
        spec = MultichannelSpectrogram(np.exp(1j * phases), stft_cfg)
        scores = srp_spectrum(spec, geom, angular_grid(5.0)).scores
        assert scores.max() / scores.min() < 1.5

    def test_music_single_source(self, geom, single_source_spec):
        spec, record = single_source_spec
        spectrum = music_spectrum(spec, geom, angular_grid(5.0), n_sources=1)
        est = pick_peaks(spectrum, 1)
        assert cyclic_error_deg(est.thetas[0], record.truth_doas[0]) <= 5.0

    def test_music_two_sources(self, geom, two_source_spec):
        spec, record = two_source_spec
        est = pick_peaks(music_spectrum(spec, geom, angular_grid(5.0), n_sources=2), 2)
        err = permutation_min_doa_error(est.thetas, record.truth_doas)
        assert max(err.errors_deg) <= 5.0

    @pytest.mark.parametrize("reference", list(TopsReference))
    def test_tops_single_source(self, geom, single_source_spec, reference):
        spec, record = single_source_spec
        spectrum = tops_spectrum(spec, geom, angular_grid(5.0), n_sources=1, reference=reference)
        est = pick_peaks(spectrum, 1)
        assert cyclic_error_deg(est.thetas[0], record.truth_doas[0]) <= 5.0
        assert spectrum.meta["reference_hz"] > 0

    def test_subspace_methods_need_fewer_sources_than_mics(self, geom, single_source_spec):
        spec, _ = single_source_spec
        with pytest.raises(DoaError):
            music_spectrum(spec, geom, angular_grid(5.0), n_sources=6)

    def test_tops_needs_two_bins(self, geom, single_source_spec):
        spec, _ = single_source_spec
        with pytest.raises(DoaError):
            tops_spectrum(spec, geom, angular_grid(5.0), 1, band_hz=(1000.0, 1010.0))

    def test_single_channel_rejected(self, geom, single_source_spec):
        spec, _ = single_source_spec
        with pytest.raises(DoaError):
            srp_spectrum(spec.channel(0), geom, angular_grid(5.0))


class TestEstimateDoa:
    @pytest.mark.parametrize("method", [DoaMethod.SRP, DoaMethod.MUSIC, DoaMethod.TOPS])
    def test_grid_quantization_bound(self, geom, single_source_spec, method):
        spec, record = single_source_spec
        _, peaks, posterior, interp = estimate_doa(spec, geom, method, 10.0, 1, DoaConfig())
        assert cyclic_error_deg(peaks.thetas[0], record.truth_doas[0]) <= 10.0
        assert posterior.probs.shape == (1, 36)
        assert isinstance(interp, DoaEstimate) and interp.interpolated
        assert interp.method == method

    @pytest.mark.parametrize("truth_deg", [3.0, 357.0])
    def test_posterior_estimate_near_the_seam(self, geom, truth_deg):
        record = make_record([truth_deg], max_order=0, duration_s=1.0, seed=3)
        spec = stft(record.mixture, StftConfig())
        _, peaks, _, interp = estimate_doa(spec, geom, DoaMethod.SRP, 10.0, 1, DoaConfig())
        truth = record.truth_doas[0]
        assert cyclic_error_deg(peaks.thetas[0], truth) <= 5.0
        assert cyclic_error_deg(interp.thetas[0], truth) < 5.0
        assert 0.0 <= interp.thetas[0] < 2 * math.pi

    def test_oracle_has_no_spectrum(self, geom, single_source_spec):
        spec, _ = single_source_spec
        with pytest.raises(DoaError):
            estimate_doa(spec, geom, DoaMethod.ORACLE, 10.0, 1)
