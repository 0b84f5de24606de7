"""
doawave — Beamforming Tests
"""

import numpy as np
import pytest

from errors import BeamformerError, MaskError
from models import BeamformerKind, StftConfig
from services.beamform import (
    LocalizationMask,
    SpatialCovariance,
    apply_beamformer,
    beamform_all,
    directional_power,
    ibm,
    ilm,
    input_scm,
    interference_scm,
    lcmp_weights,
    load_diagonal,
    localization_mask,
    masked_scm,
    mvdr_ref_weights,
    mvdr_weights,
    source_softmax,
    sparsify_mask,
)
from services.geometry import steering_tensor, steering_vector
from services.metrics import si_sdr
from services.signals import MultichannelSpectrogram, istft, stft


def random_spec(rng, t=200, m=6, cfg=StftConfig(fft_size=64, hop=16)):
    data = rng.standard_normal((t, m, cfg.n_bins)) + 1j * rng.standard_normal((t, m, cfg.n_bins))
    return MultichannelSpectrogram(data, cfg)


def random_psd(rng, f=5, m=6, rank=None):
    a = rng.standard_normal((f, m, rank or m)) + 1j * rng.standard_normal((f, m, rank or m))
    return a @ np.conj(np.swapaxes(a, -1, -2))


def is_hermitian(phi):
    diff = np.linalg.norm(phi - np.conj(np.swapaxes(phi, -1, -2)), axis=(-2, -1))
    return np.all(diff <= 1e-12 * np.linalg.norm(phi, axis=(-2, -1)))


class TestMasks:
    def test_softmax_sums_to_one(self, rng):
        nu = source_softmax(rng.standard_normal((3, 10, 7)) * 50)
        np.testing.assert_allclose(nu.sum(axis=0), 1.0)

    def test_softmax_needs_two_sources(self, rng):
        with pytest.raises(MaskError):
            source_softmax(rng.standard_normal((1, 4, 4)))

    def test_sparsify_range(self, rng):
        nu = source_softmax(rng.standard_normal((2, 30, 9)))
        mask = sparsify_mask(nu, 0.5).values
        assert np.all((mask >= 0.0) & (mask < 1.0 + 1e-12))
        assert np.all(mask.sum(axis=0) <= 1.0 + 1e-12)

    def test_two_source_supports_disjoint(self, rng):
        nu = source_softmax(rng.standard_normal((2, 30, 9)) * 3)
        for kappa in (0.5, 0.7):
            mask = sparsify_mask(nu, kappa).values
            assert not np.any((mask[0] > 0) & (mask[1] > 0))

    @pytest.mark.parametrize("kappa", [1.0, 1.5, -0.1])
    def test_kappa_out_of_range(self, rng, kappa):
        with pytest.raises(MaskError):
            sparsify_mask(np.full((2, 3, 3), 0.5), kappa)

    def test_mask_values_checked(self):
        with pytest.raises(MaskError):
            LocalizationMask(np.full((2, 3, 3), 1.5))

    def test_directional_power_matches_loop(self, rng, geom):
        spec = random_spec(rng, t=4)
        thetas = [0.3, 2.1]
        a = directional_power(spec, geom, thetas)
        f = 5
        d = steering_vector(geom, thetas[1], spec.freqs[f])
        assert a[1, 2, f] == pytest.approx(abs(np.vdot(d, spec.data[2, :, f])) ** 2)

    def test_ilm_is_localization_mask_at_truth(self, rng, geom):
        spec = random_spec(rng, t=8)
        truth = [0.5, 3.0]
        np.testing.assert_array_equal(ilm(spec, geom, truth).values,
                                      localization_mask(spec, geom, truth).values)

    def test_ibm_ties_to_lowest_index(self, stft_cfg):
        ones = np.ones((3, 2, stft_cfg.n_bins), dtype=complex)
        refs = [MultichannelSpectrogram(ones, stft_cfg), MultichannelSpectrogram(ones, stft_cfg)]
        mask = ibm(refs, ref_channel=1).values
        assert np.all(mask[0] == 1.0)
        assert np.all(mask[1] == 0.0)

    def test_ibm_picks_louder_source(self, stft_cfg):
        a = np.ones((3, 2, stft_cfg.n_bins), dtype=complex)
        b = a.copy()
        b[:, 1, 10] = 5.0
        mask = ibm([MultichannelSpectrogram(a, stft_cfg), MultichannelSpectrogram(b, stft_cfg)]).values
        assert np.all(mask[1, :, 10] == 1.0)
        assert np.all(mask[0, :, 10] == 0.0)

    def test_softmax_closed_form(self):
        a = np.array([np.log(4.0), 0.0])[:, None, None]
        np.testing.assert_allclose(source_softmax(a)[:, 0, 0], [0.8, 0.2], atol=1e-15)

    def test_sparsify_closed_form(self):
        mask = sparsify_mask(np.array([0.8, 0.2])[:, None, None], 0.5).values[:, 0, 0]
        assert mask[0] == pytest.approx(0.6, abs=1e-15)
        assert mask[1] == 0.0

    def test_softmax_then_sparsify_closed_form(self):
        a = np.array([np.log(4.0), 0.0])[:, None, None]
        mask = sparsify_mask(source_softmax(a), 0.5).values[:, 0, 0]
        assert mask[0] == pytest.approx(0.6, abs=1e-12)
        assert mask[1] == 0.0


class TestCovariance:
    def test_input_scm_matches_loop(self, rng):
        spec = random_spec(rng, t=200)
        phi = input_scm(spec).matrices
        f = 7
        brute = sum(np.outer(spec.data[t, :, f], np.conj(spec.data[t, :, f])) for t in range(200)) / 200
        np.testing.assert_allclose(phi[f], brute, atol=1e-12)
        assert is_hermitian(phi)
        assert np.linalg.eigvalsh(phi).min() >= -1e-9 * np.trace(phi[0]).real

    def test_masked_scm_matches_loop(self, rng):
        spec = random_spec(rng, t=50)
        mask = LocalizationMask(rng.uniform(0, 0.99, (2, 50, spec.n_bins)))
        scms = masked_scm(spec, mask)
        f, n = 3, 1
        l = mask.values[n, :, f]
        brute = sum(l[t] * np.outer(spec.data[t, :, f], np.conj(spec.data[t, :, f])) for t in range(50)) / l.sum()
        np.testing.assert_allclose(scms[n].matrices[f], brute, atol=1e-12)
        assert all(is_hermitian(s.matrices) for s in scms)

    def test_empty_mask_bin_falls_back(self, rng):
        spec = random_spec(rng, t=20)
        values = rng.uniform(0, 0.9, (2, 20, spec.n_bins))
        values[0, :, 4] = 0.0
        scms = masked_scm(spec, LocalizationMask(values))
        assert scms[0].fallback_bins == 1
        np.testing.assert_allclose(scms[0].matrices[4], input_scm(spec).matrices[4])

    def test_mask_shape_checked(self, rng):
        spec = random_spec(rng, t=20)
        with pytest.raises(MaskError):
            masked_scm(spec, LocalizationMask(np.zeros((2, 19, spec.n_bins))))

    def test_interference_is_sum_of_others(self, rng):
        scms = [SpatialCovariance(random_psd(rng)) for _ in range(3)]
        intf = interference_scm(scms, 1).matrices
        np.testing.assert_allclose(intf, scms[0].matrices + scms[2].matrices)
        with pytest.raises(BeamformerError):
            interference_scm(scms[:1], 0)

    def test_loading_keeps_silent_bins_invertible(self):
        phi = np.zeros((2, 3, 3), dtype=complex)
        loaded = load_diagonal(phi)
        assert np.all(np.linalg.eigvalsh(loaded) > 0)


class TestLcmp:
    def test_constraints_hold(self, rng, geom):
        freqs = np.array([0.0, 500.0, 1500.0, 3000.0])
        G = steering_tensor(geom, [0.4, 2.2], freqs)
        bw = lcmp_weights(SpatialCovariance(random_psd(rng, f=4)), G)
        assert bw.degenerate_bins == 1  # DC: every steering vector is all ones
        assert np.all(bw.weights[:, 0, :] == 0.0)
        for f in range(1, 4):
            response = np.conj(bw.weights[:, f, :]) @ G[f]  # (N, N): b_n^H g_k
            np.testing.assert_allclose(response, np.eye(2), atol=1e-8)

    def test_minimum_power_among_feasible_weights(self, rng, geom):
        freqs = np.array([1200.0])
        G = steering_tensor(geom, [0.4, 2.2], freqs)
        phi = random_psd(rng, f=1)
        b = lcmp_weights(SpatialCovariance(phi), G, delta=0.0).weights[0, 0]
        power = np.real(np.conj(b) @ phi[0] @ b)
        # feasible perturbations live in the null space of G^H
        _, _, vh = np.linalg.svd(np.conj(G[0]).T)
        null = np.conj(vh[2:]).T
        for _ in range(20):
            other = b + null @ (rng.standard_normal(4) + 1j * rng.standard_normal(4)) * 0.1
            np.testing.assert_allclose(np.conj(G[0]).T @ other, [1.0, 0.0], atol=1e-10)
            assert np.real(np.conj(other) @ phi[0] @ other) >= power - 1e-9

    def test_collision_rejected(self, rng, geom):
        G = steering_tensor(geom, [1.0, 1.0], [1000.0])
        with pytest.raises(BeamformerError):
            lcmp_weights(SpatialCovariance(random_psd(rng, f=1)), G, thetas=[1.0, 1.0])

    def test_single_source_selection(self, rng, geom):
        G = steering_tensor(geom, [0.4, 2.2], [1000.0, 2000.0])
        phi = SpatialCovariance(random_psd(rng, f=2))
        full = lcmp_weights(phi, G).weights
        np.testing.assert_allclose(lcmp_weights(phi, G, n=1).weights[0], full[1])

    def test_constraints_over_random_draws(self, rng, geom):
        worst = 0.0
        for _ in range(500):
            first = rng.uniform(0, 2 * np.pi)
            thetas = [first, first + rng.uniform(np.radians(20), np.radians(340))]
            G = steering_tensor(geom, thetas, rng.uniform(500.0, 7000.0, size=3))
            bw = lcmp_weights(SpatialCovariance(random_psd(rng, f=3, rank=8)), G, thetas=thetas)
            response = np.einsum("nfm,fmk->fnk", np.conj(bw.weights), G)
            worst = max(worst, float(np.abs(response - np.eye(2)).max()))
        assert worst <= 1e-8


class TestMvdr:
    def test_distortionless(self, rng, geom):
        freqs = np.array([400.0, 2500.0])
        d = steering_tensor(geom, [1.1], freqs)[:, :, 0]
        b = mvdr_weights(SpatialCovariance(random_psd(rng, f=2)), d).weights[0]
        np.testing.assert_allclose(np.einsum("fm,fm->f", np.conj(b), d), 1.0, atol=1e-10)

    def test_null_steering(self, geom):
        f = 2000.0
        d_target = steering_vector(geom, 0.5, f)
        d_intf = steering_vector(geom, 2.5, f)
        ratios = []
        for eps in (1e-2, 1e-4, 1e-6):
            phi = np.outer(d_intf, np.conj(d_intf)) + eps * np.eye(6)
            b = mvdr_weights(SpatialCovariance(phi[None]), d_target[None], delta=0.0).weights[0, 0]
            ratios.append(abs(np.vdot(b, d_intf)) ** 2 / abs(np.vdot(b, d_target)) ** 2)
        assert ratios[0] > ratios[1] > ratios[2]
        assert ratios[2] < 1e-8

    def test_mvdr_ref_matches_matrix_formula(self, rng):
        phi_i, phi_n = random_psd(rng, f=3), random_psd(rng, f=3, rank=1)
        b = mvdr_ref_weights(SpatialCovariance(phi_i), SpatialCovariance(phi_n), ref_index=1, delta=0.0).weights[0]
        for f in range(3):
            ratio = np.linalg.inv(phi_i[f]) @ phi_n[f]
            np.testing.assert_allclose(b[f], ratio[:, 1] / np.trace(ratio), rtol=1e-8, atol=1e-10)

    def test_mvdr_ref_degenerate(self):
        zero = np.zeros((1, 3, 3), dtype=complex)
        with pytest.raises(BeamformerError):
            mvdr_ref_weights(SpatialCovariance(np.eye(3)[None].astype(complex)), SpatialCovariance(zero))

    def test_distortionless_over_random_draws(self, rng, geom):
        worst = 0.0
        for _ in range(500):
            d = steering_tensor(geom, [rng.uniform(0, 2 * np.pi)], rng.uniform(100.0, 7900.0, size=3))[:, :, 0]
            b = mvdr_weights(SpatialCovariance(random_psd(rng, f=3, rank=8)), d).weights[0]
            worst = max(worst, float(np.abs(np.einsum("fm,fm->f", np.conj(d), b) - 1.0).max()))
        assert worst <= 1e-8

    def test_mvdr_ref_over_random_draws(self, rng):
        for _ in range(500):
            phi_i, phi_n = random_psd(rng, f=3, rank=8), random_psd(rng, f=3, rank=1)
            b = mvdr_ref_weights(SpatialCovariance(phi_i), SpatialCovariance(phi_n), ref_index=1, delta=0.0).weights[0]
            for f in range(3):
                ratio = np.linalg.inv(phi_i[f]) @ phi_n[f]
                np.testing.assert_allclose(b[f], ratio[:, 1] / np.trace(ratio), rtol=1e-8, atol=1e-10)


class TestApply:
    def test_output_matches_inner_product(self, rng, geom):
        spec = random_spec(rng, t=5)
        bw, _ = beamform_all(spec, geom, BeamformerKind.LCMP, [0.3, 2.0])
        out = apply_beamformer(spec, bw)
        assert len(out) == 2
        t, f = 2, 9
        assert out[1].data[t, 0, f] == pytest.approx(np.vdot(bw.weights[1, f], spec.data[t, :, f]))

    def test_shape_mismatch(self, rng, geom):
        spec = random_spec(rng, t=5)
        bw, _ = beamform_all(spec, geom, BeamformerKind.LCMP, [0.3, 2.0])
        other = random_spec(rng, t=5, m=4)
        with pytest.raises(BeamformerError):
            apply_beamformer(other, bw)

    def test_mask_required_for_mvdr(self, rng, geom):
        spec = random_spec(rng, t=5)
        with pytest.raises(MaskError):
            beamform_all(spec, geom, BeamformerKind.MVDR, [0.3, 2.0])

    def test_lcmp_passes_the_target_unchanged(self, rng, geom):
        cfg = StftConfig(fft_size=64, hop=16)
        s = rng.standard_normal((40, cfg.n_bins)) + 1j * rng.standard_normal((40, cfg.n_bins))
        freqs = np.arange(cfg.n_bins) * 16000 / cfg.fft_size
        G = steering_tensor(geom, [0.4, 2.2], freqs)
        spec = MultichannelSpectrogram(s[:, None, :] * G[:, :, 0].T[None], cfg)
        bw = lcmp_weights(SpatialCovariance(random_psd(rng, f=cfg.n_bins)), G)
        target, other = apply_beamformer(spec, bw)
        scale = np.abs(s).max()
        np.testing.assert_allclose(target.data[:, 0, 1:], s[:, 1:], atol=1e-8 * scale)
        assert np.abs(other.data[:, 0, 1:]).max() <= 1e-8 * scale
        assert np.all(target.data[:, 0, 0] == 0.0)  # DC is degenerate

    def test_mvdr_beats_mixture_with_oracle_doas(self, geom, anechoic_pair):
        record = anechoic_pair
        cfg = StftConfig()
        spec = stft(record.mixture, cfg)
        mask = ilm(spec, geom, record.truth_doas)
        bw, diag = beamform_all(spec, geom, BeamformerKind.MVDR, record.truth_doas, mask)
        assert diag["degenerate_bins"] == 0
        outs = apply_beamformer(spec, bw)
        d_ref = steering_tensor(geom, record.truth_doas, spec.freqs)[:, 1, :]
        for n, out in enumerate(outs):
            moved = MultichannelSpectrogram(out.data * d_ref[:, n][None, None, :], cfg)
            est = istft(moved, record.mixture.n_samples).channels[0]
            ref = record.references[n].channels[1]
            assert si_sdr(est, ref) > si_sdr(record.mixture.channels[1], ref)
