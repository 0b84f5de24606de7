"""
doawave — Gradient Check Tests
"""

import math

import numpy as np
import pytest

from conftest import make_record
from errors import BeamformerError
from models import BeamformerKind, DoaMethod, StftConfig
from services.beamform import directional_power
from services.dual import DualReal
from services.geometry import steering_tensor, steering_tensor_derivative
from services.gradcheck import (
    ChainProblem,
    central_difference,
    chain_loss,
    descend_doa,
    directional_power_dual,
    grad_analytic,
    grad_fd,
    relative_error,
    step_sweep,
)
from services.metrics import permutation_min_doa_error
from services.signals import MultichannelSpectrogram, stft

CFG = StftConfig(fft_size=256, hop=64)


def make_problem(record, kind=BeamformerKind.LCMP, kappa=0.5):
    spec = stft(record.mixture, CFG)
    refs = np.stack([stft(r, CFG).data[:, 1, :] for r in record.references])
    return ChainProblem(spec=spec, references=refs, geometry=record.scenario.geometry, kind=kind, kappa=kappa)


@pytest.fixture(scope="module")
def record():
    return make_record([60.0, 170.0], max_order=0, duration_s=0.5, seed=7)


@pytest.fixture(scope="module")
def lcmp_problem(record):
    return make_problem(record)


class TestChainLoss:
    def test_truth_beats_perturbed(self, record, lcmp_problem):
        truth = record.truth_doas
        at_truth = chain_loss(truth, lcmp_problem).value
        perturbed = chain_loss(np.mod(truth + math.radians(20.0), 2 * math.pi), lcmp_problem).value
        assert at_truth < perturbed

    def test_assignment_resolved_and_frozen(self, record, lcmp_problem):
        swapped = record.truth_doas[::-1].copy()
        loss = chain_loss(swapped, lcmp_problem)
        assert loss.assignment == (1, 0)
        frozen = chain_loss(swapped, lcmp_problem, assignment=(0, 1))
        assert frozen.value >= loss.value

    def test_lcmp_has_no_kink(self, record, lcmp_problem):
        assert not chain_loss(record.truth_doas, lcmp_problem).near_kink()

    def test_collision_rejected(self, lcmp_problem):
        with pytest.raises(BeamformerError):
            chain_loss(np.array([1.0, 1.0]), lcmp_problem)

    def test_angle_count_checked(self, lcmp_problem):
        with pytest.raises(ValueError):
            chain_loss(np.array([1.0]), lcmp_problem)


class TestGradients:
    def test_lcmp_analytic_matches_finite_difference(self, record, lcmp_problem):
        for offsets in ([7.0, -11.0], [-13.0, 5.0], [12.0, 9.0]):
            theta = np.mod(record.truth_doas + np.radians(offsets), 2 * math.pi)
            assignment = chain_loss(theta, lcmp_problem).assignment
            analytic = grad_analytic(theta, lcmp_problem, assignment)
            numeric = grad_fd(theta, lcmp_problem, assignment)
            assert relative_error(analytic, numeric).max() <= 1e-4

    @pytest.mark.parametrize("kind", [BeamformerKind.MVDR, BeamformerKind.MVDR_REF])
    def test_mask_chain_matches_finite_difference(self, record, kind):
        problem = make_problem(record, kind)
        theta = np.mod(record.truth_doas + np.radians([4.0, -3.0]), 2 * math.pi)
        loss = chain_loss(theta, problem)
        if loss.near_kink():
            pytest.skip("draw lands on a mask kink")
        analytic = grad_analytic(theta, problem, loss.assignment)
        numeric = grad_fd(theta, problem, loss.assignment, h=1e-7)
        assert relative_error(analytic, numeric).max() <= 1e-3

    def test_step_sweep_reports_each_step(self, record, lcmp_problem):
        theta = np.mod(record.truth_doas + np.radians([5.0, -5.0]), 2 * math.pi)
        sweep = step_sweep(theta, lcmp_problem)
        assert set(sweep) == {1e-3, 1e-4, 1e-5}
        # truncation error dominates at the largest step
        assert sweep[1e-3] > sweep[1e-5]

    def test_central_difference(self):
        grad = central_difference(lambda t: float(np.sum(np.sin(t))), np.array([0.2, 1.0]))
        np.testing.assert_allclose(grad, np.cos([0.2, 1.0]), atol=1e-9)
        with pytest.raises(ValueError):
            central_difference(lambda t: 0.0, np.array([0.0]), h=0.0)

    def test_relative_error(self):
        np.testing.assert_allclose(relative_error([1.0, 0.0], [1.1, 0.0]), [0.1 / 1.1, 0.0])


class TestDirectionalPowerOracle:
    def test_matches_closed_form(self, geom, rng):
        y = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        theta, f = 0.9, 1800.0
        got = directional_power_dual(geom, DualReal(theta, 1.0), f, y)

        d = steering_tensor(geom, [theta], [f])[0, :, 0]
        dd = steering_tensor_derivative(geom, [theta], [f])[0, :, 0]
        inner = np.vdot(d, y)
        closed = 2.0 * np.real(np.conj(inner) * np.vdot(dd, y))
        assert got.value == pytest.approx(abs(inner) ** 2)
        assert got.deriv == pytest.approx(closed, rel=1e-9)

    def test_agrees_with_array_directional_power(self, geom, rng, stft_cfg):
        data = rng.standard_normal((1, 6, stft_cfg.n_bins)) + 1j * rng.standard_normal((1, 6, stft_cfg.n_bins))
        spec = MultichannelSpectrogram(data, stft_cfg)
        f = 40
        a = directional_power(spec, geom, [2.0])[0, 0, f]
        assert directional_power_dual(geom, DualReal(2.0), spec.freqs[f], data[0, :, f]).value == pytest.approx(a)


class TestDescent:
    def test_recovers_from_ten_degree_offset(self, record, lcmp_problem):
        init = np.mod(record.truth_doas + math.radians(10.0), 2 * math.pi)
        trace = descend_doa(init, lcmp_problem, steps=200, lr=1e-2)
        assert all(b <= a for a, b in zip(trace.losses, trace.losses[1:]))
        assert permutation_min_doa_error(trace.estimate.thetas, record.truth_doas).mean_error_deg < 2.0

    def test_stationary_at_truth(self, record, lcmp_problem):
        trace = descend_doa(record.truth_doas, lcmp_problem, steps=50, lr=1e-2)
        assert permutation_min_doa_error(trace.estimate.thetas, record.truth_doas).mean_error_deg < 0.5
        assert trace.steps <= 50

    def test_estimate_tagged_with_starting_method(self, record, lcmp_problem):
        assert descend_doa(record.truth_doas, lcmp_problem, steps=2).estimate.method == DoaMethod.ORACLE
        trace = descend_doa(record.truth_doas, lcmp_problem, steps=2, method=DoaMethod.SRP)
        assert trace.estimate.method == DoaMethod.SRP
