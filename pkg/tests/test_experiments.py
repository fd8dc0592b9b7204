import dataclasses
import math

import numpy as np
import pytest
from scipy import integrate

from nucspin_lab.experiments import (STATE_B_DELAY, TARGETS, ApparatusParams, LatticeParams,
                                     NegativeDephasingWarning, ValidationWarning,
                                     gamma_m_from, operation_budget, prepare_state, run_rabi,
                                     run_ramsey, run_state_prep_tomography, run_t1, run_t2,
                                     t2_relation, transport_displacement,
                                     transport_peak_velocity, transport_profile)
from nucspin_lab.readout import IDEAL_READOUT, CavityParams, ReadoutParams, click_probabilities
from nucspin_lab.spin import DensityMatrix, RelaxationParams, trace_distance

DEFAULT = ApparatusParams()
IDEAL = dataclasses.replace(DEFAULT, readout=IDEAL_READOUT)
OMEGA = DEFAULT.rabi_freq
LARMOR = DEFAULT.relax.larmor


def rabi_grid(periods=2, points=20):
    return np.linspace(0, periods * 2 * math.pi / OMEGA, points, endpoint=False)


class TestParams:
    def test_defaults(self):
        assert DEFAULT.rabi_freq == pytest.approx(math.pi / (2 * 3.2e-3))
        assert DEFAULT.relax.gamma_p == 2.0 and DEFAULT.relax.gamma_m == 8.0

    def test_validation_warning_when_splitting_too_small(self):
        assert DEFAULT.validate() == []
        small = dataclasses.replace(DEFAULT, delta_e=2 * math.pi * 5e6)
        with pytest.warns(ValidationWarning):
            assert small.validate()

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            ApparatusParams(atom_lifetime=0)
        with pytest.raises(ValueError):
            LatticeParams(wavelength=-1)


class TestRabi:
    def test_analytic_curve(self):
        t = rabi_grid()
        run = run_rabi(DEFAULT, t, None)
        expected = click_probabilities(np.cos(OMEGA * t / 2) ** 2, DEFAULT.readout)
        assert np.allclose(run.columns["click_probability"], expected, atol=1e-9)
        assert run.mode == "analytic"

    def test_ideal_sampled_tracks_cos_squared(self):
        t = rabi_grid()
        run = run_rabi(IDEAL, t, 500, seed=3)
        p = np.cos(OMEGA * t / 2) ** 2
        sd = np.sqrt(np.maximum(p * (1 - p), 1e-4) / 500)
        assert np.all(np.abs(run.columns["click_fraction"] - p) <= 3 * sd + 1e-12)

    def test_visibility_with_assignment_error(self):
        run = run_rabi(DEFAULT, rabi_grid(), 500, seed=1)
        assert run.derived["visibility"] == pytest.approx(0.96, abs=0.02)
        assert run.derived["rabi_freq_fit"] == pytest.approx(OMEGA, rel=0.02)

    def test_two_atoms_fail_sinusoid_gate(self):
        one = run_rabi(IDEAL, rabi_grid(), None, n_atoms=1)
        two = run_rabi(IDEAL, rabi_grid(), None, n_atoms=2)
        p = np.cos(OMEGA * rabi_grid() / 2) ** 2
        assert np.allclose(two.columns["click_probability"], 1 - (1 - p) ** 2, atol=1e-12)
        assert two.derived["rms_residual"] >= 5 * max(one.derived["rms_residual"], 1e-6)

    def test_counts_bounded_and_reproducible(self):
        a = run_rabi(DEFAULT, rabi_grid(), 100, seed=9)
        b = run_rabi(DEFAULT, rabi_grid(), 100, seed=9)
        c = run_rabi(DEFAULT, rabi_grid(), 100, seed=10)
        assert np.array_equal(a.columns["clicks"], b.columns["clicks"])
        assert not np.array_equal(a.columns["clicks"], c.columns["clicks"])
        assert np.all(a.columns["clicks"] <= 100)

    def test_grid_point_streams_are_order_independent(self):
        t = rabi_grid()
        full = run_rabi(DEFAULT, t, 100, seed=2).columns["clicks"]
        head = run_rabi(DEFAULT, t[:5], 100, seed=2).columns["clicks"]
        assert np.array_equal(full[:5], head)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            run_rabi(DEFAULT, rabi_grid(), 0)
        with pytest.raises(ValueError):
            run_rabi(DEFAULT, [], 10)
        with pytest.raises(ValueError):
            run_rabi(DEFAULT, rabi_grid(), 10, n_atoms=3)


class TestRamsey:
    def delays(self, periods=3, points=37):
        return np.linspace(0, periods * 2 * math.pi / LARMOR, points, endpoint=False)

    def test_ideal_analytic_fringe(self):
        params = dataclasses.replace(IDEAL, relax=RelaxationParams.ideal(larmor=LARMOR))
        d = self.delays()
        run = run_ramsey(params, d, None)
        assert np.allclose(run.columns["p_down"], (1 - np.cos(LARMOR * d)) / 2, atol=1e-9)
        assert run.columns["p_down"][0] == pytest.approx(0.0, abs=1e-10)

    def test_published_visibility(self):
        params = dataclasses.replace(DEFAULT, readout=ReadoutParams(eps_up=0.005))
        runs = [run_ramsey(params, self.delays(), 1000, seed=s).derived for s in range(20)]
        # dephasing inside the 1.2 ms window pulls single runs slightly low
        assert np.median([r["visibility"] for r in runs]) == pytest.approx(0.99, abs=0.01)
        for r in runs:
            assert r["fringe_frequency"] == pytest.approx(2.5e3, rel=0.005)


class TestTomography:
    def test_state_b_is_quarter_larmor_turn(self):
        rho = prepare_state(DEFAULT, "b")
        target = TARGETS["b"]
        ideal = DensityMatrix.from_matrix(np.outer(target, target.conj()))
        # relaxation during the 0.1 ms delay is the only deviation
        assert trace_distance(rho, ideal) < 1e-3
        no_relax = dataclasses.replace(DEFAULT, relax=RelaxationParams.ideal(larmor=LARMOR))
        assert trace_distance(prepare_state(no_relax, "b"), ideal) < 1e-9
        assert LARMOR * STATE_B_DELAY == pytest.approx(math.pi / 2)

    def test_state_a_on_plus_x(self):
        assert np.allclose(prepare_state(DEFAULT, "a").bloch, [1, 0, 0], atol=1e-9)

    def test_state_c_ideal_pipeline(self):
        res = run_state_prep_tomography(IDEAL, "c", 10**5, seed=1, n_resamples=0)
        assert res.fidelity >= 0.999

    def test_unknown_state(self):
        with pytest.raises(ValueError):
            prepare_state(DEFAULT, "d")

    def test_reproducible(self):
        a = run_state_prep_tomography(DEFAULT, "a", 200, seed=5, n_resamples=20)
        b = run_state_prep_tomography(DEFAULT, "a", 200, seed=5, n_resamples=20)
        assert a.to_dict() == b.to_dict()


class TestT1:
    grid = np.linspace(0, 0.8, 21)

    def test_analytic_exact(self):
        t1, lifetime, run = run_t1(DEFAULT, self.grid, None)
        assert t1 == pytest.approx(0.5, rel=1e-6)
        assert lifetime == pytest.approx(0.44, rel=1e-6)

    def test_analytic_free_asymptote(self):
        t1, _, _ = run_t1(DEFAULT, self.grid, None, fixed_asymptote=False)
        assert t1 == pytest.approx(0.5, rel=1e-6)

    def test_lifetime_sampled(self):
        _, lifetime, run = run_t1(DEFAULT, self.grid, 300, seed=4)
        assert lifetime == pytest.approx(0.44, abs=0.04)

    def test_no_relaxation_unidentifiable(self):
        params = dataclasses.replace(DEFAULT, relax=RelaxationParams(gamma_p=0.0))
        t1, _, run = run_t1(params, self.grid, None)
        assert math.isnan(t1) and not run.derived["t1_identifiable"]

    def test_normalization_recovers_loss_free_population(self):
        _, _, run = run_t1(DEFAULT, self.grid, 500, seed=6)
        rp = DEFAULT.readout
        qd = click_probabilities(run.columns["p_down_down"], rp)
        qu = click_probabilities(run.columns["p_down_up"], rp)
        expected = qd / (qd + qu)
        n = run.columns["survival"] * 500 * (qd + qu)
        sd = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(run.columns["normalized_down"] - expected) <= 3 * sd)


class TestT2:
    traps = np.arange(11) * 0.02

    def test_analytic(self):
        t2, run = run_t2(DEFAULT, self.traps, None)
        assert t2 == pytest.approx(0.1, rel=1e-9)

    def test_dephasing_free_limit(self):
        params = dataclasses.replace(DEFAULT, relax=RelaxationParams(gamma_m=0.0))
        t2, _ = run_t2(params, self.traps, None)
        assert t2 == pytest.approx(0.5, rel=1e-9)

    def test_sampled(self):
        t2, run = run_t2(DEFAULT, self.traps, 500, seed=3)
        assert t2 == pytest.approx(0.0996, rel=0.1)
        assert len(run.derived["fringes"]) == self.traps.size

    def test_needs_larmor(self):
        params = dataclasses.replace(DEFAULT, relax=RelaxationParams(larmor=0.0))
        with pytest.raises(ValueError):
            run_t2(params, self.traps, None)


class TestRelations:
    def test_t2_relation(self):
        assert t2_relation(0.49, 8.0) == pytest.approx(0.0996, abs=5e-5)
        assert t2_relation(0.3, 0.0) == pytest.approx(0.3)
        with pytest.raises(ValueError):
            t2_relation(0.3, -1.0)

    def test_inverse(self):
        assert gamma_m_from(0.49, 0.10) == pytest.approx(7.959, abs=1e-3)
        with pytest.warns(NegativeDephasingWarning):
            assert gamma_m_from(0.1, 0.2) < 0

    def test_budget(self):
        assert operation_budget(0.10, 500e-6) == pytest.approx(200.0)
        assert operation_budget(0.5, 500e-6) == pytest.approx(1000.0)
        assert operation_budget(3.0, 3.0) == 1.0
        with pytest.raises(ValueError):
            operation_budget(0.0, 1.0)


class TestTransport:
    def test_endpoints(self):
        prof = transport_profile(LatticeParams())
        assert prof["position"][0] == 0.0
        assert prof["velocity"][0] == 0.0
        assert prof["velocity"][-1] == pytest.approx(0.0, abs=1e-15)
        assert prof["position"][-1] == pytest.approx(transport_displacement(LatticeParams()))

    def test_published_numbers(self):
        lat = LatticeParams()
        assert transport_displacement(lat) * 1e3 == pytest.approx(11.854, abs=1e-3)
        assert transport_peak_velocity(lat) == pytest.approx(0.1862, abs=1e-4)

    def test_closed_form_matches_quadrature(self):
        lat = LatticeParams()
        lam, d0, tau = lat.wavelength, lat.delta0, lat.tau_transport
        prof = transport_profile(lat, 11)
        for t, x in zip(prof["t"], prof["position"]):
            v = lambda s: 0.5 * lam * d0 * math.sin(math.pi * s / tau) / (2 * math.pi)
            ref, _ = integrate.quad(v, 0, t, epsabs=0, epsrel=1e-13)
            assert x == pytest.approx(ref, rel=1e-9, abs=1e-18)

    def test_points_checked(self):
        with pytest.raises(ValueError):
            transport_profile(LatticeParams(), 1)


def test_cavity_linewidth_used_by_validation():
    strong = dataclasses.replace(DEFAULT, cavity=CavityParams(g=2 * math.pi * 30e6))
    with pytest.warns(ValidationWarning):
        strong.validate()
