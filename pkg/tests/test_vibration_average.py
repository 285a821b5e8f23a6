"""Tests for nvcavity's vibration_average module"""

from dataclasses import replace

import numpy as np

from scipy.integrate import quad

from nvcavity.constants import FWHM_PER_SIGMA
from nvcavity.core import ValidationError
from nvcavity.emitter_purcell import collectable_zpl_fraction, decay_rate, detuned_purcell, lorentzian_transmission
from nvcavity.inference import synth_timestamps
from nvcavity.vibration_average import (CryostatPhaseProfile, EnsembleShape, EnsembleSpec, Quadrature, VibrationSpec, broadened_lineshape, f_vib, fwhm,
                                        length_nodes, monte_carlo_counts, monte_carlo_lineshape, offresonant_sweep, phase_forward_model, phase_resolved_stats,
                                        resonant_sweep, vibration_linewidth)

from .base import ModelTestCase


class TestQuadrature(ModelTestCase):
    """Tests for the length-averaging nodes"""

    def test_nodes(self):
        x, w = length_nodes(0.0, 0.0175, VibrationSpec(0.0))
        self.assertEqual([0.0], list(x))
        self.assertEqual([1.0], list(w))

        for sigma in (0.01, 0.2):
            x, w = length_nodes(sigma, 0.0175, VibrationSpec(sigma))
            self.assertAlmostEqual(1.0, w.sum(), places=12)
            self.assertAlmostEqual(sigma ** 2, np.sum(w * x ** 2), delta=1e-3 * sigma ** 2)

    def test_density(self):
        self.assertAlmostEqual(1.0, quad(lambda x: f_vib(x, 0.18), -np.inf, np.inf)[0], places=8)
        with self.assertRaises(ValidationError):
            f_vib(0.0, 0.0)
        with self.assertRaises(ValidationError):
            VibrationSpec(-0.1)


class TestLineshape(ModelTestCase):
    """Tests for the vibration-broadened cavity line"""

    def test_zero_sigma(self):
        nu = np.linspace(-10, 10, 41)
        np.testing.assert_allclose(lorentzian_transmission(nu, 3.5), broadened_lineshape(nu, self.response, 0.0), rtol=1e-12)
        self.assertAlmostEqual(3.5, vibration_linewidth(self.response, 0.0), places=6)

    def test_area_and_width(self):
        area, _ = quad(lambda x: broadened_lineshape(x, self.response, 0.05), -np.inf, np.inf, limit=400)
        self.assertAlmostEqual(np.pi * 1.75, area, delta=1e-4 * np.pi * 1.75)

        width = vibration_linewidth(self.response, 0.05)
        self.assertGreater(width, 3.5)
        self.assertGreater(width, FWHM_PER_SIGMA * 0.05 * 100)
        self.assertLess(width, 3.5 + FWHM_PER_SIGMA * 0.05 * 100)

        nu = np.linspace(-40, 40, 8001)
        self.assertAlmostEqual(width, fwhm(nu, broadened_lineshape(nu, self.response, 0.05)), delta=0.02)

    def test_monte_carlo(self):
        nu = np.array([0.0, 5.0, 12.0])
        np.testing.assert_allclose(broadened_lineshape(nu, self.response, 0.05), monte_carlo_lineshape(nu, self.response, 0.05, seed=1), atol=0.01)


class TestSweeps(ModelTestCase):
    """Tests for the vibration-averaged sweep model"""

    def test_zero_sigma_limit(self):
        l_det = np.linspace(-0.2, 0.2, 50)
        curves = offresonant_sweep(self.response, self.emitter, self.coupling, self.still, l_det)
        f = detuned_purcell(self.coupling.purcell0, -100.0 * l_det, 3.5)
        expected = collectable_zpl_fraction(f, 0.0255) * lorentzian_transmission(-100.0 * l_det, 3.5)
        np.testing.assert_allclose(expected, curves.counts, rtol=1e-10)
        np.testing.assert_allclose(1 / decay_rate(f, self.emitter), curves.lifetime_ns, rtol=1e-8)

    def test_monte_carlo_oracle(self):
        vib = VibrationSpec(0.1)
        curves = resonant_sweep(self.response, self.emitter, self.coupling, vib, [0.0, 0.05])
        for i, l in enumerate((0.0, 0.05)):
            mean, err = monte_carlo_counts(self.response, self.emitter, self.coupling, 0.1, l, resonant=True, seed=7)
            self.assertAlmostEqual(mean, curves.counts[i], delta=5 * err + 1e-3 * mean)

    def test_quadrature_methods_agree(self):
        l_det = np.linspace(-0.1, 0.1, 11)
        hermite = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.01), l_det)
        trapezoid = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.01, method=Quadrature.TRAPEZOID), l_det)
        np.testing.assert_allclose(hermite.counts, trapezoid.counts, rtol=1e-4)
        np.testing.assert_allclose(hermite.lifetime_ns, trapezoid.lifetime_ns, rtol=1e-4)

    def test_shape(self):
        l_det = np.linspace(-0.3, 0.3, 31)
        curves = resonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.05), l_det, keep_decay=True)
        self.assertEqual(15, int(np.argmax(curves.counts)))
        self.assertEqual(15, int(np.argmin(curves.lifetime_ns)))
        np.testing.assert_allclose(curves.counts, curves.counts[::-1], rtol=1e-6)
        self.assertIn("psb_counts_per_pulse", curves.columns())
        self.assertEqual((31, curves.t_ns.size), curves.decay.shape)

        # vibrations lower the on-resonance counts
        still = resonant_sweep(self.response, self.emitter, self.coupling, self.still, [0.0])
        self.assertLess(curves.counts[15], still.counts[0])

    def test_ensemble(self):
        l_det = np.linspace(-0.2, 0.2, 21)
        width = 4.0
        gauss = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.05), l_det, EnsembleSpec(width, True))
        equivalent = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(float(np.hypot(0.05, width / FWHM_PER_SIGMA / 100))), l_det)
        np.testing.assert_allclose(equivalent.counts, gauss.counts, rtol=1e-12)

        lorentz = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.05), l_det, EnsembleSpec(width, True, EnsembleShape.LORENTZIAN),
                                    check_convergence=False)
        plain = offresonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.05), l_det)
        self.assertLess(lorentz.counts[10], plain.counts[10])

        with self.assertRaises(ValidationError):
            resonant_sweep(self.response, self.emitter, self.coupling, VibrationSpec(0.05), l_det, fit_window_ns=(5.0, 1.0))
        with self.assertRaises(ValidationError):
            EnsembleSpec(0.0, True)


class TestCryostatPhase(ModelTestCase):
    """Tests for phase-resolved vibration statistics"""

    def test_profile(self):
        p = CryostatPhaseProfile.synthetic()
        self.assertAlmostEqual(5.67, p.sigma_nm.max() / p.sigma_nm.min(), delta=0.2)
        self.assertAlmostEqual(float(p.sigma_at(0.2)), float(p.sigma_at(1.2)), places=12)
        self.assertEqual(["high", "low", ""], list(p.window_of([0.1, 0.8, 0.5])))

        with self.assertRaises(ValidationError):
            replace(p, windows={"a": (0.1, 0.5), "b": (0.4, 0.6)})

    def test_forward_model(self):
        p = CryostatPhaseProfile.synthetic()
        model = phase_forward_model(p, self.response, self.emitter, self.coupling, self.still)
        self.assertLess(model["high"][0], model["low"][0])
        self.assertLess(model["low"][1], model["high"][1])

    def test_phase_resolved_stats(self):
        p = CryostatPhaseProfile.synthetic()
        photons, pulses, syncs = synth_timestamps(p, self.response, self.emitter, self.coupling, n_periods=2, seed=3)
        stats = phase_resolved_stats(photons, pulses, syncs, p)

        self.assertEqual(pulses.size, stats["all"].n_pulses)
        self.assertFalse(stats["low"].flagged)
        self.assertGreater(stats["low"].counts_per_pulse, stats["high"].counts_per_pulse)

        expected, _ = phase_forward_model(p, self.response, self.emitter, self.coupling, self.still)["low"]
        self.assertAlmostEqual(expected, stats["low"].counts_per_pulse, delta=expected * (5 / np.sqrt(stats["low"].n_photons) + 0.02))

        with self.assertRaises(ValidationError):
            phase_resolved_stats(photons, pulses, np.array([]), p)

        few = phase_resolved_stats(photons[:10], pulses, syncs, p)
        self.assertTrue(few["all"].flagged)
