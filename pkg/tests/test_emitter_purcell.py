"""Tests for nvcavity's emitter_purcell module"""

from dataclasses import replace
from unittest import TestCase

import numpy as np

from scipy.integrate import quad

from nvcavity.core import ValidationError
from nvcavity.emitter_purcell import (CavityCoupling, EmitterParams, ExcitationForm, collectable_zpl_fraction, count_rate_psb, count_rate_zpl, coupling_from_purcell,
                                      decay_rate, detuned_purcell, excitation_probability, free_space_zpl_fraction, lifetime_ratio, lorentzian_transmission,
                                      per_ns, psb_fraction, purcell_factor, purcell_from_lifetimes, to_angular)

from .base import ModelTestCase


class TestPurcell(TestCase):
    """Tests for the Purcell arithmetic"""

    def test_purcell_factor(self):
        self.assertAlmostEqual(3.85, purcell_factor(180.0, 3.5, 13.0), places=2)
        self.assertEqual(1.0, purcell_factor(0.0, 3.5, 13.0))
        self.assertAlmostEqual(180.0, coupling_from_purcell(purcell_factor(180.0, 3.5, 13.0), 3.5, 13.0), places=10)

        with self.assertRaises(ValidationError):
            purcell_factor(180.0, 0.0, 13.0)
        with self.assertRaises(ValidationError):
            coupling_from_purcell(0.5, 3.5, 13.0)

    def test_branching(self):
        beta0 = 0.0255
        f = 1 + 0.079 / beta0
        self.assertAlmostEqual(0.0732, collectable_zpl_fraction(f, beta0), places=4)
        self.assertAlmostEqual(1.079, lifetime_ratio(f, beta0), places=12)
        self.assertAlmostEqual(1.0, collectable_zpl_fraction(f, beta0) + psb_fraction(f, beta0) + free_space_zpl_fraction(f, beta0), places=12)

        # dark decay lowers every radiative share
        self.assertLess(collectable_zpl_fraction(f, beta0, 0.1), collectable_zpl_fraction(f, beta0))
        self.assertLess(lifetime_ratio(f, beta0, 0.1), lifetime_ratio(f, beta0))

    def test_purcell_from_lifetimes(self):
        est = purcell_from_lifetimes(12.0, 12.0 / 1.079, 0.0255)
        self.assertTrue(est.physical)
        self.assertAlmostEqual(1 + 0.079 / 0.0255, est.factor, places=9)

        est = purcell_from_lifetimes(12.0, 12.0 / float(lifetime_ratio(5.0, 0.0255, 0.2)), 0.0255, 0.2)
        self.assertAlmostEqual(5.0, est.factor, places=9)

        with self.assertLogs("nvcavity.emitter_purcell", "WARNING"):
            est = purcell_from_lifetimes(12.0, 13.0, 0.0255)
        self.assertFalse(est.physical)
        self.assertLess(est.factor, 1.0)

    def test_conversions(self):
        self.assertAlmostEqual(2 * np.pi, to_angular(1.0))
        self.assertAlmostEqual(2 * np.pi * 13e-3, per_ns(13.0))


class TestDetuning(TestCase):
    """Tests for detuning-dependent quantities"""

    def test_lorentzian(self):
        self.assertEqual(1.0, lorentzian_transmission(0.0, 3.5))
        self.assertAlmostEqual(0.5, lorentzian_transmission(1.75, 3.5))
        self.assertAlmostEqual(5.0, detuned_purcell(9.0, 1.75, 3.5))

    def test_excitation_probability(self):
        self.assertAlmostEqual(0.15, excitation_probability(0.3, 0.0, 3.5))
        self.assertAlmostEqual(np.sin(0.15), excitation_probability(0.3, 0.0, 3.5, weak_limit=False))
        self.assertAlmostEqual(0.15 ** 2, excitation_probability(0.3, 0.0, 3.5, form=ExcitationForm.SQUARED))
        self.assertAlmostEqual(0.15 * np.sqrt(0.5), excitation_probability(0.3, 1.75, 3.5))
        self.assertEqual(1.0, excitation_probability(10.0, 0.0, 3.5))


class TestEmitter(ModelTestCase):
    """Tests for EmitterParams and the count rates"""

    def test_params(self):
        self.assertAlmostEqual(1 / 12.0, self.emitter.gamma0)
        self.assertAlmostEqual(1 / 12.0, self.emitter.gamma_rad)
        self.assertEqual(0.0, self.emitter.dark_ratio)

        e = EmitterParams.from_lifetime(12.0, 0.0255, 0.25)
        self.assertAlmostEqual(0.25, e.dark_ratio)
        self.assertAlmostEqual(1 / 12.0, float(decay_rate(1.0, e)))

        with self.assertRaises(ValidationError):
            EmitterParams(10.0, 0.0, 0.0255, 12.0)
        with self.assertRaises(ValidationError):
            replace(self.emitter, beta0=1.5)
        with self.assertRaises(ValidationError):
            CavityCoupling(-1.0, 3.5, 13.0)

    def test_count_rates(self):
        p_ex, f = 0.1, self.coupling.purcell0
        gamma = float(decay_rate(f, self.emitter))
        zpl, _ = quad(lambda t: count_rate_zpl(t, self.emitter, self.coupling, p_ex), 0, 50 / gamma)
        self.assertAlmostEqual(p_ex * collectable_zpl_fraction(f, 0.0255), zpl, places=8)

        psb, _ = quad(lambda t: count_rate_psb(t, self.emitter, self.coupling, p_ex), 0, 50 / gamma)
        self.assertAlmostEqual(p_ex * psb_fraction(f, 0.0255), psb, places=8)

        # the lifetime is the inverse of the total decay rate
        c = count_rate_zpl(np.array([0.0, 1.0]), self.emitter, self.coupling, p_ex)
        self.assertAlmostEqual(gamma, np.log(c[0] / c[1]), places=10)

        detuned = replace(self.coupling, detuning_ghz=1.75)
        self.assertLess(count_rate_zpl(0.0, self.emitter, detuned, p_ex), count_rate_zpl(0.0, self.emitter, self.coupling, p_ex))
