"""Tests for nvcavity's inference module"""

import tempfile

from pathlib import Path

import numpy as np

from nvcavity.core import ConvergenceError, ValidationError, write_csv
from nvcavity.inference import (PLETrace, SweepDataset, SweepModel, coverage_fraction, detuned_background, fit_exponential_lifetime, fit_sweep_joint, g2_analyze,
                                hwp_polarization_fit, offpulse_background, ple_analyze, read_g2, read_ple, summarize_linewidths, synth_decay, synth_experiment,
                                sweep_start, synth_g2, synth_g2_emitters, synth_ple, synth_sweep)
from nvcavity.layered_cavity import CavityResponse

from .base import SLOW, ModelTestCase


class TestLifetime(ModelTestCase):
    """Tests for background-subtracted lifetime fits"""

    def test_noise_free(self):
        t, c = synth_decay(12.0, 1e6, noise="none")
        fit = fit_exponential_lifetime(t, c, 0.128)
        self.assertAlmostEqual(12.0, fit.tau_ns, delta=1e-4)
        self.assertAlmostEqual(1e6, fit.total_counts, delta=10.0)

        per_pulse = fit_exponential_lifetime(t, c, 0.128, n_pulses=1000)
        self.assertAlmostEqual(1e3, per_pulse.total_counts, delta=1e-2)

    def test_with_background(self):
        t, c = synth_decay(12.0, 2e5, background=5.0, seed=4)
        fit = fit_exponential_lifetime(t, c, 0.128, background=5.0)
        self.assertAlmostEqual(12.0, fit.tau_ns, delta=4 * fit.tau_err_ns)
        self.assertAlmostEqual(2e5, fit.total_counts, delta=4 * fit.total_err)

    def test_background_only(self):
        t = np.arange(0.0, 60.0, 0.128)
        with self.assertRaises(ValidationError):
            fit_exponential_lifetime(t, np.full(t.size, 5.0), 0.128, background=5.0)
        with self.assertRaises(ValidationError):
            fit_exponential_lifetime(t, np.full(t.size, 5.0), 0.128, window_ns=(1.0, 1.2))

    def test_background_estimates(self):
        np.testing.assert_allclose([2.0, 4.0], detuned_background([1.0, 2.0], 100, 200))
        self.assertEqual(3.0, offpulse_background([3.0, 3.0, 100.0], np.array([True, True, False])))
        with self.assertRaises(ValidationError):
            offpulse_background([1.0], np.array([False]))


class TestPLE(ModelTestCase):
    """Tests for PLE linewidth analysis"""

    def test_spectral_diffusion(self):
        traces = synth_ple(20, 60.0, 400.0, random_walk_mhz=40.0, seed=2)
        res = ple_analyze(traces)

        self.assertEqual(20, len(res.fits))
        self.assertFalse(res.flagged)
        self.assertAlmostEqual(60.0, res.centered.fwhm_mhz, delta=6.0)
        self.assertGreater(res.raw.fwhm_mhz, res.centered.fwhm_mhz)
        for f in res.fits.values():
            self.assertAlmostEqual(60.0, f.fwhm_mhz, delta=5 * f.fwhm_err_mhz + 1.0)
        self.assertEqual(20, res.columns()["fwhm_mhz"].size)

    def test_flat_trace(self):
        traces = synth_ple(3, 60.0, 400.0, seed=5)
        flat = PLETrace(traces[0].frequency_ghz, np.full(traces[0].counts.size, 10.0), 10.0, 7)
        res = ple_analyze([*traces, flat])
        self.assertIn(7, res.flagged)
        self.assertNotIn(7, res.fits)

        with self.assertRaises(ValidationError):
            ple_analyze([flat])

    def test_linewidth_summary(self):
        mean, std = summarize_linewidths([50.0, 70.0])
        self.assertEqual(60.0, mean)
        self.assertAlmostEqual(np.sqrt(200.0), std)
        with self.assertRaises(ValidationError):
            summarize_linewidths([50.0])


class TestG2(ModelTestCase):
    """Tests for pulsed autocorrelation analysis"""

    def test_flat(self):
        res = g2_analyze(synth_g2(1000.0, 0.1, noise="none"))
        self.assertAlmostEqual(1000.0, res.plateau, places=6)
        self.assertAlmostEqual(0.1, res.g2_zero, places=9)
        self.assertAlmostEqual(0.1, res.g2_corrected, places=9)

    def test_background_correction(self):
        res = g2_analyze(synth_g2(1000.0, 0.1, background=50.0, noise="none"))
        self.assertGreater(res.g2_zero, 0.14)
        self.assertAlmostEqual(0.1, res.g2_corrected, delta=0.005)

    def test_bunching(self):
        res = g2_analyze(synth_g2(1000.0, 0.05, amplitude=0.3, decay=2.0, noise="none"), "bunching")
        self.assertAlmostEqual(1000.0, res.plateau, delta=1.0)
        self.assertAlmostEqual(0.3, res.bunching_amplitude, delta=1e-3)
        self.assertAlmostEqual(2.0, res.bunching_decay, delta=1e-2)

        with self.assertRaises(ValidationError):
            g2_analyze(synth_g2(1000.0, 0.05, noise="none"), "exotic")

    def test_emitter_counting(self):
        self.assertEqual(0.0, g2_analyze(synth_g2_emitters(1, 0.05, 2000, seed=1)).g2_zero)
        self.assertAlmostEqual(0.5, g2_analyze(synth_g2_emitters(2, 0.05, 2000, seed=1)).g2_zero, delta=0.1)

    def test_read(self):
        with tempfile.TemporaryDirectory() as d:
            h = synth_g2(100.0, 0.2, train_length=50, k_max=3, seed=1)
            path = write_csv(Path(d) / "g2.csv", {"k": h.k, "coincidences": h.coincidences}, {"train_length": 50})
            back = read_g2(path)
            self.assertEqual(50, back.train_length)
            np.testing.assert_array_equal(h.coincidences, back.coincidences)


class TestPolarization(ModelTestCase):
    """Tests for half-wave plate polarization fits"""

    def test_fit(self):
        angles = np.arange(0.0, 180.0, 10.0)
        counts = 100 + 900 * np.sin(np.radians(2 * (angles - 20.0))) ** 2
        fit = hwp_polarization_fit(angles, counts)
        self.assertAlmostEqual(900.0, fit.amplitude, places=6)
        self.assertAlmostEqual(20.0, fit.phase_deg, places=6)
        self.assertAlmostEqual(100.0, fit.offset, places=6)
        self.assertAlmostEqual(10.0, fit.extinction_ratio, places=6)

        with self.assertRaises(ValidationError):
            hwp_polarization_fit([0, 45, 90, 135, 180], [1, 2, 1, 2, 1])


class TestSweepFit(ModelTestCase):
    """Tests for sweep datasets and the joint sweep fit"""

    def setUp(self):
        self.model = SweepModel(CavityResponse(3.5, -100.0), 0.0255)
        self.truth = {"purcell_branching": 0.2, "tau0_ns": 12.0, "sigma_nm": 0.05, "amplitude": 1e4, "center_ghz": 0.0}

    def test_dataset_validation(self):
        ones = np.ones(3)
        with self.assertRaises(ValidationError):
            SweepDataset(np.arange(3.0), np.ones(2), ones, ones, ones)
        with self.assertRaises(ValidationError):
            SweepDataset(np.arange(3.0), ones, np.zeros(3), ones, ones)
        with self.assertRaises(ValidationError):
            SweepDataset(np.array([0.0, 2.0, 1.0]), ones, ones, ones, ones)
        with self.assertRaises(ValidationError):
            SweepDataset(np.arange(3.0), ones, ones, ones, ones, "sideways")

        two = SweepDataset(np.array([0.0, 1.0, 1.0, 0.0]), np.ones(4), np.ones(4), np.ones(4), np.ones(4), session=np.array([0, 0, 1, 1]))
        self.assertEqual([0, 1], two.sessions)

    def test_round_trip(self):
        data = synth_sweep(self.model, self.truth, [np.linspace(-20, 20, 21)], noise="none")
        fit = fit_sweep_joint(data, self.model)
        self.assertTrue(fit.success)
        for name in ("purcell_branching", "tau0_ns", "sigma_nm"):
            self.assertAlmostEqual(self.truth[name], fit[name], delta=0.02 * self.truth[name])
        self.assertAlmostEqual(0.0, fit["center_ghz"], delta=0.05)

        with self.assertRaises(ConvergenceError), self.assertLogs("nvcavity.core", "ERROR"):
            fit_sweep_joint(data, self.model, {"purcell_branching": 0.15, "sigma_nm": 0.04}, max_nfev=1)

    def test_start_from_data(self):
        for mode in ("offresonant", "resonant"):
            data = synth_sweep(self.model, self.truth, [np.linspace(-20, 20, 21)], mode, noise="none")
            start = sweep_start(data, self.model)
            self.assertEqual(0.0, start["center_ghz"])
            self.assertAlmostEqual(self.truth["tau0_ns"], start["tau0_ns"], delta=0.5)
            for name in ("purcell_branching", "sigma_nm"):
                self.assertLess(abs(np.log(start[name] / self.truth[name])), np.log(2), f"{mode}: {name} = {start[name]}")

    def test_peak_not_spanned(self):
        data = synth_sweep(self.model, self.truth, [np.linspace(5, 25, 11)], noise="none")
        with self.assertRaises(ValidationError):
            fit_sweep_joint(data, self.model)

    def test_helpers(self):
        self.assertEqual(0.5, coverage_fraction([1.0, 3.0], [0.5, 0.5], 1.2))
        with self.assertRaises(ValidationError):
            synth_experiment("holography", seed=0)

    def test_read_ple(self):
        with tempfile.TemporaryDirectory() as d:
            traces = synth_ple(2, 60.0, 100.0, seed=1)
            f = np.concatenate([t.frequency_ghz for t in traces])
            c = np.concatenate([t.counts for t in traces])
            scan = np.repeat([0, 1], traces[0].counts.size)
            path = write_csv(Path(d) / "ple.csv", {"frequency_ghz": f, "counts": c, "scan": scan}, {"bin_mhz": 10.0})
            back = read_ple(path)
            self.assertEqual(2, len(back))
            self.assertEqual(10.0, back[1].bin_mhz)

    def test_coverage(self):
        n = 200 if SLOW else 4
        fits = [fit_sweep_joint(synth_sweep(self.model, self.truth, [np.linspace(-20, 20, 21)], seed=s), self.model)
                for s in range(n)]
        est = np.array([f["purcell_branching"] for f in fits])
        err = np.array([f.error("purcell_branching") for f in fits])
        self.assertTrue(np.all(np.isfinite(err)) and np.all(err > 0))

        if SLOW:
            self.assertAlmostEqual(0.68, coverage_fraction(est, err, self.truth["purcell_branching"]), delta=0.1)
        else:
            self.assertGreater(coverage_fraction(est, 2 * err, self.truth["purcell_branching"]), 0.0)
