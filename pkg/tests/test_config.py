"""Tests for nvcavity's config module"""

import os
import tempfile

from pathlib import Path
from unittest import TestCase, mock

from nvcavity.config import CONFIG_DIR_ENV, default_config_path, load_config
from nvcavity.core import SchemaError, ValidationError
from nvcavity.vibration_average import Quadrature


class TestLoadConfig(TestCase):
    """Tests for parsing TOML configs"""

    @classmethod
    def setUpClass(cls) -> None:
        cls.text = default_config_path().read_text()

    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.dir.cleanup)

    def _write(self, text: str, name: str = "device.toml") -> Path:
        (p := Path(self.dir.name) / name).write_text(text)
        return p

    def test_bundled(self):
        cfg = load_config()
        self.assertEqual(2000.0, cfg.finesse)
        self.assertEqual(0.18, cfg.vibration.sigma_nm)
        self.assertIs(Quadrature.AUTO, cfg.vibration.method)
        self.assertAlmostEqual(1.285 / 3.5, cfg.chain.eta_int)
        self.assertEqual(0.04, cfg.chain.eta_joint)
        self.assertEqual(3.5, cfg.response.kappa_ghz)
        self.assertEqual(-107.0, cfg.response.slope_ghz_per_nm)
        self.assertTrue(465.0 <= cfg.resonance.frequency_thz <= 476.0)
        self.assertTrue(cfg.digest)
        self.assertIsNone(cfg.sweep_model().ensemble)

        tol = cfg.tolerances()
        self.assertEqual(64, tol["quadrature_order"])
        self.assertEqual([1.0, 40.0], tol["fit_window_ns"])
        self.assertEqual({"max_nfev", "ftol", "xtol", "significance", "min_photons", "convergence_rtol"} - set(tol), set())

    def test_overrides(self):
        cfg = load_config()
        self.assertIs(cfg, cfg.with_overrides())
        other = cfg.with_overrides(0.05, 32)
        self.assertEqual(0.05, other.vibration.sigma_nm)
        self.assertEqual(32, other.vibration.quadrature_order)
        self.assertEqual(0.05, other.budget_system().vibration.sigma_nm)

        tuned = cfg.with_overrides(truncation=6.0, convergence_rtol=1e-2, max_nfev=50, ftol=1e-6, significance=None)
        self.assertEqual((6.0, 1e-2), (tuned.vibration.truncation, tuned.vibration.convergence_rtol))
        self.assertEqual((50, 1e-6, cfg.analysis.significance), (tuned.analysis.max_nfev, tuned.analysis.ftol, tuned.analysis.significance))
        self.assertEqual(50, tuned.tolerances()["max_nfev"])
        with self.assertRaises(ValidationError):
            cfg.with_overrides(xtol=0.0)

    def test_config_dir(self):
        self._write(self.text.replace("sigma_nm = 0.18\ntruncation", "sigma_nm = 0.07\ntruncation"), "quiet.toml")
        with mock.patch.dict(os.environ, {CONFIG_DIR_ENV: self.dir.name}):
            self.assertEqual(0.07, load_config("quiet.toml").vibration.sigma_nm)

    def test_digest_tracks_content(self):
        a = load_config(self._write(self.text, "a.toml"))
        b = load_config(self._write(self.text.replace("p_in = 0.5", "p_in = 0.6"), "b.toml"))
        self.assertNotEqual(a.digest, b.digest)
        self.assertEqual(a.digest, load_config(self._write(self.text, "c.toml")).digest)

    def test_schema_errors(self):
        for bad in (self.text.replace("[coupling]", "[coupling]\ncolour = 3"),
                    self.text.replace("[chain]", "[chains]"),
                    self.text.replace('method = "auto"', 'method = "simpson"'),
                    self.text.replace("kappa_ghz = 3.5\n", ""),
                    self.text.replace("tau0_ns = 12.0", "lifetime = 12.0"),
                    self.text + "\n[[[",
                    ):
            with self.assertRaises(SchemaError):
                load_config(self._write(bad))

        with self.assertRaises(SchemaError):
            load_config(Path(self.dir.name) / "missing.toml")

    def test_invalid_values(self):
        with self.assertRaises(ValidationError):
            load_config(self._write(self.text.replace("beta0 = 0.0255", "beta0 = 2.0")))
        with self.assertRaises(ValidationError):
            load_config(self._write(self.text.replace("kappa_fs_ghz = 1.285", "kappa_fs_ghz = 5.0")))
