"""Tests for the nvcavity command line"""

import json
import tempfile

from pathlib import Path
from unittest import mock

import numpy as np

from nvcavity.__main__ import _main, main
from nvcavity.core import read_csv

from .base import DeviceTestCase


class TestMain(DeviceTestCase):
    """End-to-end runs of the subcommands against the bundled config"""

    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.dir.cleanup)
        self.out = Path(self.dir.name)

    def run_cli(self, *args: str) -> int:
        return main(["--out", self.dir.name, "-q", *args])

    def test_help(self):
        self.assertEqual(0, main([]))

    def test_budget(self):
        self.assertEqual(0, self.run_cli("--seed", "3", "budget", "--measured-psb", "4.6e-4"))
        payload = json.loads((self.out / "budget.json").read_text())
        self.assertEqual(3, payload["metadata"]["seed"])
        self.assertIn("backout_psb", payload)
        self.assertAlmostEqual(payload["zpl"]["total_db"], sum(payload["zpl"]["totals_db"].values()), places=9)

        cols, meta = read_csv(self.out / "budget.csv", ("db", "linear"))
        self.assertEqual(8, cols["db"].size)
        self.assertEqual(0.18, meta["sigma_nm"])

    def test_presets(self):
        self.assertEqual(0, self.run_cli("--preset", "roadmap"))
        self.assertIn("20%", (self.out / "projection.csv").read_text())

        self.assertEqual(0, self.run_cli("--threads", "2", "project", "--finesse-sweep", "--points", "4", "--sigmas", "0.2", "0.01"))
        cols, _ = read_csv(self.out / "finesse_sweep.csv", ("finesse", "zpl_fraction_0.2", "outcoupled_0.01"))
        self.assertEqual(4, cols["finesse"].size)

    def test_scenario(self):
        (path := self.out / "scenario.toml").write_text('baseline = 1e-4\n\n[[upgrade]]\nlabel = "quieter, stiffer"\noverrides = { sigma_nm = 0.05 }\n\n'
                                                         '[[upgrade]]\nlabel = "repump"\nfactor = 10.0\n')
        self.assertEqual(0, self.run_cli("project", str(path)))
        text = (self.out / "projection.csv").read_text()
        self.assertIn("quieter", text)
        self.assertIn("repump", text)
        cols, _ = read_csv(self.out / "projection.csv", ("factor", "cumulative"))
        np.testing.assert_array_equal([2, 2], [cols["factor"].size, cols["cumulative"].size])
        self.assertEqual(10.0, cols["factor"][1])

        path.write_text('[[upgrade]]\nlabel = "bad"\nfactor = 2.0\ncost = 5\n')
        self.assertEqual(2, self.run_cli("project", str(path)))
        path.write_text('baseline = 1e-4\n')
        self.assertEqual(2, self.run_cli("project", str(path)))

    def test_synth_and_analyze(self):
        self.assertEqual(0, self.run_cli("synth", "--kind", "g2"))
        self.assertEqual(0, self.run_cli("g2", str(self.out / "synth_g2.csv")))
        self.assertLess(json.loads((self.out / "g2.json").read_text())["g2_corrected"], 0.1)

        self.assertEqual(0, self.run_cli("--seed", "2", "synth", "--kind", "ple"))
        self.assertEqual(0, self.run_cli("ple", str(self.out / "synth_ple.csv")))
        self.assertIn("centered", json.loads((self.out / "ple.json").read_text()))

        self.assertEqual(0, self.run_cli("synth", "--kind", "decay"))
        cols, meta = read_csv(self.out / "synth_decay.csv", ("t_ns", "counts"))
        self.assertEqual("decay", meta["kind"])

    def test_sweep_and_fit(self):
        self.assertEqual(0, self.run_cli("--sigma-nm", "0.05", "sweep", "--mode", "offresonant", "--points", "21"))
        cols, meta = read_csv(self.out / "sweep_offresonant.csv", ("l_det_nm", "counts_per_pulse", "lifetime_ns"))
        self.assertEqual(21, cols["l_det_nm"].size)
        self.assertEqual(0.05, meta["sigma_nm"])

        self.assertEqual(0, self.run_cli("synth", "--kind", "sweep", "--noise", "none"))
        self.assertEqual(0, self.run_cli("fit", str(self.out / "synth_sweep.csv")))
        fit = json.loads((self.out / "fit.json").read_text())
        self.assertTrue(fit["success"])
        truth = self.cfg.synth
        self.assertAlmostEqual(truth.purcell_branching, fit["parameters"]["purcell_branching"], delta=0.05 * truth.purcell_branching)
        self.assertAlmostEqual(truth.sigma_nm, fit["parameters"]["sigma_nm"], delta=0.05 * truth.sigma_nm)
        self.assertAlmostEqual(truth.tau0_ns, fit["parameters"]["tau0_ns"], delta=0.05 * truth.tau0_ns)
        self.assertEqual(self.cfg.analysis.max_nfev, fit["metadata"]["max_nfev"])

        cols, _ = read_csv(self.out / "fit_residuals.csv", ("counts_residual", "lifetime_residual"))
        self.assertEqual(truth.points, cols["counts_residual"].size)

    def test_fit_rejects_bad_rows(self):
        header = "detuning_ghz,counts_per_pulse,counts_err,lifetime_ns,lifetime_err_ns\n"
        rows = "".join(f"{d},{100 - d * d},10,12,0.1\n" for d in range(-5, 6))
        for bad in ("1,oops,10,12,0.1\n", "1,90,10\n", "1,90,10,12,0.1,7\n"):
            (path := self.out / "sweep.csv").write_text(header + rows + bad)
            self.assertEqual(2, self.run_cli("fit", str(path)))
            self.assertEqual([], sorted(p.name for p in self.out.glob("fit*")))

    def test_tolerance_flags(self):
        self.assertEqual(0, self.run_cli("--max-nfev", "50", "--ftol", "1e-6", "--xtol", "1e-7", "--significance", "3", "--min-photons", "10", "--rtol", "0.01",
                                         "--truncation", "6", "dispersion", "--points", "5"))
        _, meta = read_csv(self.out / "dispersion.csv", ("air_gap_um",))
        self.assertEqual((50, 1e-6, 1e-7, 3.0, 10, 0.01, 6.0), (meta["max_nfev"], meta["ftol"], meta["xtol"], meta["significance"], meta["min_photons"],
                                                              meta["convergence_rtol"], meta["truncation"]))

        self.assertEqual(2, self.run_cli("--ftol", "-1", "dispersion", "--points", "5"))
        self.assertEqual(2, self.run_cli("--truncation", "1", "dispersion", "--points", "5"))

    def test_runtime_errors(self):
        (blocker := self.out / "taken").write_text("a file, not a directory")
        with self.assertLogs("nvcavity.__main__", "ERROR"):
            self.assertEqual(1, main(["--out", str(blocker / "sub"), "-q", "dispersion", "--points", "5"]))

        with mock.patch("nvcavity.__main__.cmd_dispersion", side_effect=ValueError("x0 is infeasible")), self.assertLogs("nvcavity.__main__", "ERROR") as cm:
            self.assertEqual(1, self.run_cli("dispersion"))
        self.assertIn("ValueError", cm.output[0])

    def test_logging_follows_parsed_flags(self):
        argv = ["nvcavity", "--out", self.dir.name, "--no-color", "-q", "dispersion", "--points", "5"]
        with mock.patch("sys.argv", argv), mock.patch("nvcavity.__main__._setup_logging") as setup, self.assertRaises(SystemExit) as cm:
            _main()
        setup.assert_called_once_with(True, True)
        self.assertEqual(0, cm.exception.code)

        with mock.patch("sys.argv", ["nvcavity", "--out", self.dir.name, "dispersion", "--points", "5"]), \
                mock.patch("nvcavity.__main__._setup_logging") as setup, self.assertRaises(SystemExit):
            _main()
        setup.assert_called_once_with(False, False)

    def test_vibration(self):
        self.assertEqual(0, self.run_cli("vibration", "--points", "41"))
        model = json.loads((self.out / "phase_model.json").read_text())
        self.assertLess(model["high"]["counts_per_pulse"], model["low"]["counts_per_pulse"])

    def test_dispersion(self):
        self.assertEqual(0, self.run_cli("dispersion", "--points", "5"))
        self.assertTrue((self.out / "dispersion.csv").is_file())

    def test_bad_input(self):
        (empty := self.out / "empty.csv").write_text("detuning_ghz,counts_per_pulse,counts_err,lifetime_ns,lifetime_err_ns\n")
        self.assertEqual(2, self.run_cli("fit", str(empty)))
        self.assertEqual(2, self.run_cli("fit", str(self.out / "missing.csv")))
        self.assertEqual(2, self.run_cli("--config", str(self.out / "nope.toml"), "budget"))
        self.assertEqual(2, self.run_cli("budget", "--measured-zpl", "-1"))
