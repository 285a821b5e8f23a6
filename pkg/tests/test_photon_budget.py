"""Tests for nvcavity's photon_budget module"""

import numpy as np

from nvcavity.core import ValidationError
from nvcavity.photon_budget import (EfficiencyChain, ImprovementScenario, Upgrade, budget_decompose, corrected_detection, db, excitation_backout,
                                    fiber_path_efficiency, finesse_sweep, internal_efficiency, ledger_table, project_improvements, projection_columns,
                                    psb_efficiency_range, psb_ledger, sil_benchmark, zero_vibration_counterfactual)

from .base import DeviceTestCase


class TestEfficiencies(DeviceTestCase):
    """Tests for the detection efficiency chain"""

    def test_internal(self):
        self.assertAlmostEqual(1.285 / 3.5, internal_efficiency(1.285, 3.5))
        self.assertAlmostEqual(1.285 / 3.5, self.system.chain.eta_int, places=9)
        with self.assertRaises(ValidationError):
            internal_efficiency(4.0, 3.5)
        with self.assertRaises(ValidationError):
            internal_efficiency(0.0, 3.5)

    def test_psb_range(self):
        lo, hi = psb_efficiency_range()
        self.assertAlmostEqual(0.00434, lo, delta=1e-5)
        self.assertAlmostEqual(0.01206, hi, delta=1e-5)

    def test_misc(self):
        self.assertAlmostEqual(np.sqrt(0.5), fiber_path_efficiency(-10 * np.log10(2)))
        self.assertAlmostEqual(1.0, EfficiencyChain(0.5, 0.5, nd_filter_db=10.0).nd_corrected(0.1))
        self.assertAlmostEqual(10.0, db(0.1))
        with self.assertRaises(ValidationError):
            EfficiencyChain(1.2, 0.3)
        with self.assertRaises(ValidationError):
            EfficiencyChain(0.3, 0.3, eta_joint=0.0)


class TestLedger(DeviceTestCase):
    """Tests for the dB loss decomposition"""

    @classmethod
    def setUpClass(cls) -> None:
        super().setUpClass()
        cls.ledger = budget_decompose(cls.system)

    def test_anchors(self):
        self.assertAlmostEqual(0.08128, self.system.p_ex0, delta=1e-5)
        self.assertAlmostEqual(0.18, self.system.zpl_fraction0, delta=1e-3)

    def test_closure(self):
        self.assertAlmostEqual(db(self.ledger.detected), self.ledger.total_db, places=9)
        self.assertAlmostEqual(self.ledger.detected, np.prod([e.linear for e in self.ledger.entries]), delta=1e-9 * self.ledger.detected)

    def test_categories(self):
        totals = self.ledger.totals()
        self.assertEqual({"excitation", "collection", "zpl_branching"}, set(totals))
        for cat, expected in (("excitation", 13.5), ("collection", 14.5), ("zpl_branching", 12.65)):
            self.assertAlmostEqual(expected, totals[cat], delta=1.0, msg=cat)
        self.assertAlmostEqual(13.0, self.ledger.vibration_db, delta=0.7)

        columns = self.ledger.columns()
        self.assertEqual(8, len(columns["label"]))
        self.assertEqual(3, columns["cause"].count("vibration"))
        self.assertEqual(12, ledger_table(self.ledger).row_count)

    def test_counterfactual(self):
        cf = zero_vibration_counterfactual(self.system)
        self.assertAlmostEqual(0.18, cf.zpl_fraction0, delta=1e-3)
        self.assertAlmostEqual(1.7187e-3, cf.detected_zpl0, delta=0.01 * 1.7187e-3)
        self.assertLess(cf.zpl_fraction, cf.zpl_fraction0)
        self.assertAlmostEqual(self.ledger.vibration_db, cf.gap_db, places=6)

    def test_psb(self):
        ledger = psb_ledger(self.system)
        self.assertEqual("psb", ledger.channel)
        self.assertIn("psb_branching", ledger.totals())
        self.assertAlmostEqual(db(ledger.detected), ledger.total_db, places=9)
        self.assertEqual(1, sum(e.cause == "vibration" for e in ledger.entries))


class TestBackout(DeviceTestCase):
    """Tests for inferring the excitation probability from measured counts"""

    def test_zpl(self):
        res = excitation_backout(9.3e-5, "zpl", EfficiencyChain(0.11, 0.32), 0.073)
        self.assertAlmostEqual(0.0362, res.p_ex, delta=2e-4)
        self.assertEqual(res.low, res.high)

    def test_psb(self):
        chain = EfficiencyChain(0.3, 0.32, eta_psb=0.0082, eta_psb_range=(0.00434, 0.01206))
        res = excitation_backout(4.6e-4, "psb", chain, 0.9107)
        self.assertAlmostEqual(0.0419, res.low, delta=2e-4)
        self.assertAlmostEqual(0.1164, res.high, delta=2e-4)
        self.assertTrue(res.low < res.p_ex < res.high)

    def test_invalid(self):
        chain = EfficiencyChain(0.3, 0.32)
        with self.assertRaises(ValidationError):
            excitation_backout(0.0, "zpl", chain, 0.1)
        with self.assertRaises(ValidationError):
            excitation_backout(1e-4, "phonon", chain, 0.1)
        with self.assertRaises(ValidationError):
            excitation_backout(1e-4, "zpl", EfficiencyChain(0.0, 0.32), 0.1)
        with self.assertRaises(ValidationError):
            corrected_detection(1e-4, 0.0)

    def test_sil(self):
        self.assertAlmostEqual(4.0, sil_benchmark(2e-3).ratio)
        self.assertAlmostEqual(2e-3, corrected_detection(1e-4, 0.05))


class TestProjections(DeviceTestCase):
    """Tests for projected improvements"""

    def test_factor_chain(self):
        rows = project_improvements(ImprovementScenario.reference())
        self.assertEqual(["0.2%", "3%", "9%", "10%", "20%"], [r.display for r in rows])
        self.assertAlmostEqual(9.3e-5 * 20 * 16 * 3 * 1.2 * 2, rows[-1].cumulative)
        self.assertFalse(any(r.capped or r.model_recomputed for r in rows))
        self.assertEqual(5, len(projection_columns(rows)["label"]))

    def test_cap(self):
        rows = project_improvements(ImprovementScenario((Upgrade("miracle", 1e6),)))
        self.assertTrue(rows[0].capped)
        self.assertEqual(1.0, rows[0].cumulative)

    def test_model_recompute(self):
        scenario = ImprovementScenario((Upgrade("quieter cryostat", overrides={"sigma_nm": 0.01}),))
        row, = project_improvements(scenario, self.system)
        self.assertTrue(row.model_recomputed)
        self.assertTrue(8 < row.factor < 25)

        with self.assertRaises(ValidationError):
            project_improvements(scenario)

    def test_upgrade_validation(self):
        with self.assertRaises(ValidationError):
            Upgrade("nothing")
        with self.assertRaises(ValidationError):
            Upgrade("both", 2.0, {"sigma_nm": 0.01})
        with self.assertRaises(ValidationError):
            Upgrade("unknown", overrides={"colour": 1})
        with self.assertRaises(ValidationError):
            ImprovementScenario((), baseline=0.0)

    def test_finesse(self):
        s = self.system.with_finesse(4000.0)
        self.assertAlmostEqual(1.75, s.coupling.kappa_ghz)
        self.assertAlmostEqual(2 * self.system.chain.eta_int, s.chain.eta_int)
        self.assertEqual(1.0, self.system.with_finesse(6000.0).chain.eta_int)
        with self.assertRaises(ValidationError):
            self.system.with_finesse(7000.0)

        sweep = finesse_sweep(self.system, [1000.0, 2000.0, 4000.0], [0.0, 0.18])
        self.assertTrue(np.all(np.diff(sweep["zpl_fraction_0"]) > 0))
        self.assertTrue(np.all(sweep["zpl_fraction_0.18"] < sweep["zpl_fraction_0"]))
        np.testing.assert_allclose(sweep["outcoupled_0"], sweep["zpl_fraction_0"] * [internal_efficiency(1.285, 3.5) * f / 2000 for f in (1000, 2000, 4000)])
