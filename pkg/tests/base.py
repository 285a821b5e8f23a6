"""Shared template TestCase classes and methods for use in nvcavity tests"""

import os

from unittest import TestCase

from nvcavity.config import SystemConfig, load_config
from nvcavity.emitter_purcell import CavityCoupling, EmitterParams
from nvcavity.layered_cavity import CavityGeometry, CavityResponse, MirrorSpec
from nvcavity.vibration_average import VibrationSpec

SLOW = os.environ.get("NVCAVITY_SLOW_TESTS") == "1"
"""Run the full-size statistical checks"""


class DeviceTestCase(TestCase):
    """Basic template for tests on the bundled reference device parameter set"""

    _CONFIG: SystemConfig = None

    @classmethod
    def setUpClass(cls) -> None:
        """Loads the bundled config once for all subclasses"""
        if DeviceTestCase._CONFIG is None:
            DeviceTestCase._CONFIG = load_config()
        cls.cfg = DeviceTestCase._CONFIG
        cls.system = cls.cfg.budget_system()


class AirCavityTestCase(TestCase):
    """Template for transfer-matrix tests on a symmetric, lossless, 10 um air cavity whose properties are known in closed form"""

    @classmethod
    def setUpClass(cls) -> None:
        mirror = MirrorSpec(transmission_ppm=1000.0)
        cls.geometry = CavityGeometry(mirror, mirror, None, air_gap_um=10.0, fiber_roc_um=100.0, fiber_mirror_diameter_um=50.0)
        cls.fsr_thz = 299792458.0 / (2 * 10e-6) * 1e-12
        cls.f31 = 31 * cls.fsr_thz


class ModelTestCase(TestCase):
    """Template with a simple emitter-cavity system on round numbers"""

    @classmethod
    def setUpClass(cls) -> None:
        cls.emitter = EmitterParams.from_lifetime(12.0, 0.0255, p_in=1.0, phi_p0=0.3)
        cls.coupling = CavityCoupling(300.0, 3.5, 13.0)
        cls.response = CavityResponse(3.5, -100.0)
        cls.still = VibrationSpec(0.0)
