"""Commonly used physical constants, reference device values and defaults"""

import numpy as np

from scipy import constants as _sc

C_LIGHT: float = _sc.c
"""Speed of light in vacuum (m/s)"""

FWHM_PER_SIGMA: float = 2.0 * np.sqrt(2.0 * np.log(2.0))
"""Conversion factor from Gaussian standard deviation to full width at half maximum, 2*sqrt(2 ln 2)"""


class N:
    """Refractive indices"""
    AIR: float = 1.0
    DIAMOND: float = 2.41
    FUSED_SILICA: float = 1.45


class REF:
    """Reference values reported for the membrane-in-fiber-cavity system, used as defaults and regression anchors"""
    ZPL_THZ: float = 470.4
    BETA0: float = 0.0255
    GAMMA_MHZ: float = 13.0
    KAPPA_GHZ: float = 3.5
    G_MHZ: float = 180.0
    DESIGN_FINESSE: float = 6200.0
    SIL_ZPL_PER_PULSE: float = 5e-4
    DARK_RATIO: float = 0.1
    PSB_GEOMETRIC: tuple[float, float] = (0.009, 0.025)
    PSB_MIRROR: float = 0.83
    PSB_PATH: float = 0.83
    PSB_DETECTOR: float = 0.70


class IMPROVEMENTS:
    """Improvement chain for ZPL collection: (label, enhancement factor)"""
    CHAIN: tuple[tuple[str, float], ...] = (
        ("Spin pump / resonant repump", 20.0),
        ("20x vibration reduction", 16.0),
        ("Finesse limited by mirror coatings (6000)", 3.0),
        ("Higher finesse (11000)", 1.2),
        ("Diamond-like mode", 2.0),
    )
    BASELINE_ZPL_PER_PULSE: float = 9.3e-5


class DEFAULTS:
    """Numerical defaults shared by simulation and analysis code"""
    TRUNCATION: float = 5.0
    QUAD_ORDER: int = 64
    CONVERGENCE_RTOL: float = 1e-3
    FIT_WINDOW_NS: tuple[float, float] = (1.0, 40.0)
    TCSPC_BIN_NS: float = 0.128
    MODEL_BIN_NS: float = 0.5
    MIN_PHOTONS: int = 50
    MAX_NFEV: int = 400
    FTOL: float = 1e-8
    XTOL: float = 1e-8
    GTOL: float = 1e-8
    SIGNIFICANCE: float = 5.0
