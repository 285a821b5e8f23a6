"""Closed-form emitter-cavity physics: decay rates, Purcell enhancement, branching, detuned transmission, excitation probability and count rates.

Rates are stored the way they are usually reported, as ordinary frequencies (rate/2pi) in MHz or GHz.  `to_angular()` and
`per_ns()` are the only places where those are turned into angular rates.
"""

import logging

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Union

import numpy as np

from .core import require

log = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


def to_angular(f: ArrayLike) -> ArrayLike:
    """Converts an ordinary frequency (rate/2pi) to an angular rate in the same unit prefix.

    Args:
        f (ArrayLike): The frequency

    Returns:
        ArrayLike: `2*pi*f`
    """
    return 2 * np.pi * f


def per_ns(f_mhz: ArrayLike) -> ArrayLike:
    """Converts a rate/2pi given in MHz to an angular decay rate in 1/ns.

    Args:
        f_mhz (ArrayLike): rate/2pi in MHz

    Returns:
        ArrayLike: The angular rate, 1/ns
    """
    return to_angular(f_mhz) * 1e-3


class ExcitationForm(Enum):
    """Which expression to use for the per-pulse excitation probability"""
    PRINTED = "printed"
    """p_ex = sin(phi*sqrt(T)/2), weak limit phi*sqrt(T)/2"""
    SQUARED = "squared"
    """p_ex = sin^2(phi*sqrt(T)/2), weak limit (phi*sqrt(T)/2)^2"""


@dataclass(frozen=True)
class EmitterParams:
    """Rates, branching and excitation parameters of a single emitter"""
    gamma_rad_mhz: float
    gamma_dark_mhz: float
    beta0: float
    tau0_ns: float
    transition_thz: float = 470.4
    xi: float = 1.0
    p_in: float = 1.0
    phi_p0: float = 0.1

    def __post_init__(self):
        require(self.tau0_ns > 0, "tau0 must be positive, got %s", self.tau0_ns)
        require(self.gamma_rad_mhz > 0 and self.gamma_dark_mhz >= 0, "decay rates must be non-negative with gamma_rad > 0")
        require(abs(1e3 / (2 * np.pi * self.tau0_ns) - (self.gamma_rad_mhz + self.gamma_dark_mhz)) <= 1e-6 * (self.gamma_rad_mhz + self.gamma_dark_mhz),
                "1/tau0 (%.6g MHz) is inconsistent with gamma_rad + gamma_dark (%.6g MHz)", 1e3 / (2 * np.pi * self.tau0_ns), self.gamma_rad_mhz + self.gamma_dark_mhz)
        for name in ("beta0", "xi", "p_in"):
            require(0 <= (v := getattr(self, name)) <= 1, "%s must lie in [0, 1], got %s", name, v)
        require(self.phi_p0 >= 0, "phi_p0 must be non-negative, got %s", self.phi_p0)
        require(self.transition_thz > 0, "transition frequency must be positive")

    @classmethod
    def from_lifetime(cls, tau0_ns: float, beta0: float, dark_ratio: float = 0.0, **kwargs) -> "EmitterParams":
        """Creates an EmitterParams whose radiative and dark rates split 1/tau0 in the ratio `dark_ratio` = gamma_dark/gamma_rad.

        Args:
            tau0_ns (float): Lifetime without cavity enhancement (ns)
            beta0 (float): Debye-Waller factor
            dark_ratio (float, optional): gamma_dark / gamma_rad. Defaults to 0.0.

        Returns:
            EmitterParams: The new instance
        """
        gamma0 = 1e3 / (2 * np.pi * tau0_ns)
        return cls(gamma0 / (1 + dark_ratio), gamma0 * dark_ratio / (1 + dark_ratio), beta0, tau0_ns, **kwargs)

    @property
    def dark_ratio(self) -> float:
        """gamma_dark / gamma_rad"""
        return self.gamma_dark_mhz / self.gamma_rad_mhz

    @property
    def gamma0(self) -> float:
        """Total uncavitied decay rate, 1/ns"""
        return 1.0 / self.tau0_ns

    @property
    def gamma_rad(self) -> float:
        """Radiative decay rate, 1/ns"""
        return per_ns(self.gamma_rad_mhz)


@dataclass(frozen=True)
class CavityCoupling:
    """Emitter-cavity coupling and detection efficiencies"""
    g_mhz: float
    kappa_ghz: float
    gamma_mhz: float
    detuning_ghz: float = 0.0
    eta_zpl0: float = 1.0
    eta_psb: float = 1.0

    def __post_init__(self):
        require(self.g_mhz >= 0, "g must be non-negative, got %s", self.g_mhz)
        require(self.kappa_ghz > 0 and self.gamma_mhz > 0, "kappa and gamma must be positive")
        require(0 <= self.eta_zpl0 <= 1 and 0 <= self.eta_psb <= 1, "efficiencies must lie in [0, 1]")

    @property
    def purcell0(self) -> float:
        """On-resonance ZPL Purcell factor"""
        return purcell_factor(self.g_mhz, self.kappa_ghz, self.gamma_mhz)


class PurcellEstimate(NamedTuple):
    """A Purcell factor inferred from lifetimes"""
    factor: float
    physical: bool
    """`False` if the lifetime ratio implies suppression (F < 1), which this model cannot produce"""


def purcell_factor(g_mhz: ArrayLike, kappa_ghz: float, gamma_mhz: float) -> ArrayLike:
    """ZPL Purcell factor, F = 4g^2/(kappa*gamma) + 1.

    Args:
        g_mhz (ArrayLike): g/2pi in MHz
        kappa_ghz (float): kappa/2pi in GHz
        gamma_mhz (float): gamma/2pi (lifetime-limited linewidth) in MHz

    Returns:
        ArrayLike: F_P^ZPL >= 1
    """
    require(np.all(np.asarray(g_mhz) >= 0) and kappa_ghz > 0 and gamma_mhz > 0, "g must be non-negative, kappa and gamma positive")
    return 4 * np.asarray(g_mhz, dtype=float) ** 2 / (kappa_ghz * 1e3 * gamma_mhz) + 1


def coupling_from_purcell(purcell: float, kappa_ghz: float, gamma_mhz: float) -> float:
    """Inverse of `purcell_factor()`.

    Args:
        purcell (float): F_P^ZPL >= 1
        kappa_ghz (float): kappa/2pi in GHz
        gamma_mhz (float): gamma/2pi in MHz

    Returns:
        float: g/2pi in MHz
    """
    require(purcell >= 1, "Purcell factor must be >= 1, got %s", purcell)
    return float(np.sqrt((purcell - 1) * kappa_ghz * 1e3 * gamma_mhz / 4))


def lifetime_ratio(purcell: ArrayLike, beta0: float, dark_ratio: float = 0.0) -> ArrayLike:
    """tau0/tau' = gamma'/gamma0 = 1 + (F-1)*beta0*gamma_rad/(gamma_rad+gamma_dark).

    Args:
        purcell (ArrayLike): F_P^ZPL
        beta0 (float): Debye-Waller factor
        dark_ratio (float, optional): gamma_dark/gamma_rad; 0 reproduces the gamma_rad >> gamma_dark simplification. Defaults to 0.0.

    Returns:
        ArrayLike: The lifetime ratio
    """
    require(np.all(np.asarray(purcell) >= 1), "Purcell factor must be >= 1")
    return 1 + (np.asarray(purcell, dtype=float) - 1) * beta0 / (1 + dark_ratio)


def purcell_from_lifetimes(tau0_ns: float, tau_prime_ns: float, beta0: float, dark_ratio: float = 0.0) -> PurcellEstimate:
    """Purcell factor from a measured lifetime reduction, F = (1+dark_ratio)/beta0 * (tau0/tau' - 1) + 1.

    Args:
        tau0_ns (float): Lifetime without cavity enhancement
        tau_prime_ns (float): Reduced lifetime
        beta0 (float): Debye-Waller factor
        dark_ratio (float, optional): gamma_dark/gamma_rad. Defaults to 0.0.

    Returns:
        PurcellEstimate: The factor, flagged unphysical if tau' > tau0.
    """
    require(beta0 > 0 and tau0_ns > 0 and tau_prime_ns > 0, "beta0 and lifetimes must be positive")
    if not (physical := tau_prime_ns <= tau0_ns):
        log.warning("tau' = %.4g ns exceeds tau0 = %.4g ns; the inferred Purcell factor is below 1", tau_prime_ns, tau0_ns)
    return PurcellEstimate((1 + dark_ratio) * (tau0_ns / tau_prime_ns - 1) / beta0 + 1, physical)


def collectable_zpl_fraction(purcell: ArrayLike, beta0: float, dark_ratio: float = 0.0) -> ArrayLike:
    """Fraction of decays that emit a ZPL photon into the cavity mode, (F-1)*beta0 / (F*beta0 + 1 - beta0 + dark_ratio).

    Args:
        purcell (ArrayLike): F_P^ZPL
        beta0 (float): Debye-Waller factor
        dark_ratio (float, optional): gamma_dark/gamma_rad. Defaults to 0.0.

    Returns:
        ArrayLike: The branching fraction
    """
    f = np.asarray(purcell, dtype=float)
    return (f - 1) * beta0 / (f * beta0 + 1 - beta0 + dark_ratio)


def psb_fraction(purcell: ArrayLike, beta0: float, dark_ratio: float = 0.0) -> ArrayLike:
    """Fraction of decays that emit into the phonon sideband, (1 - beta0) / (F*beta0 + 1 - beta0 + dark_ratio)."""
    return (1 - beta0) / (np.asarray(purcell, dtype=float) * beta0 + 1 - beta0 + dark_ratio)


def free_space_zpl_fraction(purcell: ArrayLike, beta0: float, dark_ratio: float = 0.0) -> ArrayLike:
    """Fraction of decays into ZPL modes other than the cavity mode, beta0 / (F*beta0 + 1 - beta0 + dark_ratio)."""
    return beta0 / (np.asarray(purcell, dtype=float) * beta0 + 1 - beta0 + dark_ratio)


def lorentzian_transmission(delta_ghz: ArrayLike, kappa_ghz: float) -> ArrayLike:
    """Normalized cavity transmission at detuning `delta_ghz`, T = (kappa^2/4) / (kappa^2/4 + delta^2).

    Args:
        delta_ghz (ArrayLike): Cavity-transition detuning (GHz)
        kappa_ghz (float): Cavity linewidth, full width (GHz)

    Returns:
        ArrayLike: T in (0, 1]
    """
    require(kappa_ghz > 0, "kappa must be positive, got %s", kappa_ghz)
    hw2 = kappa_ghz ** 2 / 4
    return hw2 / (hw2 + np.asarray(delta_ghz, dtype=float) ** 2)


def detuned_purcell(purcell0: float, delta_ghz: ArrayLike, kappa_ghz: float) -> ArrayLike:
    """F(delta) = (F(0) - 1) * T(delta) + 1"""
    require(purcell0 >= 1, "Purcell factor must be >= 1, got %s", purcell0)
    return (purcell0 - 1) * lorentzian_transmission(delta_ghz, kappa_ghz) + 1


def detuned_eta_zpl(eta0: float, delta_ghz: ArrayLike, kappa_ghz: float) -> ArrayLike:
    """eta_zpl(delta) = eta_zpl(0) * T(delta)"""
    return eta0 * lorentzian_transmission(delta_ghz, kappa_ghz)


def excitation_probability(phi_p0: float, delta_ghz: ArrayLike, kappa_ghz: float, weak_limit: bool = True, form: ExcitationForm = ExcitationForm.PRINTED) -> ArrayLike:
    """Probability that one resonant pulse excites the emitter.  The pulse area scales with sqrt(T) because the Rabi frequency follows the square root of the intracavity power.

    Args:
        phi_p0 (float): On-resonance Rabi angle of the pulse (radians)
        delta_ghz (ArrayLike): Cavity-laser detuning (GHz)
        kappa_ghz (float): Cavity linewidth (GHz)
        weak_limit (bool, optional): Use the small-angle expansion. Defaults to True.
        form (ExcitationForm, optional): `PRINTED` (sin) or `SQUARED` (sin^2). Defaults to ExcitationForm.PRINTED.

    Returns:
        ArrayLike: p_ex in [0, 1]
    """
    require(phi_p0 >= 0, "phi_p0 must be non-negative, got %s", phi_p0)
    half_angle = phi_p0 * np.sqrt(lorentzian_transmission(delta_ghz, kappa_ghz)) / 2
    p = half_angle if weak_limit else np.sin(half_angle)
    if form is ExcitationForm.SQUARED:
        p = p ** 2
    return np.clip(p, 0.0, 1.0)


def decay_rate(purcell: ArrayLike, emitter: EmitterParams) -> ArrayLike:
    """Cavity-modified total decay rate gamma' = F*beta0*gamma_rad + (1-beta0)*gamma_rad + gamma_dark, in 1/ns."""
    return emitter.gamma_rad * (np.asarray(purcell, dtype=float) * emitter.beta0 + 1 - emitter.beta0) + per_ns(emitter.gamma_dark_mhz)


def count_rate_zpl(t_ns: ArrayLike, emitter: EmitterParams, coupling: CavityCoupling, p_ex: float) -> ArrayLike:
    """Detected ZPL photon rate (per ns, per pulse) at time `t_ns` after excitation, for the detuning stored in `coupling`.

    Args:
        t_ns (ArrayLike): Time after the pulse, ns (>= 0)
        emitter (EmitterParams): The emitter
        coupling (CavityCoupling): Coupling, detuning and efficiencies
        p_ex (float): Excitation probability of the pulse

    Returns:
        ArrayLike: C_zpl(t)
    """
    require(np.all(np.asarray(t_ns) >= 0), "t must be non-negative")
    f = detuned_purcell(coupling.purcell0, coupling.detuning_ghz, coupling.kappa_ghz)
    eta = detuned_eta_zpl(coupling.eta_zpl0, coupling.detuning_ghz, coupling.kappa_ghz)
    return p_ex * (f - 1) * emitter.beta0 * eta * emitter.gamma_rad * np.exp(-decay_rate(f, emitter) * np.asarray(t_ns, dtype=float))


def count_rate_psb(t_ns: ArrayLike, emitter: EmitterParams, coupling: CavityCoupling, p_ex: float) -> ArrayLike:
    """Detected PSB photon rate (per ns, per pulse) at time `t_ns` after excitation.  Same arguments as `count_rate_zpl()`."""
    require(np.all(np.asarray(t_ns) >= 0), "t must be non-negative")
    f = detuned_purcell(coupling.purcell0, coupling.detuning_ghz, coupling.kappa_ghz)
    return p_ex * (1 - emitter.beta0) * coupling.eta_psb * emitter.gamma_rad * np.exp(-decay_rate(f, emitter) * np.asarray(t_ns, dtype=float))
