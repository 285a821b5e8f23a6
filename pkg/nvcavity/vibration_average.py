"""Averages the emitter-cavity model over a Gaussian distribution of cavity lengths.  Produces vibration-broadened lineshapes, decay
curves, apparent lifetimes and total counts across a detuning sweep, and sorts timestamped photons by cryostat phase."""

import logging

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import brentq
from scipy.signal import fftconvolve
from scipy.special import voigt_profile

from .constants import DEFAULTS, FWHM_PER_SIGMA
from .core import ConvergenceError, NVCavityError, ValidationError, fit_decay, loglinear_lifetime, require
from .emitter_purcell import CavityCoupling, EmitterParams, ExcitationForm, decay_rate, detuned_eta_zpl, detuned_purcell, excitation_probability, lorentzian_transmission
from .layered_cavity import CavityResponse

log = logging.getLogger(__name__)


class Quadrature(Enum):
    AUTO = "auto"
    HERMITE = "hermite"
    TRAPEZOID = "trapezoid"


class EnsembleShape(Enum):
    GAUSSIAN = "gaussian"
    LORENTZIAN = "lorentzian"
    TOPHAT = "tophat"


@dataclass(frozen=True)
class VibrationSpec:
    """rms cavity-length jitter and how to integrate over it"""
    sigma_nm: float
    truncation: float = DEFAULTS.TRUNCATION
    quadrature_order: int = DEFAULTS.QUAD_ORDER
    method: Quadrature = Quadrature.AUTO
    convergence_rtol: float = DEFAULTS.CONVERGENCE_RTOL

    def __post_init__(self):
        require(self.sigma_nm >= 0, "sigma must be non-negative, got %s nm", self.sigma_nm)
        require(self.truncation >= 3, "truncation must be at least 3 sigma, got %s", self.truncation)
        require(self.quadrature_order >= 16, "quadrature order must be at least 16, got %s", self.quadrature_order)
        require(self.convergence_rtol > 0, "convergence tolerance must be positive, got %s", self.convergence_rtol)


@dataclass(frozen=True)
class EnsembleSpec:
    """Inhomogeneous spread of transition frequencies across the probed emitters.  `width_ghz` is a full width at half maximum."""
    width_ghz: float = 0.0
    enabled: bool = False
    shape: EnsembleShape = EnsembleShape.GAUSSIAN

    def __post_init__(self):
        require(not self.enabled or self.width_ghz > 0, "an enabled ensemble needs a positive width, got %s GHz", self.width_ghz)


@dataclass(frozen=True)
class SweepCurves:
    """Model counts and apparent lifetime across a length (detuning) sweep"""
    l_det_nm: np.ndarray
    detuning_ghz: np.ndarray
    counts: np.ndarray
    lifetime_ns: np.ndarray
    lifetime_err_ns: np.ndarray
    psb_counts: Optional[np.ndarray] = None
    psb_lifetime_ns: Optional[np.ndarray] = None
    t_ns: Optional[np.ndarray] = field(default=None, repr=False)
    decay: Optional[np.ndarray] = field(default=None, repr=False)

    def columns(self) -> dict[str, np.ndarray]:
        """Column map for `core.write_csv()`"""
        out = {"l_det_nm": self.l_det_nm, "detuning_ghz": self.detuning_ghz, "counts_per_pulse": self.counts, "lifetime_ns": self.lifetime_ns, "lifetime_err_ns": self.lifetime_err_ns}
        if self.psb_counts is not None:
            out |= {"psb_counts_per_pulse": self.psb_counts, "psb_lifetime_ns": self.psb_lifetime_ns}
        return out


@dataclass(frozen=True)
class CryostatPhaseProfile:
    """rms length jitter tabulated over one coldhead period, with named phase windows"""
    period_s: float
    phase: np.ndarray
    sigma_nm: np.ndarray
    windows: dict[str, tuple[float, float]]
    synthetic_profile: bool = False

    def __post_init__(self):
        require(self.period_s > 0, "period must be positive")
        require(self.phase.size == self.sigma_nm.size >= 2 and np.all(np.diff(self.phase) > 0) and self.phase[0] >= 0 and self.phase[-1] <= 1,
                "phase must be a strictly increasing grid within [0, 1] matching sigma")
        require(np.all(self.sigma_nm > 0), "sigma(phase) must be positive")

        spans = sorted(self.windows.values())
        require(all(0 <= a < b <= 1 for a, b in spans), "windows must lie within one period")
        require(all(spans[i][1] <= spans[i + 1][0] for i in range(len(spans) - 1)), "windows must be disjoint")

    @classmethod
    def synthetic(cls, period_s: float = 1.0, base_nm: float = 0.06) -> "CryostatPhaseProfile":
        """A representative, synthetic coldhead profile: a quiet baseline with two vibration spikes, swinging by roughly 5.7x.

        Args:
            period_s (float, optional): The coldhead period. Defaults to 1.0.
            base_nm (float, optional): The quiet-phase rms jitter. Defaults to 0.06.

        Returns:
            CryostatPhaseProfile: The profile, with windows "high" (first spike) and "low" (quiet stretch)
        """
        phase = np.linspace(0, 1, 201)
        sigma = base_nm * (1 + 4.67 * np.exp(-((phase - 0.12) / 0.04) ** 2) + 3.33 * np.exp(-((phase - 0.58) / 0.05) ** 2))
        return cls(period_s, phase, sigma, {"high": (0.06, 0.18), "low": (0.70, 0.95)}, True)

    def sigma_at(self, phase) -> np.ndarray:
        """Periodic linear interpolation of sigma (nm) at `phase` (fractions of a period)"""
        return np.interp(np.mod(phase, 1.0), self.phase, self.sigma_nm, period=1.0)

    def window_of(self, phase) -> np.ndarray:
        """Window label for each phase, or "" outside every window"""
        p = np.mod(np.asarray(phase, dtype=float), 1.0)
        out = np.full(p.shape, "", dtype=object)
        for label, (a, b) in self.windows.items():
            out[(p >= a) & (p < b)] = label
        return out


class WindowStats(NamedTuple):
    """Counts per pulse and lifetime of photons collected in one cryostat-phase window"""
    label: str
    n_photons: int
    n_pulses: int
    counts_per_pulse: float
    lifetime_ns: float
    lifetime_err_ns: float
    flagged: bool
    reason: str = ""


##################################################################################################
##################################### Q U A D R A T U R E ########################################
##################################################################################################


def f_vib(dl_nm, sigma_nm: float) -> np.ndarray:
    """Gaussian probability density of a cavity-length excursion `dl_nm`.

    Args:
        dl_nm (ArrayLike): Length excursion (nm)
        sigma_nm (float): rms jitter (nm), > 0

    Returns:
        np.ndarray: The density (1/nm)
    """
    require(sigma_nm > 0, "sigma must be positive for a density; treat sigma = 0 as a delta function")
    return np.exp(-np.asarray(dl_nm, dtype=float) ** 2 / (2 * sigma_nm ** 2)) / np.sqrt(2 * np.pi * sigma_nm ** 2)


def _trapezoid_nodes(half_width: float, h: float, density) -> tuple[np.ndarray, np.ndarray]:
    n = int(np.ceil(2 * half_width / h)) + 1
    x = np.linspace(-half_width, half_width, max(n, 3))
    w = density(x) * (x[1] - x[0])
    w[[0, -1]] *= 0.5
    return x, w / w.sum()


def length_nodes(sigma_nm: float, kappa_len_nm: float, spec: VibrationSpec, refine: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and normalized weights for averaging over the length distribution.

    Gauss-Hermite is used while the cavity line spans at least one sigma in length; narrower lines get a dense trapezoid rule over
    +/- truncation*sigma whose step resolves the line.

    Args:
        sigma_nm (float): rms jitter, 0 for a delta function
        kappa_len_nm (float): Cavity half-linewidth expressed as a length, (kappa/2)/|slope|
        spec (VibrationSpec): Quadrature settings
        refine (bool, optional): Double the order or halve the step, for convergence checks. Defaults to False.

    Returns:
        tuple[np.ndarray, np.ndarray]: (length offsets in nm, weights summing to 1)
    """
    if sigma_nm == 0:
        return np.zeros(1), np.ones(1)

    if spec.method is Quadrature.HERMITE or (spec.method is Quadrature.AUTO and kappa_len_nm >= sigma_nm):
        x, w = hermegauss(spec.quadrature_order * (2 if refine else 1))
        return sigma_nm * x, w / w.sum()

    h = min(sigma_nm / 4, kappa_len_nm / 5) / (2 if refine else 1)
    return _trapezoid_nodes(spec.truncation * sigma_nm, h, lambda x: f_vib(x, sigma_nm))


def _convolved_offsets(sigma_ghz: float, ensemble: EnsembleSpec, kappa_ghz: float, truncation: float, refine: bool) -> tuple[np.ndarray, np.ndarray]:
    """Detuning offsets (GHz) and weights of a Gaussian jitter convolved with a Lorentzian or top-hat ensemble on one uniform grid"""
    hw = ensemble.width_ghz / 2
    h = min(kappa_ghz / 10, hw / 10, sigma_ghz / 4 if sigma_ghz > 0 else np.inf) / (2 if refine else 1)

    m = int(np.ceil((20 * hw if ensemble.shape is EnsembleShape.LORENTZIAN else hw) / h))
    x = np.arange(-m, m + 1) * h
    p = hw / np.pi / (x ** 2 + hw ** 2) if ensemble.shape is EnsembleShape.LORENTZIAN else (np.abs(x) <= hw).astype(float)

    if sigma_ghz > 0:
        k = int(np.ceil(truncation * sigma_ghz / h))
        p = np.clip(fftconvolve(p, np.exp(-(np.arange(-k, k + 1) * h) ** 2 / (2 * sigma_ghz ** 2))), 0, None)
        x = np.arange(-(m + k), m + k + 1) * h

    return x, p / p.sum()


def _offsets(response: CavityResponse, kappa_ghz: float, vibration: VibrationSpec, ensemble: Optional[EnsembleSpec], refine: bool) -> tuple[np.ndarray, np.ndarray]:
    """Combined detuning offsets (GHz) and weights from length jitter and the emitter ensemble.  A Gaussian ensemble adds to the jitter in
    quadrature; other shapes are convolved numerically."""
    slope = abs(response.slope_ghz_per_nm)
    sigma = vibration.sigma_nm

    if ensemble and ensemble.enabled:
        if ensemble.shape is not EnsembleShape.GAUSSIAN:
            return _convolved_offsets(sigma * slope, ensemble, kappa_ghz, vibration.truncation, refine)
        sigma = np.hypot(sigma, ensemble.width_ghz / FWHM_PER_SIGMA / slope)

    dl, w = length_nodes(sigma, kappa_ghz / 2 / slope, vibration, refine)
    return response.slope_ghz_per_nm * dl, w


##################################################################################################
####################################### L I N E S H A P E ########################################
##################################################################################################


def broadened_lineshape(nu_ghz, response: CavityResponse, sigma_nm: float) -> np.ndarray:
    """Cavity transmission seen through length jitter: a Lorentzian of FWHM kappa convolved with a Gaussian of rms sigma*|dnu/dL|,
    normalized so that sigma = 0 returns the bare Lorentzian.

    Args:
        nu_ghz (ArrayLike): Laser-cavity detuning (GHz)
        response (CavityResponse): Linewidth and dispersion slope
        sigma_nm (float): rms length jitter (nm)

    Returns:
        np.ndarray: Effective transmission
    """
    require(sigma_nm >= 0, "sigma must be non-negative")
    if sigma_nm == 0:
        return lorentzian_transmission(nu_ghz, response.kappa_ghz)
    hw = response.kappa_ghz / 2
    return np.pi * hw * voigt_profile(np.asarray(nu_ghz, dtype=float), sigma_nm * abs(response.slope_ghz_per_nm), hw)


def vibration_linewidth(response: CavityResponse, sigma_nm: float) -> float:
    """FWHM (GHz) of the vibration-broadened cavity line"""
    peak = broadened_lineshape(0.0, response, sigma_nm)
    upper = response.kappa_ghz + FWHM_PER_SIGMA * sigma_nm * abs(response.slope_ghz_per_nm)
    return 2 * brentq(lambda x: broadened_lineshape(x, response, sigma_nm) - peak / 2, 0.0, upper, xtol=1e-12 * upper)


def monte_carlo_lineshape(nu_ghz, response: CavityResponse, sigma_nm: float, n_samples: int = 200_000, seed: int = 0) -> np.ndarray:
    """Sampling estimate of `broadened_lineshape()`: the transmission averaged over random cavity lengths, one sample set for every
    detuning."""
    dl = np.random.default_rng(seed).normal(0.0, sigma_nm, n_samples)
    nu = np.atleast_1d(np.asarray(nu_ghz, dtype=float))
    return np.array([lorentzian_transmission(x - response.slope_ghz_per_nm * dl, response.kappa_ghz).mean() for x in nu])


def fwhm(x: np.ndarray, y: np.ndarray) -> float:
    """Full width at half maximum of a single-peaked sampled curve, by linear interpolation of the half-maximum crossings"""
    i = int(np.argmax(y))
    half = y[i] / 2
    above = np.flatnonzero(y >= half)
    lo, hi = above[0], above[-1]
    require(0 < lo and hi < y.size - 1, "the curve does not fall below half maximum inside the sampled range")
    xl = np.interp(half, [y[lo - 1], y[lo]], [x[lo - 1], x[lo]])
    xr = np.interp(half, [y[hi + 1], y[hi]], [x[hi + 1], x[hi]])
    return float(xr - xl)


##################################################################################################
########################################## S W E E P S ###########################################
##################################################################################################


def decay_components(response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, vibration: VibrationSpec, l_det_nm,
                     ensemble: Optional[EnsembleSpec] = None, resonant: bool = False, weak_limit: bool = True, form: ExcitationForm = ExcitationForm.PRINTED,
                     refine: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expands the length-averaged decay into weighted exponentials, C(t) = sum_k amp_k * exp(-rate_k * t).

    Args:
        response (CavityResponse): Dispersion slope of the cavity (its kappa should match `coupling`)
        emitter (EmitterParams): The emitter
        coupling (CavityCoupling): Coupling and efficiencies at zero detuning
        vibration (VibrationSpec): Length jitter and quadrature settings
        l_det_nm (ArrayLike): Sweep positions as equivalent length detunings (nm)
        ensemble (Optional[EnsembleSpec], optional): Inhomogeneous broadening; off-resonant excitation only. Defaults to None.
        resonant (bool, optional): Resonant excitation through the cavity (excitation follows sqrt(T)). Defaults to False.
        weak_limit (bool, optional): Weak-excitation form of the excitation probability. Defaults to True.
        form (ExcitationForm, optional): Excitation probability variant. Defaults to ExcitationForm.PRINTED.
        refine (bool, optional): Use the refined quadrature. Defaults to False.

    Raises:
        ValidationError: If an ensemble is combined with resonant excitation.

    Returns:
        tuple[np.ndarray, np.ndarray, np.ndarray]: ZPL amplitudes (per ns), PSB amplitudes (per ns) and decay rates (1/ns), each of shape
        (len(l_det_nm), number of nodes); quadrature weights are folded into the amplitudes.
    """
    if resonant and ensemble and ensemble.enabled:
        raise ValidationError("resonant excitation addresses a single emitter; disable the ensemble")
    if abs(response.kappa_ghz - coupling.kappa_ghz) > 0.01 * coupling.kappa_ghz:
        log.warning("Cavity response kappa (%.4g GHz) differs from the coupling kappa (%.4g GHz); using the latter", response.kappa_ghz, coupling.kappa_ghz)

    l_det = np.atleast_1d(np.asarray(l_det_nm, dtype=float))
    offsets, w = _offsets(response, coupling.kappa_ghz, vibration, ensemble, refine)
    delta = response.slope_ghz_per_nm * l_det[:, None] + offsets[None, :]

    kappa = coupling.kappa_ghz
    f = detuned_purcell(coupling.purcell0, delta, kappa)
    p_ex = emitter.p_in * (excitation_probability(emitter.phi_p0, delta, kappa, weak_limit, form) if resonant else 1.0)

    zpl = w * p_ex * (f - 1) * emitter.beta0 * detuned_eta_zpl(coupling.eta_zpl0, delta, kappa) * emitter.gamma_rad
    psb = w * p_ex * (1 - emitter.beta0) * coupling.eta_psb * emitter.gamma_rad
    return zpl, np.broadcast_to(psb, zpl.shape), decay_rate(f, emitter)


def _binned(amps: np.ndarray, rates: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Counts per model bin: integral of sum_k amp_k exp(-rate_k t) between consecutive edges"""
    e = np.exp(-rates[..., None] * edges)
    return np.einsum("gk,gkb->gb", amps / rates, e[..., :-1] - e[..., 1:])


def _summarize(amps: np.ndarray, rates: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(total counts, apparent lifetime, binned decay) per sweep point"""
    binned = _binned(amps, rates, edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    tau = np.full(amps.shape[0], np.nan)
    ok = binned.min(axis=1) > 0
    tau[ok] = loglinear_lifetime(centers, binned[ok])
    return (amps / rates).sum(axis=1), tau, binned


def _sweep(response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, vibration: VibrationSpec, l_det_nm, ensemble: Optional[EnsembleSpec],
           resonant: bool, weak_limit: bool, form: ExcitationForm, fit_window_ns: tuple[float, float], model_bin_ns: float, check_convergence: bool,
           keep_decay: bool) -> SweepCurves:
    lo, hi = fit_window_ns
    require(0 <= lo < hi and model_bin_ns > 0, "invalid fit window %s / bin %s", fit_window_ns, model_bin_ns)
    edges = np.arange(lo, hi + 0.5 * model_bin_ns, model_bin_ns)
    l_det = np.atleast_1d(np.asarray(l_det_nm, dtype=float))

    reach = np.abs(l_det).max()
    if check_convergence and 3 * (width := vibration_linewidth(response, vibration.sigma_nm) / abs(response.slope_ghz_per_nm)) > reach:
        log.warning("Sweep range +/-%.3g nm covers less than 3x the broadened width (%.3g nm)", reach, width)

    zpl, psb, rates = decay_components(response, emitter, coupling, vibration, l_det, ensemble, resonant, weak_limit, form)
    counts, tau, binned = _summarize(zpl, rates, edges)
    psb_counts, psb_tau, _ = _summarize(psb, rates, edges)

    if check_convergence and vibration.sigma_nm > 0:
        z2, _, r2 = decay_components(response, emitter, coupling, vibration, l_det, ensemble, resonant, weak_limit, form, refine=True)
        c2, t2, _ = _summarize(z2, r2, edges)
        sig = counts > 1e-6 * counts.max()
        change = max(np.max(np.abs(c2 - counts)[sig] / counts[sig], initial=0.0), np.nanmax(np.abs(t2 - tau)[sig] / tau[sig], initial=0.0))
        log.debug("Quadrature refinement changed results by %.2e", change)
        if change > vibration.convergence_rtol:
            raise ConvergenceError(f"quadrature did not converge: refinement changed results by {change:.2e}",
                                   {"max_rel_change": float(change), "rtol": vibration.convergence_rtol, "sigma_nm": vibration.sigma_nm, "nodes": zpl.shape[1], "method": vibration.method.value})

    return SweepCurves(l_det, response.slope_ghz_per_nm * l_det, counts, tau, np.zeros_like(tau), psb_counts if resonant else None, psb_tau if resonant else None,
                       edges[:-1] if keep_decay else None, binned if keep_decay else None)


def offresonant_sweep(response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, vibration: VibrationSpec, l_det_nm,
                      ensemble: Optional[EnsembleSpec] = None, fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS, model_bin_ns: float = DEFAULTS.MODEL_BIN_NS,
                      check_convergence: bool = True, keep_decay: bool = False) -> SweepCurves:
    """Cavity-collected ZPL counts and apparent lifetime across a length sweep under off-resonant (detuning-independent) excitation.

    Args:
        response (CavityResponse): Dispersion slope
        emitter (EmitterParams): The emitter; `p_in` scales the counts
        coupling (CavityCoupling): Coupling and efficiencies
        vibration (VibrationSpec): Length jitter
        l_det_nm (ArrayLike): Sweep grid (nm)
        ensemble (Optional[EnsembleSpec], optional): Inhomogeneous broadening. Defaults to None.
        fit_window_ns (tuple[float, float], optional): Window of the apparent-lifetime fit. Defaults to DEFAULTS.FIT_WINDOW_NS.
        model_bin_ns (float, optional): Bin width of the model decay curve. Defaults to DEFAULTS.MODEL_BIN_NS.
        check_convergence (bool, optional): Compare against a refined quadrature. Defaults to True.
        keep_decay (bool, optional): Store the binned decay curves in the result. Defaults to False.

    Raises:
        ConvergenceError: If refining the quadrature changes the counts or lifetime by more than 0.1%.

    Returns:
        SweepCurves: counts per pulse and lifetime at each grid point
    """
    return _sweep(response, emitter, coupling, vibration, l_det_nm, ensemble, False, True, ExcitationForm.PRINTED, fit_window_ns, model_bin_ns, check_convergence, keep_decay)


def resonant_sweep(response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, vibration: VibrationSpec, l_det_nm,
                   weak_limit: bool = True, form: ExcitationForm = ExcitationForm.PRINTED, fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS,
                   model_bin_ns: float = DEFAULTS.MODEL_BIN_NS, check_convergence: bool = True, keep_decay: bool = False) -> SweepCurves:
    """ZPL and PSB counts and apparent lifetime across a length sweep when the emitter is excited through the cavity.  The ZPL integrand
    carries T^(5/2) (Purcell, collection and excitation) and the PSB integrand only sqrt(T).

    Same arguments as `offresonant_sweep()`, plus the excitation options of `emitter_purcell.excitation_probability()`.

    Returns:
        SweepCurves: ZPL curves plus `psb_counts` and `psb_lifetime_ns`
    """
    return _sweep(response, emitter, coupling, vibration, l_det_nm, None, True, weak_limit, form, fit_window_ns, model_bin_ns, check_convergence, keep_decay)


def monte_carlo_counts(response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, sigma_nm: float, l_det_nm: float, resonant: bool = False,
                       n_samples: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Sampling oracle for the total ZPL counts at one sweep point.

    Returns:
        tuple[float, float]: (mean counts per pulse, standard error)
    """
    dl = np.random.default_rng(seed).normal(0.0, sigma_nm, n_samples)
    delta = response.slope_ghz_per_nm * (l_det_nm + dl)
    kappa = coupling.kappa_ghz
    f = detuned_purcell(coupling.purcell0, delta, kappa)
    p_ex = emitter.p_in * (excitation_probability(emitter.phi_p0, delta, kappa) if resonant else 1.0)
    c = p_ex * (f - 1) * emitter.beta0 * detuned_eta_zpl(coupling.eta_zpl0, delta, kappa) * emitter.gamma_rad / decay_rate(f, emitter)
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(n_samples))


##################################################################################################
################################ C R Y O S T A T   P H A S E #####################################
##################################################################################################


def phase_forward_model(profile: CryostatPhaseProfile, response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, vibration: VibrationSpec,
                        samples_per_window: int = 24, fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS, model_bin_ns: float = DEFAULTS.MODEL_BIN_NS) -> dict[str, tuple[float, float]]:
    """Predicted on-resonance counts per pulse and apparent lifetime in each window of a cryostat-phase profile, averaging the resonant
    model over the sigma values the window passes through.

    Args:
        profile (CryostatPhaseProfile): sigma over the coldhead period
        response (CavityResponse): Dispersion slope
        emitter (EmitterParams): The emitter
        coupling (CavityCoupling): Coupling and efficiencies
        vibration (VibrationSpec): Quadrature settings; its sigma is replaced by the profile's
        samples_per_window (int, optional): Phases sampled per window. Defaults to 24.

    Returns:
        dict[str, tuple[float, float]]: window label -> (ZPL counts per pulse, apparent lifetime in ns)
    """
    edges = np.arange(fit_window_ns[0], fit_window_ns[1] + 0.5 * model_bin_ns, model_bin_ns)
    out = {}
    for label, (a, b) in profile.windows.items():
        counts, binned = [], []
        for s in profile.sigma_at(np.linspace(a, b, samples_per_window, endpoint=False) + (b - a) / (2 * samples_per_window)):
            z, _, r = decay_components(response, emitter, coupling, VibrationSpec(float(s), vibration.truncation, vibration.quadrature_order, vibration.method), 0.0, resonant=True)
            c, _, d = _summarize(z, r, edges)
            counts.append(c[0])
            binned.append(d[0])
        out[label] = (float(np.mean(counts)), float(loglinear_lifetime(0.5 * (edges[:-1] + edges[1:]), np.mean(binned, axis=0))))
        log.debug("Window '%s': %.4g counts/pulse, tau = %.4g ns", label, *out[label])

    return out


def _window_stats(label: str, delays_ns: np.ndarray, n_pulses: int, min_photons: int, bin_ns: float, fit_window_ns: tuple[float, float]) -> WindowStats:
    n = delays_ns.size
    cpp = n / n_pulses if n_pulses else np.nan
    if n < min_photons or not n_pulses:
        log.warning("Window '%s' has %d photon(s) over %d pulse(s); flagging it", label, n, n_pulses)
        return WindowStats(label, n, n_pulses, cpp, np.nan, np.nan, True, f"fewer than {min_photons} photons")

    edges = np.arange(fit_window_ns[0], fit_window_ns[1] + 0.5 * bin_ns, bin_ns)
    hist, _ = np.histogram(delays_ns, edges)
    try:
        fit = fit_decay(edges[:-1], hist, bin_ns)
    except NVCavityError as e:
        log.warning("Lifetime fit failed in window '%s': %s", label, e)
        return WindowStats(label, n, n_pulses, cpp, np.nan, np.nan, True, f"lifetime fit failed: {e}")

    return WindowStats(label, n, n_pulses, cpp, fit["tau"], fit.error("tau"), False)


def phase_resolved_stats(photon_ps: np.ndarray, pulse_ps: np.ndarray, sync_ps: np.ndarray, profile: CryostatPhaseProfile, min_photons: int = DEFAULTS.MIN_PHOTONS,
                         bin_ns: float = DEFAULTS.TCSPC_BIN_NS, fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS) -> dict[str, WindowStats]:
    """Sorts photons and pulses into cryostat-phase windows and reports counts per pulse and a fitted lifetime for each window, plus an
    "all" aggregate.  Each photon belongs to the pulse and coldhead sync that precede it.

    Args:
        photon_ps (np.ndarray): Photon arrival times (ps)
        pulse_ps (np.ndarray): Excitation pulse times (ps), increasing
        sync_ps (np.ndarray): Coldhead sync times (ps), increasing
        profile (CryostatPhaseProfile): Supplies the period and the windows
        min_photons (int, optional): Windows with fewer photons are flagged. Defaults to DEFAULTS.MIN_PHOTONS.
        bin_ns (float, optional): Histogram bin for the lifetime fit. Defaults to DEFAULTS.TCSPC_BIN_NS.
        fit_window_ns (tuple[float, float], optional): Delay window of the lifetime fit. Defaults to DEFAULTS.FIT_WINDOW_NS.

    Raises:
        ValidationError: If there are no sync events, or pulse or sync times are not increasing.

    Returns:
        dict[str, WindowStats]: Statistics keyed by window label, plus "all"
    """
    photon_ps, pulse_ps, sync_ps = (np.asarray(a, dtype=float) for a in (photon_ps, pulse_ps, sync_ps))
    if not sync_ps.size:
        raise ValidationError("no coldhead sync events; cannot assign cryostat phase")
    require(np.all(np.diff(sync_ps) > 0) and np.all(np.diff(pulse_ps) > 0), "sync and pulse times must be strictly increasing")
    require(pulse_ps.size > 0, "no excitation pulses")

    period_ps = profile.period_s * 1e12
    pulses = pulse_ps[pulse_ps >= sync_ps[0]]
    pulse_phase = (pulses - sync_ps[np.searchsorted(sync_ps, pulses, "right") - 1]) / period_ps

    photons = photon_ps[photon_ps >= pulse_ps[0]]
    owner = pulse_ps[np.searchsorted(pulse_ps, photons, "right") - 1]
    photons, owner = photons[keep := owner >= sync_ps[0]], owner[keep]
    if (dropped := photon_ps.size - photons.size):
        log.debug("Dropped %d photon(s) whose pulse precedes the first sync", dropped)
    delays = (photons - owner) * 1e-3
    photon_phase = (owner - sync_ps[np.searchsorted(sync_ps, owner, "right") - 1]) / period_ps

    pulse_windows, photon_windows = profile.window_of(pulse_phase), profile.window_of(photon_phase)
    out = {label: _window_stats(label, delays[photon_windows == label], int((pulse_windows == label).sum()), min_photons, bin_ns, fit_window_ns) for label in profile.windows}
    out["all"] = _window_stats("all", delays, pulses.size, min_photons, bin_ns, fit_window_ns)
    return out
