"""Parameter estimation for detuning sweeps, lifetime histograms, PLE scans, pulsed autocorrelation and polarization data, plus the
synthetic-data generators used to check every fit."""

import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from scipy.optimize import curve_fit

from .constants import DEFAULTS, FWHM_PER_SIGMA
from .core import ConvergenceError, FitResult, ValidationError, fit_decay, poisson_sigma, read_csv, require, weighted_least_squares
from .emitter_purcell import CavityCoupling, EmitterParams, coupling_from_purcell
from .layered_cavity import CavityResponse
from .vibration_average import (CryostatPhaseProfile, EnsembleShape, EnsembleSpec, Quadrature, VibrationSpec, decay_components, fwhm, offresonant_sweep,
                                resonant_sweep)

log = logging.getLogger(__name__)

##################################################################################################
######################################## D A T A S E T S #########################################
##################################################################################################


@dataclass(frozen=True)
class SweepDataset:
    """Observed counts and lifetime across a cavity detuning sweep, possibly stitched from several sessions"""
    detuning_ghz: np.ndarray
    counts: np.ndarray
    counts_err: np.ndarray
    lifetime_ns: np.ndarray
    lifetime_err_ns: np.ndarray
    mode: str = "offresonant"
    session: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.detuning_ghz.size
        require(all(a.size == n for a in (self.counts, self.counts_err, self.lifetime_ns, self.lifetime_err_ns)), "sweep columns must have equal length")
        require(np.all(self.counts_err > 0) and np.all(self.lifetime_err_ns > 0), "sweep uncertainties must be positive")
        require(self.mode in ("offresonant", "resonant"), "unknown excitation mode '%s'", self.mode)
        if self.session is None:
            object.__setattr__(self, "session", np.zeros(n, dtype=int))
        for s in np.unique(self.session):
            d = np.diff(self.detuning_ghz[self.session == s])
            require(np.all(d > 0) or np.all(d < 0), "detunings of session %s must be strictly monotone", s)

    @property
    def sessions(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.session))

    def columns(self) -> dict[str, np.ndarray]:
        return {"detuning_ghz": self.detuning_ghz, "counts_per_pulse": self.counts, "counts_err": self.counts_err, "lifetime_ns": self.lifetime_ns,
                "lifetime_err_ns": self.lifetime_err_ns, "session": self.session}

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "SweepDataset":
        """Reads a sweep CSV.  The excitation mode comes from the `mode` metadata line, defaulting to off-resonant.

        Raises:
            SchemaError: If the file is missing, malformed or lacks a required column.
        """
        cols, meta = read_csv(path, ("detuning_ghz", "counts_per_pulse", "counts_err", "lifetime_ns", "lifetime_err_ns"), ("session",))
        session = cols["session"].astype(int) if "session" in cols else None
        return cls(cols["detuning_ghz"], cols["counts_per_pulse"], cols["counts_err"], cols["lifetime_ns"], cols["lifetime_err_ns"], meta.get("mode", "offresonant"), session)


@dataclass(frozen=True)
class PLETrace:
    """One photoluminescence-excitation scan"""
    frequency_ghz: np.ndarray
    counts: np.ndarray
    bin_mhz: float
    scan_index: int = 0

    def __post_init__(self):
        require(self.bin_mhz > 0, "PLE bin width must be positive")
        require(self.frequency_ghz.size == self.counts.size >= 5, "a PLE trace needs at least 5 matching points")
        require(np.all(self.counts >= 0), "PLE counts must be non-negative")


@dataclass(frozen=True)
class G2Histogram:
    """Pulsed autocorrelation coincidences per pulse-separation index"""
    k: np.ndarray
    coincidences: np.ndarray
    background: np.ndarray
    train_length: int

    def __post_init__(self):
        require(np.all(self.coincidences >= 0), "coincidences must be non-negative")
        require(0 in self.k and self.k.size >= 3, "the histogram needs the zero bin and at least two side peaks")
        require(self.train_length > np.abs(self.k).max(), "pulse train (%s) must be longer than the largest separation", self.train_length)


def read_ple(path: Union[str, Path]) -> list[PLETrace]:
    """Reads PLE scans from a CSV with columns frequency_ghz, counts and scan; the bin width comes from the `bin_mhz` metadata line."""
    cols, meta = read_csv(path, ("frequency_ghz", "counts"), ("scan",))
    scan = cols.get("scan", np.zeros(cols["counts"].size)).astype(int)
    bin_mhz = float(meta.get("bin_mhz", np.median(np.diff(cols["frequency_ghz"][scan == scan[0]])) * 1e3))
    return [PLETrace(cols["frequency_ghz"][scan == s], cols["counts"][scan == s], bin_mhz, int(s)) for s in np.unique(scan)]


def read_g2(path: Union[str, Path]) -> G2Histogram:
    """Reads a g2 histogram CSV with columns k, coincidences and optionally background; the train length comes from metadata."""
    cols, meta = read_csv(path, ("k", "coincidences"), ("background",))
    k = cols["k"].astype(int)
    return G2Histogram(k, cols["coincidences"], cols.get("background", np.zeros(k.size)), int(meta.get("train_length", 10 * np.abs(k).max() + 1)))


def read_decay(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray, dict]:
    """Reads a decay histogram CSV (t_ns, counts).

    Returns:
        tuple[np.ndarray, np.ndarray, dict]: bin left edges, counts and the file's metadata
    """
    cols, meta = read_csv(path, ("t_ns", "counts"))
    return cols["t_ns"], cols["counts"], meta


def fit_result_to_dict(fit: FitResult, **extra) -> dict:
    """JSON-ready form of a FitResult, with any derived quantities merged in"""
    return fit.to_dict() | extra


def coverage_fraction(estimates: np.ndarray, errors: np.ndarray, truth) -> float:
    """Fraction of estimates whose 1-sigma interval contains the truth"""
    e, s = np.asarray(estimates, dtype=float), np.asarray(errors, dtype=float)
    return float(np.mean(np.abs(e - truth) <= s))


##################################################################################################
################################## S W E E P   F I T T I N G #####################################
##################################################################################################


@dataclass(frozen=True)
class SweepModel:
    """Everything a sweep fit holds fixed: the cavity response, the Debye-Waller factor and the numerical settings"""
    response: CavityResponse
    beta0: float
    dark_ratio: float = 0.0
    ensemble: Optional[EnsembleSpec] = None
    fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS
    model_bin_ns: float = DEFAULTS.MODEL_BIN_NS
    quadrature_order: int = DEFAULTS.QUAD_ORDER
    method: Quadrature = Quadrature.AUTO

    def curves(self, mode: str, purcell_branching: float, tau0_ns: float, sigma_nm: float, detuning_ghz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Model counts (unit amplitude) and apparent lifetime at cavity detunings `detuning_ghz`.

        Args:
            mode (str): "offresonant" or "resonant"
            purcell_branching (float): (F - 1) * beta0
            tau0_ns (float): Lifetime without enhancement
            sigma_nm (float): rms length jitter
            detuning_ghz (np.ndarray): Cavity detunings

        Returns:
            tuple[np.ndarray, np.ndarray]: counts and lifetimes
        """
        emitter = EmitterParams.from_lifetime(tau0_ns, self.beta0, self.dark_ratio, phi_p0=1.0)
        gamma = 1e3 / (2 * np.pi * tau0_ns)
        coupling = CavityCoupling(coupling_from_purcell(1 + purcell_branching / self.beta0, self.response.kappa_ghz, gamma), self.response.kappa_ghz, gamma)
        vibration = VibrationSpec(sigma_nm, quadrature_order=self.quadrature_order, method=self.method)
        l_det = np.asarray(detuning_ghz, dtype=float) / self.response.slope_ghz_per_nm

        kw = {"fit_window_ns": self.fit_window_ns, "model_bin_ns": self.model_bin_ns, "check_convergence": False}
        if mode == "resonant":
            c = resonant_sweep(self.response, emitter, coupling, vibration, l_det, **kw)
        else:
            c = offresonant_sweep(self.response, emitter, coupling, vibration, l_det, self.ensemble, **kw)
        return c.counts, c.lifetime_ns


_SWEEP_PARAMS = ("purcell_branching", "tau0_ns", "sigma_nm", "amplitude", "center_ghz")

# <L^(n+1)> / <L^n> for a Lorentzian L averaged over a jitter much wider than the line; n is the counts weight exponent
_DIP_DILUTION = {"offresonant": 0.5, "resonant": 0.8}


def sweep_start(dataset: SweepDataset, model: SweepModel) -> dict[str, float]:
    """Starting values for `fit_sweep_joint()` read off the first session of the data.  The center is the counts peak and tau0 the
    longest lifetime.  sigma comes from the excess of the counts width over the bare line (a Voigt width inverted for its Gaussian part),
    and (F-1)beta0 from the lifetime dip scaled up for the dilution by the jitter.

    Args:
        dataset (SweepDataset): The observed sweep
        model (SweepModel): The fixed part of the model

    Returns:
        dict[str, float]: purcell_branching, tau0_ns, sigma_nm and center_ghz
    """
    first = dataset.session == dataset.sessions[0]
    order = np.argsort(dataset.detuning_ghz[first])
    x, y, tau = dataset.detuning_ghz[first][order], dataset.counts[first][order], dataset.lifetime_ns[first][order]
    kappa, slope = model.response.kappa_ghz, abs(model.response.slope_ghz_per_nm)

    try:
        width = fwhm(x, y)
    except ValidationError:
        # half maximum not reached: curvature of log(counts) around the peak
        top = y >= 0.3 * y.max()
        a = np.polyfit(x[top], np.log(y[top]), 2)[0] if top.sum() >= 3 else 0.0
        width = FWHM_PER_SIGMA * np.sqrt(-0.5 / a) if a < 0 else float(np.ptp(x))

    p = 2.5 if dataset.mode == "resonant" else 1.0
    bare = kappa * np.sqrt(2 ** (1 / p) - 1)
    gauss2 = (width - 0.5346 * bare) ** 2 - 0.2166 * bare ** 2
    if model.ensemble is not None and model.ensemble.shape is EnsembleShape.GAUSSIAN:
        gauss2 -= model.ensemble.width_ghz ** 2
    gauss = np.sqrt(max(gauss2, 0.0))
    sigma = max(gauss / (FWHM_PER_SIGMA * slope), 0.25 * kappa / (2 * slope))

    tau0 = float(np.nanmax(tau))
    d = _DIP_DILUTION[dataset.mode]
    dilution = d + (1 - d) * kappa / (kappa + gauss)
    purcell_branching = float(np.clip((tau0 / np.nanmin(tau) - 1) / dilution, 1e-4, 4.9))

    start = {"purcell_branching": purcell_branching, "tau0_ns": tau0, "sigma_nm": float(sigma), "center_ghz": float(x[np.argmax(y)])}
    log.debug("Sweep fit start: %s", start)
    return start


def fit_sweep_joint(dataset: SweepDataset, model: SweepModel, p0: dict = None, max_nfev: int = DEFAULTS.MAX_NFEV, ftol: float = DEFAULTS.FTOL,
                    xtol: float = DEFAULTS.XTOL) -> FitResult:
    """Joint weighted least-squares fit of the counts and lifetime curves of a detuning sweep.  Every session after the first gets its
    own detuning offset to absorb drifts between sessions.

    Args:
        dataset (SweepDataset): The observed sweep; its mode selects the forward model
        model (SweepModel): The fixed part of the model
        p0 (dict, optional): Starting values by parameter name, overriding those from `sweep_start()`. Defaults to None.
        max_nfev (int, optional): Evaluation budget. Defaults to DEFAULTS.MAX_NFEV.
        ftol (float, optional): Relative cost tolerance. Defaults to DEFAULTS.FTOL.
        xtol (float, optional): Relative step tolerance. Defaults to DEFAULTS.XTOL.

    Raises:
        ValidationError: If the sweep has fewer than 8 points or does not span the counts peak.
        ConvergenceError: If the optimizer gives up.

    Returns:
        FitResult: parameters purcell_branching, tau0_ns, sigma_nm, amplitude, center_ghz and offset_<session> for each extra session
    """
    require(dataset.detuning_ghz.size >= 8, "a sweep fit needs at least 8 points, got %d", dataset.detuning_ghz.size)
    order = np.argsort(dataset.detuning_ghz)
    require(0 < np.argmax(dataset.counts[order]) < dataset.detuning_ghz.size - 1, "the sweep does not span the counts peak")

    extra = dataset.sessions[1:]
    names = _SWEEP_PARAMS + tuple(f"offset_{s}" for s in extra)
    idx = [np.flatnonzero(dataset.session == s) for s in [dataset.sessions[0], *extra]]

    def predict(p):
        x, tau0, sigma, amp, center, *offsets = p
        counts, tau = np.empty(dataset.counts.size), np.empty(dataset.counts.size)
        for i, off in zip(idx, [0.0, *offsets]):
            counts[i], tau[i] = model.curves(dataset.mode, x, tau0, sigma, dataset.detuning_ghz[i] - center - off)
        return amp * counts, tau

    def residuals(p):
        counts, tau = predict(p)
        return np.concatenate(((counts - dataset.counts) / dataset.counts_err, (tau - dataset.lifetime_ns) / dataset.lifetime_err_ns))

    guess = sweep_start(dataset, model) | {"amplitude": 1.0} | {f"offset_{s}": 0.0 for s in extra} | (p0 or {})
    if not p0 or "amplitude" not in p0:
        c, _ = model.curves(dataset.mode, guess["purcell_branching"], guess["tau0_ns"], guess["sigma_nm"], np.zeros(1))
        guess["amplitude"] = float(dataset.counts.max() / c[0])

    span = np.ptp(dataset.detuning_ghz)
    lo = [1e-6, 0.5, 0.0, 0.0, -span] + [-span] * len(extra)
    hi = [5.0, 50.0, 2.0, np.inf, span] + [span] * len(extra)
    scale = [max(guess["purcell_branching"], 0.01), 1.0, max(guess["sigma_nm"], 0.01), guess["amplitude"], max(model.response.kappa_ghz, 1e-3)]
    scale += [model.response.kappa_ghz] * len(extra)

    log.info("Fitting %d-point %s sweep with %d session(s)", dataset.detuning_ghz.size, dataset.mode, len(idx))
    fit = weighted_least_squares(residuals, [guess[n] for n in names], names, bounds=(lo, hi), max_nfev=max_nfev, ftol=ftol, xtol=xtol, x_scale=scale)
    log.info("(F-1)beta0 = %.4g +/- %.2g, tau0 = %.4g +/- %.2g ns, sigma = %.3g +/- %.2g nm, chi2_red = %.3g", fit["purcell_branching"], fit.error("purcell_branching"),
             fit["tau0_ns"], fit.error("tau0_ns"), fit["sigma_nm"], fit.error("sigma_nm"), fit.chi2_red)
    return fit


##################################################################################################
###################################### L I F E T I M E S #########################################
##################################################################################################


class LifetimeFit(NamedTuple):
    """A background-subtracted exponential fit, extrapolated to t = 0"""
    tau_ns: float
    tau_err_ns: float
    amplitude: float
    total_counts: float
    total_err: float
    fit: FitResult


def detuned_background(reference_counts: np.ndarray, n_pulses_reference: int, n_pulses: int) -> np.ndarray:
    """Per-bin background taken from a reference histogram recorded with the excitation detuned, rescaled to the pulse count of the
    measurement."""
    require(n_pulses_reference > 0 and n_pulses > 0, "pulse counts must be positive")
    return np.asarray(reference_counts, dtype=float) * n_pulses / n_pulses_reference


def offpulse_background(counts: np.ndarray, mask: np.ndarray) -> float:
    """Mean counts per bin over bins (selected by `mask`) that contain no emitter signal"""
    require(np.any(mask), "no background bins selected")
    return float(np.mean(np.asarray(counts, dtype=float)[mask]))


def fit_exponential_lifetime(t_left_ns: np.ndarray, counts: np.ndarray, bin_ns: float, window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS,
                             background: Union[float, np.ndarray] = 0.0, n_pulses: int = 1) -> LifetimeFit:
    """Fits a single exponential to the part of a decay histogram inside `window_ns` and extrapolates the total emitted counts from
    t = 0, including the region hidden by the excitation pulse.

    Args:
        t_left_ns (np.ndarray): Bin left edges (ns)
        counts (np.ndarray): Raw counts per bin
        bin_ns (float): Bin width (ns)
        window_ns (tuple[float, float], optional): Fit window. Defaults to DEFAULTS.FIT_WINDOW_NS.
        background (Union[float, np.ndarray], optional): Background per bin, scalar or per-bin (full histogram length). Defaults to 0.0.
        n_pulses (int, optional): Pulses in the measurement; totals are reported per pulse. Defaults to 1.

    Raises:
        ValidationError: If nothing is left after background subtraction.

    Returns:
        LifetimeFit: The fit with the extrapolated total counts (per pulse)
    """
    t, c = np.asarray(t_left_ns, dtype=float), np.asarray(counts, dtype=float)
    b = np.broadcast_to(np.asarray(background, dtype=float), c.shape)
    sel = (t >= window_ns[0]) & (t + bin_ns <= window_ns[1] + 1e-9)
    require(sel.sum() >= 3, "fit window %s holds fewer than 3 bins", window_ns)

    if (c[sel] - b[sel]).sum() <= 0:
        raise ValidationError("decay amplitude is negative after background subtraction")

    fit = fit_decay(t[sel], c[sel], bin_ns, b[sel])
    if fit["amplitude"] <= 0 or "amplitude" in fit.at_bound:
        raise ValidationError("decay amplitude is negative after background subtraction")

    a, tau = fit["amplitude"], fit["tau"]
    cov = fit.covariance
    total = a * tau
    err = np.sqrt(max(tau ** 2 * cov[0, 0] + a ** 2 * cov[1, 1] + 2 * a * tau * cov[0, 1], 0.0))
    log.debug("tau = %.4g +/- %.2g ns, extrapolated total %.5g", tau, fit.error("tau"), total)
    return LifetimeFit(tau, fit.error("tau"), a, total / n_pulses, err / n_pulses, fit)


##################################################################################################
############################################# P L E ##############################################
##################################################################################################


def _gaussian(x, a, x0, s, c):
    return a * np.exp(-((x - x0) ** 2) / (2 * s ** 2)) + c


def _fit_gaussian(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Poisson-weighted Gaussian-plus-offset fit; returns (values, 1-sigma errors) of (amplitude, center, sigma, offset)"""
    i = int(np.argmax(y))
    base = float(np.median(y))
    above = x[y >= base + (y[i] - base) / 2]
    s0 = max((above.max() - above.min()) / FWHM_PER_SIGMA, np.median(np.diff(x)))
    popt, pcov = curve_fit(_gaussian, x, y, p0=(y[i] - base, x[i], s0, base), sigma=poisson_sigma(y), absolute_sigma=True, maxfev=5000)
    popt[2] = abs(popt[2])
    return popt, np.sqrt(np.clip(np.diag(pcov), 0, None))


class LineFit(NamedTuple):
    """Gaussian fit to one PLE trace or average"""
    center_ghz: float
    center_err_ghz: float
    fwhm_mhz: float
    fwhm_err_mhz: float
    amplitude: float


@dataclass(frozen=True)
class PLEResult:
    """Per-trace fits and the raw and drift-corrected averages"""
    fits: dict[int, LineFit]
    flagged: dict[int, str]
    raw: LineFit
    centered: LineFit
    raw_average: tuple[np.ndarray, np.ndarray] = field(repr=False)
    centered_average: tuple[np.ndarray, np.ndarray] = field(repr=False)

    def columns(self) -> dict[str, np.ndarray]:
        return {"scan": np.array(list(self.fits)), "center_ghz": np.array([f.center_ghz for f in self.fits.values()]),
                "fwhm_mhz": np.array([f.fwhm_mhz for f in self.fits.values()]), "fwhm_err_mhz": np.array([f.fwhm_err_mhz for f in self.fits.values()])}


def _line(popt: np.ndarray, perr: np.ndarray) -> LineFit:
    return LineFit(popt[1], perr[1], popt[2] * FWHM_PER_SIGMA * 1e3, perr[2] * FWHM_PER_SIGMA * 1e3, popt[0])


def _has_peak(y: np.ndarray, significance: float) -> bool:
    base = np.median(y)
    return y.max() - base > significance * np.sqrt(base + 1)


def ple_analyze(traces: list[PLETrace], significance: float = DEFAULTS.SIGNIFICANCE) -> PLEResult:
    """Fits a Gaussian to every PLE trace, then compares the plain sum of all traces with the sum after shifting each trace to a common
    center.  The difference between the two widths is spectral diffusion between scans.

    Args:
        traces (list[PLETrace]): The scans
        significance (float, optional): Peak height over sqrt(background) below which a trace counts as peakless. Defaults to DEFAULTS.SIGNIFICANCE.

    Raises:
        ValidationError: If no trace has a usable peak.

    Returns:
        PLEResult: Per-trace fits, excluded traces and both averages with their Gaussian fits
    """
    fits, flagged, good = {}, {}, []
    for tr in traces:
        if not _has_peak(tr.counts, significance):
            flagged[tr.scan_index] = "no significant peak"
            continue
        try:
            fits[tr.scan_index] = _line(*_fit_gaussian(tr.frequency_ghz, tr.counts))
            good.append(tr)
        except (RuntimeError, ValueError) as e:
            flagged[tr.scan_index] = f"fit failed: {e}"
    for i, why in flagged.items():
        log.warning("Excluding PLE scan %d: %s", i, why)
    if not good:
        raise ValidationError("no PLE trace contains a usable peak")

    grid = good[0].frequency_ghz
    raw = np.sum([np.interp(grid, tr.frequency_ghz, tr.counts, left=np.nan, right=np.nan) for tr in good], axis=0)
    keep = np.isfinite(raw)

    rel = grid - fits[good[0].scan_index].center_ghz
    shifted = np.array([np.interp(rel + fits[tr.scan_index].center_ghz, tr.frequency_ghz, tr.counts, left=np.nan, right=np.nan) for tr in good])
    centered = shifted.sum(axis=0)
    ckeep = np.isfinite(centered)

    try:
        raw_fit = _line(*_fit_gaussian(grid[keep], raw[keep]))
        cen_fit = _line(*_fit_gaussian(rel[ckeep], centered[ckeep]))
    except (RuntimeError, ValueError) as e:
        raise ConvergenceError(f"Gaussian fit to the averaged PLE line failed: {e}", {"n_traces": len(good)}) from e

    log.info("PLE: %d trace(s), raw FWHM %.4g +/- %.2g MHz, centered FWHM %.4g +/- %.2g MHz", len(good), raw_fit.fwhm_mhz, raw_fit.fwhm_err_mhz, cen_fit.fwhm_mhz, cen_fit.fwhm_err_mhz)
    return PLEResult(fits, flagged, raw_fit, cen_fit, (grid[keep], raw[keep]), (rel[ckeep], centered[ckeep]))


def summarize_linewidths(fwhms_mhz) -> tuple[float, float]:
    """Mean and standard deviation of linewidths measured on many transitions"""
    w = np.asarray(fwhms_mhz, dtype=float)
    require(w.size >= 2, "need at least two linewidths")
    return float(w.mean()), float(w.std(ddof=1))


##################################################################################################
############################################# G 2 ################################################
##################################################################################################


class G2Result(NamedTuple):
    """Zero-delay autocorrelation with the fitted side-peak plateau"""
    g2_zero: float
    g2_zero_err: float
    g2_corrected: float
    g2_corrected_err: float
    plateau: float
    bunching_amplitude: float
    bunching_decay: float
    normalized: np.ndarray
    fit: Optional[FitResult]


def g2_plateau(k: np.ndarray, plateau: float, train_length: int, amplitude: float = 0.0, decay: float = 1.0) -> np.ndarray:
    """Expected side-peak coincidences for a finite pulse train, P (M - |k|)/M (1 + A exp(-|k|/k_b))"""
    ak = np.abs(np.asarray(k, dtype=float))
    return plateau * (train_length - ak) / train_length * (1 + amplitude * np.exp(-ak / decay))


def g2_analyze(hist: G2Histogram, model: str = "flat") -> G2Result:
    """Normalized zero-delay coincidences of a pulsed autocorrelation measurement.

    Side peaks are fitted with the finite-train plateau, either flat or with an exponential bunching term in the pulse index.  The
    corrected value subtracts the measured background from both the zero bin and the plateau.

    Args:
        hist (G2Histogram): The coincidence histogram
        model (str, optional): "flat" or "bunching". Defaults to "flat".

    Raises:
        ValidationError: If the plateau is not positive or the model is unknown.

    Returns:
        G2Result: g2(0) raw and background-corrected, the plateau and the bunching parameters
    """
    require(model in ("flat", "bunching"), "unknown g2 model '%s'", model)
    k, c = hist.k.astype(int), hist.coincidences.astype(float)
    side = k != 0
    s = (hist.train_length - np.abs(k[side])) / hist.train_length
    sig = poisson_sigma(c[side])

    fit, amp, decay = None, 0.0, 1.0
    if model == "flat":
        w = 1 / sig ** 2
        plateau = float(np.sum(w * c[side] * s) / np.sum(w * s ** 2))
        plateau_err = float(1 / np.sqrt(np.sum(w * s ** 2)))
    else:
        require(side.sum() >= 4, "the bunching model needs at least 4 side peaks")
        fit = weighted_least_squares(lambda p: (g2_plateau(k[side], *p[:1], hist.train_length, *p[1:]) - c[side]) / sig, [c[side].mean(), 0.1, 2.0],
                                     ("plateau", "amplitude", "decay"), bounds=([0, 0, 0.05], [np.inf, np.inf, np.abs(k).max() * 10]))
        plateau, plateau_err, amp, decay = fit["plateau"], fit.error("plateau"), fit["amplitude"], fit["decay"]

    if plateau <= 0:
        raise ValidationError("the side-peak plateau is zero; cannot normalize g2")

    bg = np.broadcast_to(np.asarray(hist.background, dtype=float), k.shape)
    c0, b0, bbar = c[~side].sum(), bg[~side].sum(), bg[side].mean()
    g0 = c0 / plateau
    g0_err = np.hypot(np.sqrt(max(c0, 1.0)) / plateau, c0 * plateau_err / plateau ** 2)

    if plateau - bbar <= 0:
        raise ValidationError("background exceeds the plateau; cannot correct g2")
    gc = (c0 - b0) / (plateau - bbar)
    gc_err = np.hypot(np.sqrt(max(c0, 1.0)) / (plateau - bbar), (c0 - b0) * plateau_err / (plateau - bbar) ** 2)

    normalized = c / g2_plateau(k, plateau, hist.train_length)
    log.info("g2(0) = %.3g +/- %.2g (background corrected %.3g +/- %.2g)", g0, g0_err, gc, gc_err)
    return G2Result(g0, g0_err, gc, gc_err, plateau, amp, decay, normalized, fit)


##################################################################################################
###################################### P O L A R I Z A T I O N ###################################
##################################################################################################


class PolarizationFit(NamedTuple):
    """counts = offset + amplitude * sin^2(2 (theta - phase))"""
    amplitude: float
    amplitude_err: float
    phase_deg: float
    phase_err_deg: float
    offset: float
    offset_err: float
    extinction_ratio: float


def hwp_polarization_fit(angles_deg, counts, background: Union[float, np.ndarray] = 0.0) -> PolarizationFit:
    """Fits background-corrected counts behind a half-wave plate and a fixed analyzer.  The plate rotates the polarization by twice its
    angle, so the intensity has a 90 degree period in plate angle.  The fit is linear in (1, cos 4 theta, sin 4 theta).

    Args:
        angles_deg (ArrayLike): Half-wave plate angles (degrees)
        counts (ArrayLike): Counts at each angle
        background (Union[float, np.ndarray], optional): Background to subtract. Defaults to 0.0.

    Raises:
        ValidationError: If fewer than 6 distinct angles (modulo 90 degrees) are given.

    Returns:
        PolarizationFit: amplitude >= 0, phase in [0, 90) degrees, offset and the max/min extinction ratio
    """
    theta = np.radians(np.asarray(angles_deg, dtype=float))
    raw = np.asarray(counts, dtype=float)
    y = raw - background
    require(np.unique(np.round(np.mod(np.degrees(theta), 90.0), 6)).size >= 6, "need at least 6 distinct half-wave plate angles (mod 90 deg)")

    a = np.column_stack((np.ones_like(theta), np.cos(4 * theta), np.sin(4 * theta)))
    w = 1 / poisson_sigma(raw)
    coef, *_ = np.linalg.lstsq(a * w[:, None], y * w, rcond=None)
    cov = np.linalg.pinv((a * w[:, None]).T @ (a * w[:, None]))
    c0, c1, c2 = coef

    r = np.hypot(c1, c2)
    amp = 2 * r
    amp_err = 2 * np.sqrt(max((c1 ** 2 * cov[1, 1] + c2 ** 2 * cov[2, 2] + 2 * c1 * c2 * cov[1, 2]) / r ** 2, 0.0)) if r > 0 else 2 * np.sqrt(max(cov[1, 1], cov[2, 2]))
    phase = np.degrees(np.arctan2(-c2, -c1) / 4) % 90.0
    phase_err = np.degrees(np.sqrt(max((c2 ** 2 * cov[1, 1] + c1 ** 2 * cov[2, 2] - 2 * c1 * c2 * cov[1, 2]), 0.0)) / r ** 2 / 4) if r > 0 else np.inf
    offset = c0 - r
    offset_err = np.sqrt(max(cov[0, 0] + amp_err ** 2 / 4, 0.0))
    ratio = (offset + amp) / offset if offset > 0 else np.inf

    return PolarizationFit(float(amp), float(amp_err), float(phase), float(phase_err), float(offset), float(offset_err), float(ratio))


##################################################################################################
######################################## S Y N T H E S I S #######################################
##################################################################################################


def _draw(expected: np.ndarray, noise: str, rng: np.random.Generator) -> np.ndarray:
    require(noise in ("poisson", "none"), "unknown noise model '%s'", noise)
    expected = np.clip(np.asarray(expected, dtype=float), 0, None)
    return rng.poisson(expected).astype(float) if noise == "poisson" else expected.copy()


def synth_sweep(model: SweepModel, truth: dict, detuning_ghz: list[np.ndarray], mode: str = "offresonant", noise: str = "poisson", seed: int = 0) -> SweepDataset:
    """Synthetic sweep from the forward model.  Counts are Poisson-sampled around `amplitude` times the model; lifetimes scatter with
    the statistical error tau/sqrt(counts).

    Args:
        model (SweepModel): The fixed part of the model
        truth (dict): purcell_branching, tau0_ns, sigma_nm, amplitude, center_ghz and optionally offset_<session>
        detuning_ghz (list[np.ndarray]): Detuning grid of each session
        mode (str, optional): "offresonant" or "resonant". Defaults to "offresonant".
        noise (str, optional): "poisson" or "none". Defaults to "poisson".
        seed (int, optional): Random seed. Defaults to 0.

    Returns:
        SweepDataset: The synthetic sweep
    """
    rng = np.random.default_rng(seed)
    cols = {k: [] for k in ("detuning", "counts", "counts_err", "tau", "tau_err", "session")}
    for s, grid in enumerate(detuning_ghz):
        grid = np.asarray(grid, dtype=float)
        c, tau = model.curves(mode, truth["purcell_branching"], truth["tau0_ns"], truth["sigma_nm"], grid - truth["center_ghz"] - truth.get(f"offset_{s}", 0.0))
        expected = truth["amplitude"] * c
        counts = _draw(expected, noise, rng)
        tau_err = tau / np.sqrt(np.maximum(expected, 1.0))
        cols["detuning"].append(grid)
        cols["counts"].append(counts)
        cols["counts_err"].append(poisson_sigma(counts) if noise == "poisson" else np.sqrt(np.maximum(expected, 1.0)))
        cols["tau"].append(tau + rng.normal(0.0, tau_err) if noise == "poisson" else tau)
        cols["tau_err"].append(tau_err)
        cols["session"].append(np.full(grid.size, s))

    return SweepDataset(*(np.concatenate(cols[k]) for k in ("detuning", "counts", "counts_err", "tau", "tau_err")), mode, np.concatenate(cols["session"]).astype(int))


def synth_decay(tau_ns: float, total_counts: float, bin_ns: float = DEFAULTS.TCSPC_BIN_NS, t_max_ns: float = 60.0, background: float = 0.0,
                noise: str = "poisson", seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Binned exponential decay holding `total_counts` emitted photons plus a flat background per bin.

    Returns:
        tuple[np.ndarray, np.ndarray]: bin left edges (ns) and counts
    """
    t = np.arange(0.0, t_max_ns, bin_ns)
    expected = total_counts * np.exp(-t / tau_ns) * (1 - np.exp(-bin_ns / tau_ns)) + background
    return t, _draw(expected, noise, np.random.default_rng(seed))


def synth_ple(n_traces: int, fwhm_mhz: float, peak_counts: float, center_ghz: float = 0.0, background: float = 1.0, span_ghz: float = 2.0, bin_mhz: float = 10.0,
              drift_mhz_per_scan: float = 0.0, random_walk_mhz: float = 0.0, noise: str = "poisson", seed: int = 0) -> list[PLETrace]:
    """Gaussian PLE lines whose center drifts linearly and/or by a random walk from scan to scan.

    Returns:
        list[PLETrace]: One trace per scan, on a shared frequency grid
    """
    rng = np.random.default_rng(seed)
    grid = center_ghz + np.arange(-span_ghz / 2, span_ghz / 2 + bin_mhz * 5e-4, bin_mhz * 1e-3)
    walk = np.cumsum(rng.normal(0.0, random_walk_mhz, n_traces)) if random_walk_mhz else np.zeros(n_traces)
    centers = center_ghz + (drift_mhz_per_scan * np.arange(n_traces) + walk) * 1e-3
    s = fwhm_mhz * 1e-3 / FWHM_PER_SIGMA
    return [PLETrace(grid, _draw(_gaussian(grid, peak_counts, c, s, background), noise, rng), bin_mhz, i) for i, c in enumerate(centers)]


def synth_g2(plateau: float, g2_zero: float, train_length: int = 200, k_max: int = 10, amplitude: float = 0.0, decay: float = 2.0, background: float = 0.0,
             noise: str = "poisson", seed: int = 0) -> G2Histogram:
    """Pulsed autocorrelation histogram from the finite-train plateau model with a chosen zero-delay value"""
    k = np.arange(-k_max, k_max + 1)
    expected = g2_plateau(k, plateau, train_length, amplitude, decay)
    expected[k == 0] = g2_zero * plateau
    return G2Histogram(k, _draw(expected + background, noise, np.random.default_rng(seed)), np.full(k.size, float(background)), train_length)


def synth_g2_emitters(n_emitters: int, p_detect: float, n_trains: int, train_length: int = 200, k_max: int = 10, seed: int = 0) -> G2Histogram:
    """Brute-force Hanbury Brown-Twiss simulation: each of `n_emitters` independent single-photon emitters is detected with probability
    `p_detect` per pulse, on one of two detectors at random.  Coincidences between the detectors are counted within each pulse train."""
    rng = np.random.default_rng(seed)
    shape = (n_emitters, n_trains, train_length)
    fired = rng.random(shape) < p_detect
    to_a = rng.random(shape) < 0.5
    a, b = (fired & to_a).any(axis=0), (fired & ~to_a).any(axis=0)

    k = np.arange(-k_max, k_max + 1)
    c = np.array([np.sum(a[:, max(0, -d):train_length - max(0, d)] & b[:, max(0, d):train_length - max(0, -d)]) for d in k], dtype=float)
    return G2Histogram(k, c, np.zeros(k.size), train_length)


def synth_timestamps(profile: CryostatPhaseProfile, response: CavityResponse, emitter: EmitterParams, coupling: CavityCoupling, n_periods: int, rep_rate_mhz: float = 1.0,
                     brightness: float = 1.0, phase_bins: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Photon, pulse and coldhead-sync timestamps (ps) generated by the resonant forward model with sigma following `profile`.

    Args:
        profile (CryostatPhaseProfile): sigma over the coldhead period
        response (CavityResponse): Dispersion slope
        emitter (EmitterParams): The emitter
        coupling (CavityCoupling): Coupling and efficiencies
        n_periods (int): Coldhead periods to simulate
        rep_rate_mhz (float, optional): Pulse repetition rate. Defaults to 1.0.
        brightness (float, optional): Multiplies the detection probability per pulse, to shorten simulations. Defaults to 1.0.
        phase_bins (int, optional): Phase resolution of the sigma profile. Defaults to 50.
        seed (int, optional): Random seed. Defaults to 0.

    Returns:
        tuple[np.ndarray, np.ndarray, np.ndarray]: photon, pulse and sync times
    """
    rng = np.random.default_rng(seed)
    period_ps = profile.period_s * 1e12
    pulses = np.arange(0.0, n_periods * period_ps, 1e6 / rep_rate_mhz)
    syncs = np.arange(n_periods) * period_ps
    which = np.minimum((np.mod(pulses, period_ps) / period_ps * phase_bins).astype(int), phase_bins - 1)

    photons = []
    for j in range(phase_bins):
        z, _, r = decay_components(response, emitter, coupling, VibrationSpec(float(profile.sigma_at((j + 0.5) / phase_bins))), 0.0, resonant=True)
        z, r = z[0], r[0]
        per_node = z / r
        p = min(brightness * per_node.sum(), 1.0)
        mine = pulses[which == j]
        hits = mine[rng.random(mine.size) < p]
        node = rng.choice(per_node.size, hits.size, p=per_node / per_node.sum())
        photons.append(hits + rng.exponential(1.0 / r[node]) * 1e3)

    return np.sort(np.concatenate(photons)), pulses, syncs


def synth_experiment(kind: str, seed: int, noise: str = "poisson", **kwargs):
    """Dispatches to the synthetic generator for `kind` (sweep, decay, ple, g2, timestamps), always with an explicit seed.

    Raises:
        ValidationError: If `kind` is unknown.
    """
    generators: dict[str, Callable] = {"sweep": synth_sweep, "decay": synth_decay, "ple": synth_ple, "g2": synth_g2}
    if kind == "timestamps":
        return synth_timestamps(seed=seed, **kwargs)
    if kind not in generators:
        raise ValidationError(f"unknown synthetic experiment '{kind}'")
    return generators[kind](noise=noise, seed=seed, **kwargs)
