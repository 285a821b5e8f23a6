"""Transfer-matrix model of the one-dimensional mirror | air | diamond | mirror cavity.  Finds resonances, linewidths, finesse, mode
character, clipping loss and the emitter-cavity coupling rate.

Two conventions are used throughout: time dependence exp(+i*omega*t), so a forward wave in a layer of index n goes as exp(-i*k*z); and light
enters from the fiber side, with layers listed in the order fiber mirror, air gap, diamond, flat mirror.
"""

import logging

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from scipy.optimize import brentq, curve_fit, minimize_scalar
from scipy.signal import find_peaks

from .constants import C_LIGHT, N
from .core import ConvergenceError, RangeError, ValidationError, require
from .emitter_purcell import EmitterParams

log = logging.getLogger(__name__)

_MAX_SCAN_POINTS = 4_000_000

##################################################################################################
######################################## T Y P E S ###############################################
##################################################################################################


@dataclass(frozen=True)
class Layer:
    """A homogeneous dielectric layer"""
    thickness_nm: float
    refractive_index: float
    label: str = ""

    def __post_init__(self):
        require(self.thickness_nm > 0, "layer '%s' must have positive thickness, got %s nm", self.label, self.thickness_nm)
        require(self.refractive_index >= 1, "layer '%s' has a non-physical refractive index %s", self.label, self.refractive_index)


class MirrorKind(Enum):
    LUMPED = "lumped"
    DBR_STACK = "dbr_stack"


@dataclass(frozen=True)
class MirrorSpec:
    """A cavity mirror, either lumped (power transmission and loss per bounce) or an explicit dielectric stack.

    For `DBR_STACK` mirrors, `layers` are listed from the cavity side outwards and `substrate_index` is the index behind the last layer.
    """
    kind: MirrorKind = MirrorKind.LUMPED
    transmission_ppm: float = 0.0
    loss_ppm: float = 0.0
    layers: tuple[Layer, ...] = ()
    stopband_center_thz: Optional[float] = None
    substrate_index: float = 1.0

    def __post_init__(self):
        if self.kind is MirrorKind.LUMPED:
            require(self.transmission_ppm >= 0 and self.loss_ppm >= 0, "mirror transmission and loss must be non-negative")
            require(self.transmission_ppm + self.loss_ppm < 1e6, "mirror T + L must be below 1, got %s ppm", self.transmission_ppm + self.loss_ppm)
        else:
            require(self.layers, "a dbr_stack mirror needs at least one layer")
        require(self.substrate_index >= 1, "non-physical substrate index %s", self.substrate_index)

    @property
    def total_loss(self) -> float:
        """Fraction of power leaving the cavity per bounce (lumped mirrors only)"""
        return (self.transmission_ppm + self.loss_ppm) * 1e-6

    def stopband(self) -> tuple[float, float]:
        """Approximate stopband of a quarter-wave stack from its two extreme indices.

        Returns:
            tuple[float, float]: (low, high) in THz; (0, inf) for lumped mirrors.
        """
        if self.kind is MirrorKind.LUMPED:
            return 0.0, np.inf

        n = [l.refractive_index for l in self.layers]
        center = self.stopband_center_thz or C_LIGHT / (4 * self.layers[0].thickness_nm * 1e-9 * n[0]) * 1e-12
        half = (2 / np.pi) * np.arcsin((max(n) - min(n)) / (max(n) + min(n))) * center
        return center - half, center + half


@dataclass(frozen=True)
class CavityGeometry:
    """Geometry of the plano-concave membrane cavity.  `diamond=None` gives a bare air cavity."""
    flat_mirror: MirrorSpec
    fiber_mirror: MirrorSpec
    diamond: Optional[Layer]
    air_gap_um: float
    fiber_roc_um: float
    fiber_mirror_diameter_um: float
    emitter_depth_nm: Optional[float] = None
    """Emitter depth below the diamond-air surface; `None` places it at the field antinode nearest that surface"""

    def __post_init__(self):
        require(self.air_gap_um > 0, "air gap must be positive, got %s um", self.air_gap_um)
        require(self.fiber_roc_um > self.air_gap_um, "fiber ROC (%s um) must exceed the air gap (%s um) for a stable cavity", self.fiber_roc_um, self.air_gap_um)
        require(self.fiber_mirror_diameter_um > 0, "fiber mirror diameter must be positive")
        if self.emitter_depth_nm is not None:
            require(self.diamond is not None and 0 <= self.emitter_depth_nm <= self.diamond.thickness_nm, "emitter depth %s nm is outside the diamond layer", self.emitter_depth_nm)

    @property
    def diamond_um(self) -> float:
        return self.diamond.thickness_nm * 1e-3 if self.diamond else 0.0

    @property
    def n_diamond(self) -> float:
        return self.diamond.refractive_index if self.diamond else N.AIR

    @property
    def optical_length_um(self) -> float:
        """n*d + L, the single-pass optical path length"""
        return self.n_diamond * self.diamond_um + self.air_gap_um

    @property
    def mode_length_um(self) -> float:
        """L + d/n, the length a Gaussian beam propagates between the mirrors"""
        return self.air_gap_um + self.diamond_um / self.n_diamond

    def with_air_gap(self, air_gap_um: float) -> "CavityGeometry":
        return replace(self, air_gap_um=air_gap_um)

    def media(self) -> list[tuple[float, float, str]]:
        """Interior layers as (index, thickness in m, label), fiber side first"""
        out = [(N.AIR, self.air_gap_um * 1e-6, "air")]
        if self.diamond:
            out.append((self.diamond.refractive_index, self.diamond.thickness_nm * 1e-9, self.diamond.label or "diamond"))
        return out


@dataclass(frozen=True)
class Resonance:
    """A cavity resonance with its linewidth and mode properties"""
    frequency_thz: float
    kappa_ghz: float
    finesse: float
    mode_character: float
    field_at_emitter: float
    fsr_thz: Optional[float] = None
    peak_transmission: float = field(default=np.nan, compare=False)

    def __post_init__(self):
        require(self.kappa_ghz > 0 and self.finesse > 0, "resonance linewidth and finesse must be positive")
        require(0 <= self.mode_character <= 1, "mode character must lie in [0, 1], got %s", self.mode_character)
        if self.fsr_thz:
            require(abs(self.fsr_thz * 1e3 / self.kappa_ghz - self.finesse) <= 0.01 * self.finesse, "finesse %.4g is inconsistent with FSR/kappa", self.finesse)


@dataclass(frozen=True)
class CavityResponse:
    """The two cavity numbers vibration averaging needs: the linewidth and how fast the resonance moves with length"""
    kappa_ghz: float
    slope_ghz_per_nm: float

    def __post_init__(self):
        require(self.kappa_ghz > 0, "kappa must be positive, got %s", self.kappa_ghz)
        require(self.slope_ghz_per_nm != 0, "the dispersion slope must be non-zero")


class CouplingRegime(NamedTuple):
    """Weak/strong classification of an emitter-cavity system"""
    regime: str
    gamma_much_less_g: bool
    g_much_less_kappa: bool
    g_over_gamma: float
    kappa_over_g: float

    @property
    def hierarchy(self) -> str:
        """Human-readable ordering of the three rates"""
        return "gamma << g << kappa" if self.gamma_much_less_g and self.g_much_less_kappa else f"g/gamma = {self.g_over_gamma:.3g}, kappa/g = {self.kappa_over_g:.3g}"


##################################################################################################
############################# T H I N - F I L M   O P T I C S ####################################
##################################################################################################


def characteristic_matrix(stack: Sequence[Layer], frequency_thz: float, n_in: float = 1.0, n_out: float = 1.0) -> tuple[complex, complex]:
    """Amplitude reflectance and transmittance of a layer stack at normal incidence, from the product of the layers' characteristic matrices.

    Args:
        stack (Sequence[Layer]): Layers in the order the light meets them.  May be empty (a bare interface).
        frequency_thz (float): Optical frequency (THz)
        n_in (float, optional): Index of the incidence medium. Defaults to 1.0.
        n_out (float, optional): Index of the exit medium. Defaults to 1.0.

    Raises:
        ValidationError: If the frequency or a boundary index is non-physical.

    Returns:
        tuple[complex, complex]: (r, t).  Transmitted power is `(n_out/n_in)*|t|**2`.
    """
    require(frequency_thz > 0, "frequency must be positive, got %s THz", frequency_thz)
    require(n_in >= 1 and n_out >= 1, "non-physical boundary index (%s, %s)", n_in, n_out)

    k0 = 2 * np.pi * frequency_thz * 1e12 / C_LIGHT
    m = np.eye(2, dtype=complex)
    for l in stack:
        d = k0 * l.refractive_index * l.thickness_nm * 1e-9
        m = m @ np.array([[np.cos(d), 1j * np.sin(d) / l.refractive_index], [1j * l.refractive_index * np.sin(d), np.cos(d)]])

    b, c = m @ np.array([1.0, n_out])
    return complex((n_in * b - c) / (n_in * b + c)), complex(2 * n_in / (n_in * b + c))


def _interface(r, t, rp, tp) -> np.ndarray:
    """Transfer matrix mapping (forward, backward) amplitudes right of a boundary to those left of it"""
    r, t, rp, tp = np.broadcast_arrays(*(np.asarray(x, dtype=complex) for x in (r, t, rp, tp)))
    return np.moveaxis(np.array([[np.ones_like(t), -rp], [r, t * tp - r * rp]]) / t, (0, 1), (-2, -1))


def _propagation(n: float, d_m: float, nu_hz: np.ndarray) -> np.ndarray:
    """Transfer matrix from the right edge of a layer to its left edge"""
    phi = 2 * np.pi * nu_hz * n * d_m / C_LIGHT
    z = np.zeros_like(phi, dtype=complex)
    return np.moveaxis(np.array([[np.exp(1j * phi), z], [z, np.exp(-1j * phi)]]), (0, 1), (-2, -1))


def _fresnel(na: float, nb: float) -> tuple[float, float, float, float]:
    return (na - nb) / (na + nb), 2 * na / (na + nb), (nb - na) / (na + nb), 2 * nb / (na + nb)


def _mirror(m: MirrorSpec, n_cavity: float, cavity_on_right: bool, freq_thz: np.ndarray, clip: float = 0.0) -> tuple[float, tuple]:
    """Scattering coefficients (r, t, r', t') of a mirror seen from the left, plus the index of its outside medium.
    `clip` is an extra fractional power loss on the cavity side."""
    n_out = m.substrate_index
    na, nb = (n_out, n_cavity) if cavity_on_right else (n_cavity, n_out)

    if m.kind is MirrorKind.LUMPED:
        rho = np.sqrt(1 - m.total_loss)
        t, tp = np.sqrt(m.transmission_ppm * 1e-6 * na / nb), np.sqrt(m.transmission_ppm * 1e-6 * nb / na)
        r, rp = (rho, -rho) if cavity_on_right else (-rho, rho)
    else:
        lo, hi = m.stopband()
        if np.any((freq_thz < lo) | (freq_thz > hi)):
            raise RangeError(f"frequencies outside the mirror stopband [{lo:.2f}, {hi:.2f}] THz")
        stack = list(reversed(m.layers)) if cavity_on_right else list(m.layers)
        r, t = np.vectorize(lambda f: characteristic_matrix(stack, f, na, nb), otypes=[complex, complex])(freq_thz)
        rp, _ = np.vectorize(lambda f: characteristic_matrix(stack[::-1], f, nb, na), otypes=[complex, complex])(freq_thz)
        tp = t * nb / na

    s = np.sqrt(1 - clip)
    return n_out, ((r, t, rp * s, tp) if cavity_on_right else (r * s, t, rp, tp))


##################################################################################################
##################################### G A U S S I A N   M O D E ##################################
##################################################################################################


def beam_waist(geometry: CavityGeometry, frequency_thz: float) -> float:
    """Waist (1/e^2 intensity radius) of the fundamental mode on the flat mirror of a plano-concave cavity.

    Args:
        geometry (CavityGeometry): The cavity
        frequency_thz (float): Optical frequency

    Returns:
        float: w0 in um
    """
    lam = C_LIGHT / (frequency_thz * 1e12) * 1e6
    ell = geometry.mode_length_um
    return float(np.sqrt(lam / np.pi * np.sqrt(ell * (geometry.fiber_roc_um - ell))))


def mirror_spot_size(geometry: CavityGeometry, frequency_thz) -> np.ndarray:
    """Mode radius on the curved fiber mirror, w0*sqrt(1 + (L/zR)^2).

    Args:
        geometry (CavityGeometry): The cavity
        frequency_thz (ArrayLike): Optical frequency

    Returns:
        np.ndarray: The spot radius in um
    """
    lam = C_LIGHT / (np.asarray(frequency_thz, dtype=float) * 1e12) * 1e6
    ell = geometry.mode_length_um
    w0_sq = lam / np.pi * np.sqrt(ell * (geometry.fiber_roc_um - ell))
    return np.sqrt(w0_sq * (1 + (ell * lam / (np.pi * w0_sq)) ** 2))


def clipping_loss(geometry: CavityGeometry, waist_um) -> np.ndarray:
    """Fraction of Gaussian beam power falling outside the fiber mirror's effective diameter D, exp(-D^2 / (2 w^2)).  Multiply by 1e6 for ppm.

    Args:
        geometry (CavityGeometry): Supplies the mirror diameter
        waist_um (ArrayLike): Beam radius on the mirror (um)

    Returns:
        np.ndarray: The loss per bounce, in [0, 1)
    """
    w = np.asarray(waist_um, dtype=float)
    require(np.all(w > 0), "waist must be positive")
    return np.exp(-geometry.fiber_mirror_diameter_um ** 2 / (2 * w ** 2))


def _clip(geometry: CavityGeometry, freq_thz: np.ndarray) -> np.ndarray:
    return clipping_loss(geometry, mirror_spot_size(geometry, freq_thz))


def free_spectral_range(geometry: CavityGeometry) -> float:
    """c / (2*(n*d + L)) in THz"""
    return C_LIGHT / (2 * geometry.optical_length_um * 1e-6) * 1e-12


def _lumped_losses(geometry: CavityGeometry, frequency_thz: float) -> tuple[float, float, float]:
    require(geometry.flat_mirror.kind is MirrorKind.LUMPED and geometry.fiber_mirror.kind is MirrorKind.LUMPED, "round-trip loss bookkeeping needs lumped mirrors")
    return geometry.fiber_mirror.total_loss, geometry.flat_mirror.total_loss, float(_clip(geometry, frequency_thz))


def design_finesse(geometry: CavityGeometry, frequency_thz: float, include_clipping: bool = True) -> float:
    """Finesse 2*pi / (total round-trip loss) of a cavity with lumped mirrors.

    Args:
        geometry (CavityGeometry): The cavity
        frequency_thz (float): Frequency at which the clipping loss is evaluated
        include_clipping (bool, optional): Set `False` for the coating-limited value. Defaults to True.

    Returns:
        float: The finesse
    """
    fib, flat, clip = _lumped_losses(geometry, frequency_thz)
    return 2 * np.pi / (fib + flat + (clip if include_clipping else 0.0))


def coupling_efficiencies(geometry: CavityGeometry, frequency_thz: float) -> tuple[float, float]:
    """Fraction of intracavity loss that leaves through each mirror's transmission, T_i / total loss.

    Returns:
        tuple[float, float]: (fiber mirror, flat mirror)
    """
    fib, flat, clip = _lumped_losses(geometry, frequency_thz)
    total = fib + flat + clip
    return geometry.fiber_mirror.transmission_ppm * 1e-6 / total, geometry.flat_mirror.transmission_ppm * 1e-6 / total


##################################################################################################
###################################### T R A N S F E R ###########################################
##################################################################################################


def _chain(geometry: CavityGeometry, freq_thz: np.ndarray) -> tuple[float, float, list[tuple[str, np.ndarray]]]:
    """Transfer matrices from the exit side back to the entrance side, tagged with what they describe"""
    nu = np.asarray(freq_thz, dtype=float) * 1e12
    media = geometry.media()

    n_right, flat = _mirror(geometry.flat_mirror, media[-1][0], False, freq_thz)
    n_left, fib = _mirror(geometry.fiber_mirror, media[0][0], True, freq_thz, _clip(geometry, freq_thz))

    steps = [("mirror", _interface(*flat))]
    for i in reversed(range(len(media))):
        n, d, label = media[i]
        steps.append((label, _propagation(n, d, nu)))
        if i:
            steps.append(("interface", _interface(*_fresnel(media[i - 1][0], n))))
    steps.append(("mirror", _interface(*fib)))

    return n_left, n_right, steps


def transmission(geometry: CavityGeometry, frequency_thz) -> np.ndarray:
    """Power transmission of the whole cavity for light entering through the fiber mirror.

    Args:
        geometry (CavityGeometry): The cavity
        frequency_thz (ArrayLike): Frequencies (THz)

    Returns:
        np.ndarray: T(frequency)
    """
    f = np.atleast_1d(np.asarray(frequency_thz, dtype=float))
    n_left, n_right, steps = _chain(geometry, f)
    v = np.zeros((f.size, 2), dtype=complex)
    v[:, 0] = 1
    for _, m in steps:
        v = np.einsum("...ij,...j->...i", m, v)

    out = n_right / n_left / np.abs(v[:, 0]) ** 2
    return out if np.ndim(frequency_thz) else out[0]


@dataclass(frozen=True)
class LayerField:
    """Forward and backward field amplitudes at the left edge of one interior layer"""
    label: str
    n: float
    z0_m: float
    d_m: float
    a: complex
    b: complex
    k: float

    def intensity(self, z_m) -> np.ndarray:
        """|E|^2 at local position(s) `z_m` measured from the layer's left edge"""
        z = np.asarray(z_m, dtype=float)
        return np.abs(self.a * np.exp(-1j * self.k * z) + self.b * np.exp(1j * self.k * z)) ** 2

    def energy(self) -> float:
        """Integral of n^2 |E|^2 over the layer"""
        cross = self.a * np.conj(self.b) * (1 - np.exp(-2j * self.k * self.d_m)) / (2j * self.k)
        return self.n ** 2 * ((abs(self.a) ** 2 + abs(self.b) ** 2) * self.d_m + 2 * cross.real)

    def peak(self) -> float:
        """Maximum of |E|^2 within the layer"""
        if self.k * self.d_m >= np.pi:
            return (abs(self.a) + abs(self.b)) ** 2
        return float(self.intensity(np.linspace(0, self.d_m, 257)).max())

    def antinode(self) -> float:
        """Local position (m) of the first intensity maximum"""
        return float(np.mod(np.angle(self.a * np.conj(self.b)), 2 * np.pi) / (2 * self.k))


def field_profile(geometry: CavityGeometry, frequency_thz: float) -> list[LayerField]:
    """Standing-wave field in each interior layer for a unit transmitted wave.

    Args:
        geometry (CavityGeometry): The cavity
        frequency_thz (float): Optical frequency

    Returns:
        list[LayerField]: The layers, fiber side first
    """
    _, _, steps = _chain(geometry, frequency_thz)
    media = geometry.media()
    z_edges = np.concatenate(([0.0], np.cumsum([d for _, d, _ in media])))

    v = np.array([1, 0], dtype=complex)
    out = []
    i = len(media)
    for label, m in steps[:-1]:
        v = m @ v
        if label != "mirror" and label != "interface":
            i -= 1
            n, d, _ = media[i]
            out.append(LayerField(label, n, z_edges[i], d, complex(v[0]), complex(v[1]), 2 * np.pi * frequency_thz * 1e12 * n / C_LIGHT))

    return out[::-1]


def _mode_properties(geometry: CavityGeometry, frequency_thz: float, depth_nm: Optional[float] = None) -> tuple[float, float, float]:
    """(mode_character, field_at_emitter, effective length in m) at one frequency"""
    layers = field_profile(geometry, frequency_thz)
    energies = [l.energy() for l in layers]
    total = sum(energies)
    air = energies[0] / total

    if not geometry.diamond:
        return air, 0.0, np.nan

    d = layers[-1]
    peak = d.peak()
    depth = depth_nm if depth_nm is not None else geometry.emitter_depth_nm
    z = d.antinode() if depth is None else depth * 1e-9
    require(0 <= z <= d.d_m * (1 + 1e-12), "emitter position %s nm is outside the diamond layer", z * 1e9)

    return air, float(np.sqrt(d.intensity(z) / peak)), total / (d.n ** 2 * peak)


def field_at_depth(geometry: CavityGeometry, frequency_thz: float, depth_nm: float) -> float:
    """Field amplitude at `depth_nm` below the diamond-air surface, relative to the diamond antinode"""
    require(geometry.diamond is not None, "the cavity has no diamond layer")
    return _mode_properties(geometry, frequency_thz, depth_nm)[1]


def mode_volume(geometry: CavityGeometry, frequency_thz: float) -> tuple[float, float]:
    """Mode volume referenced to the field maximum in diamond, V = (pi w0^2 / 4) * L_eff.

    Returns:
        tuple[float, float]: (V in um^3, L_eff in um)
    """
    require(geometry.diamond is not None, "the cavity has no diamond layer")
    l_eff = _mode_properties(geometry, frequency_thz)[2] * 1e6
    return np.pi * beam_waist(geometry, frequency_thz) ** 2 / 4 * l_eff, l_eff


##################################################################################################
##################################### R E S O N A N C E S ########################################
##################################################################################################


def _lorentzian(x, a, x0, w, c):
    return a / (1 + (2 * (x - x0) / w) ** 2) + c


def _kappa_floor(geometry: CavityGeometry, frequency_thz: float) -> float:
    """A lower bound on the linewidth (GHz) used to size the coarse scan"""
    loss = 0.0
    for m, on_right in ((geometry.fiber_mirror, True), (geometry.flat_mirror, False)):
        _, (r, _, rp, _) = _mirror(m, N.AIR, on_right, np.atleast_1d(frequency_thz))
        loss += 1 - float(np.abs(rp if on_right else r).max()) ** 2
    return max(free_spectral_range(geometry) * 1e3 * loss / (2 * np.pi) / geometry.n_diamond, 1e-3)


def _fit_peak(geometry: CavityGeometry, f0: float, kappa_floor: float) -> tuple[float, float, float]:
    """Lorentzian fit to the transmission peak near `f0`.  Returns (frequency in THz, FWHM in GHz, peak transmission)."""
    half = 5 * kappa_floor
    for _ in range(8):
        x = np.linspace(-half, half, 401)
        y = transmission(geometry, f0 + x * 1e-3)
        above = np.flatnonzero(y >= y.max() / 2)
        if above[0] > 0 and above[-1] < x.size - 1:
            break
        half *= 4
    else:
        raise ConvergenceError(f"no resolvable peak near {f0:.6f} THz", {"frequency_thz": f0, "window_ghz": half})

    center = x[y.argmax()]
    fwhm = max(x[above[-1]] - x[above[0]], 2 * (x[1] - x[0]))
    x = center + np.linspace(-3 * fwhm, 3 * fwhm, 301)
    y = transmission(geometry, f0 + x * 1e-3)
    scale = y.max()

    try:
        popt, _ = curve_fit(_lorentzian, x, y / scale, p0=(1.0, center, fwhm, 0.0), maxfev=4000)
    except (RuntimeError, ValueError) as e:
        raise ConvergenceError(f"Lorentzian fit failed near {f0:.6f} THz: {e}", {"frequency_thz": f0, "offset_ghz": x.tolist(), "transmission": y.tolist()}) from e

    if not (popt[2] != 0 and abs(popt[1] - center) < 3 * fwhm):
        raise ConvergenceError(f"Lorentzian fit near {f0:.6f} THz left the peak", {"frequency_thz": f0, "parameters": popt.tolist()})

    return f0 + popt[1] * 1e-3, abs(popt[2]), (popt[0] + popt[3]) * scale


def _resonance(geometry: CavityGeometry, frequency_thz: float, kappa_ghz: float, peak: float = np.nan) -> Resonance:
    fsr = free_spectral_range(geometry)
    character, field_at_emitter, _ = _mode_properties(geometry, frequency_thz)
    return Resonance(frequency_thz, kappa_ghz, fsr * 1e3 / kappa_ghz, character, field_at_emitter, fsr, peak)


def find_resonances(geometry: CavityGeometry, window_thz: tuple[float, float]) -> list[Resonance]:
    """Finds every cavity resonance in a frequency window with a coarse transmission scan, parabolic refinement and a Lorentzian fit over
    +/- 3 linewidths.

    Args:
        geometry (CavityGeometry): The cavity
        window_thz (tuple[float, float]): (low, high) frequency window in THz

    Raises:
        ValidationError: If the window is empty or too wide to scan at the required resolution.
        RangeError: If the window leaves a stack mirror's stopband.
        ConvergenceError: If a peak cannot be fitted.

    Returns:
        list[Resonance]: The resonances sorted by frequency; empty if there are none.
    """
    lo, hi = window_thz
    require(0 < lo < hi, "invalid frequency window %s", window_thz)

    kf = _kappa_floor(geometry, 0.5 * (lo + hi))
    n = int(np.ceil((hi - lo) * 1e3 / (kf / 10))) + 1
    if n > _MAX_SCAN_POINTS:
        raise ValidationError(f"window {lo}-{hi} THz needs {n} scan points at {kf / 10:.3g} GHz resolution; narrow it")

    f = np.linspace(lo, hi, n)
    y = transmission(geometry, f)
    peaks, props = find_peaks(y, prominence=0)
    keep = peaks[(props["prominences"] > 0.5 * y[peaks]) & (y[peaks] > 10 * np.median(y))]
    log.debug("Scan of %d points over %.3f-%.3f THz found %d peak(s)", n, lo, hi, keep.size)

    out = []
    for i in keep:
        if 0 < i < n - 1 and (denom := y[i - 1] - 2 * y[i] + y[i + 1]) < 0:
            f0 = f[i] + 0.5 * (y[i - 1] - y[i + 1]) / denom * (f[1] - f[0])
        else:
            f0 = f[i]
        nu, kappa, peak = _fit_peak(geometry, f0, kf)
        if lo <= nu <= hi:
            out.append(_resonance(geometry, nu, kappa, peak))

    return sorted(out, key=lambda r: r.frequency_thz)


@dataclass(frozen=True)
class DispersionTable:
    """Resonances over a sweep of air gaps, one row per resonance"""
    air_gap_um: np.ndarray
    frequency_thz: np.ndarray
    kappa_ghz: np.ndarray
    finesse: np.ndarray
    mode_character: np.ndarray

    def columns(self) -> dict[str, np.ndarray]:
        """Column map in output order, ready for `core.write_csv()`"""
        return {"air_gap_um": self.air_gap_um, "frequency_THz": self.frequency_thz, "kappa_GHz": self.kappa_ghz, "finesse": self.finesse, "mode_character": self.mode_character}

    def at(self, air_gap_um: float) -> np.ndarray:
        """Resonance frequencies found at one air gap, ascending"""
        return np.sort(self.frequency_thz[np.isclose(self.air_gap_um, air_gap_um)])

    def min_branch_separation(self) -> float:
        """Smallest frequency separation (THz) between neighboring resonances at any single air gap"""
        gaps = [np.diff(f).min() for g in np.unique(self.air_gap_um) if (f := self.at(g)).size > 1]
        return float(min(gaps)) if gaps else np.inf


def dispersion_diagram(geometry: CavityGeometry, air_gaps_um: Sequence[float], window_thz: tuple[float, float]) -> DispersionTable:
    """Resonance frequencies, linewidths and mode character over a grid of air gaps.

    Args:
        geometry (CavityGeometry): The cavity; its own air gap is replaced by each grid value
        air_gaps_um (Sequence[float]): Strictly increasing, positive air gaps (um)
        window_thz (tuple[float, float]): Frequency window

    Returns:
        DispersionTable: The resonances
    """
    gaps = np.asarray(air_gaps_um, dtype=float)
    require(gaps.size > 0 and np.all(gaps > 0) and np.all(np.diff(gaps) > 0), "air gaps must be positive and strictly increasing")

    rows = []
    for g in gaps:
        rows.extend((g, r.frequency_thz, r.kappa_ghz, r.finesse, r.mode_character) for r in find_resonances(geometry.with_air_gap(g), window_thz))
        log.debug("air gap %.4f um: %d resonance(s)", g, len(rows))

    cols = np.array(rows, dtype=float).reshape(-1, 5).T
    return DispersionTable(*cols)


##################################################################################################
######################################## C O U P L I N G #########################################
##################################################################################################


def coupling_rate_g(geometry: CavityGeometry, resonance: Resonance, emitter: EmitterParams, depth_nm: Optional[float] = None) -> float:
    """Emitter-cavity coupling g/2pi from the mode volume referenced to the diamond antinode, scaled by the relative field at the emitter
    and the position mismatch factor xi.

    Args:
        geometry (CavityGeometry): The cavity
        resonance (Resonance): The mode the emitter couples to
        emitter (EmitterParams): Supplies the linewidth and xi
        depth_nm (Optional[float], optional): Emitter depth below the diamond-air surface; defaults to the resonance's own `field_at_emitter`.

    Raises:
        ValidationError: If there is no diamond layer or the emitter lies outside it.

    Returns:
        float: g/2pi in MHz
    """
    if geometry.diamond is None:
        raise ValidationError("the emitter must sit in a diamond layer, but the cavity has none")

    volume_um3, _ = mode_volume(geometry, resonance.frequency_thz)
    lam = C_LIGHT / (resonance.frequency_thz * 1e12)
    gamma = 2 * np.pi * (emitter.gamma_rad_mhz + emitter.gamma_dark_mhz) * 1e6
    g0 = np.sqrt(3 * C_LIGHT * lam ** 2 * gamma / (8 * np.pi * geometry.n_diamond ** 3 * volume_um3 * 1e-18))

    f = resonance.field_at_emitter if depth_nm is None else field_at_depth(geometry, resonance.frequency_thz, depth_nm)
    return float(g0 * f * emitter.xi / (2 * np.pi) * 1e-6)


def coupling_regime(g_mhz: float, kappa_ghz: float, gamma_mhz: float, margin: float = 10.0) -> CouplingRegime:
    """Classifies the system as strongly (g > (kappa + gamma)/4) or weakly coupled and checks the gamma << g << kappa hierarchy.

    Args:
        g_mhz (float): g/2pi in MHz
        kappa_ghz (float): kappa/2pi in GHz
        gamma_mhz (float): gamma/2pi in MHz
        margin (float, optional): Ratio that counts as "much less than". Defaults to 10.0.

    Returns:
        CouplingRegime: The classification and the ratios behind it
    """
    require(g_mhz > 0 and kappa_ghz > 0 and gamma_mhz > 0, "g, kappa and gamma must be positive")
    kappa = kappa_ghz * 1e3
    return CouplingRegime("strong" if g_mhz > (kappa + gamma_mhz) / 4 else "weak", g_mhz / gamma_mhz >= margin, kappa / g_mhz >= margin, g_mhz / gamma_mhz, kappa / g_mhz)


##################################################################################################
##################################### D I S P E R S I O N ########################################
##################################################################################################


def track_resonance(geometry: CavityGeometry, guess_thz: float, halfwidth_ghz: float) -> float:
    """Locates the transmission maximum within `halfwidth_ghz` of `guess_thz`.

    Returns:
        float: The resonance frequency in THz
    """
    res = minimize_scalar(lambda x: -transmission(geometry, guess_thz + x * 1e-3), bounds=(-halfwidth_ghz, halfwidth_ghz), method="bounded", options={"xatol": 1e-7})
    if abs(abs(res.x) - halfwidth_ghz) < 1e-3 * halfwidth_ghz:
        raise RangeError(f"resonance left the tracking window around {guess_thz:.6f} THz")
    return guess_thz + res.x * 1e-3


def dispersion_slope(geometry: CavityGeometry, resonance: Resonance, step_nm: float = 0.05) -> float:
    """Local dnu/dL of a resonance with respect to the air gap, by central differences of the tracked peak.

    Returns:
        float: The slope in GHz/nm (negative: frequency falls as the gap grows)
    """
    guess = -resonance.frequency_thz * 1e3 / (geometry.air_gap_um * 1e3 + geometry.diamond_um * 1e3)
    hw = 2 * abs(guess) * step_nm + 3 * resonance.kappa_ghz
    f = [track_resonance(geometry.with_air_gap(geometry.air_gap_um + s * step_nm * 1e-3), resonance.frequency_thz + s * guess * step_nm * 1e-3, hw) for s in (1, -1)]
    return (f[0] - f[1]) * 1e3 / (2 * step_nm)


def cavity_response(geometry: CavityGeometry, resonance: Resonance) -> CavityResponse:
    """Linewidth and dispersion slope of a resonance, for vibration averaging"""
    return CavityResponse(resonance.kappa_ghz, dispersion_slope(geometry, resonance))


def _check_branch(resonance: Resonance, delta_ghz: float) -> None:
    if resonance.fsr_thz and abs(delta_ghz) > resonance.fsr_thz * 1e3 / 4:
        raise RangeError(f"detuning {delta_ghz:.4g} GHz leaves the monotone branch (|delta| <= FSR/4 = {resonance.fsr_thz * 250:.4g} GHz)")


def _tracked_shift(geometry: CavityGeometry, resonance: Resonance, length_nm: float, slope: float) -> float:
    delta = slope * length_nm
    f = track_resonance(geometry.with_air_gap(geometry.air_gap_um + length_nm * 1e-3), resonance.frequency_thz + delta * 1e-3, 0.2 * abs(delta) + 3 * resonance.kappa_ghz)
    return (f - resonance.frequency_thz) * 1e3


def length_to_detuning(geometry: CavityGeometry, resonance: Resonance, length_nm: float, nonlinear: bool = False) -> float:
    """Cavity frequency shift produced by lengthening the air gap by `length_nm`.

    Args:
        geometry (CavityGeometry): The cavity at zero detuning
        resonance (Resonance): The resonance being tuned
        length_nm (float): Air gap change (nm)
        nonlinear (bool, optional): Track the resonance through the full model instead of using the local slope. Defaults to False.

    Raises:
        RangeError: If the shift leaves the monotone branch.

    Returns:
        float: Detuning in GHz
    """
    slope = dispersion_slope(geometry, resonance)
    _check_branch(resonance, delta := slope * length_nm)
    return _tracked_shift(geometry, resonance, length_nm, slope) if nonlinear and length_nm else delta


def detuning_to_length(geometry: CavityGeometry, resonance: Resonance, delta_ghz: float, nonlinear: bool = False) -> float:
    """Equivalent air gap change L_det that shifts the resonance by `delta_ghz`.  Inverse of `length_to_detuning()`.

    Raises:
        RangeError: If the detuning leaves the monotone branch.

    Returns:
        float: L_det in nm
    """
    _check_branch(resonance, delta_ghz)
    if delta_ghz == 0:
        return 0.0

    slope = dispersion_slope(geometry, resonance)
    if not nonlinear:
        return delta_ghz / slope

    bound = 1.5 * abs(delta_ghz / slope)
    try:
        return brentq(lambda l: _tracked_shift(geometry, resonance, l, slope) - delta_ghz, -bound, bound, xtol=1e-9 * bound)
    except ValueError as e:
        raise RangeError(f"no air gap change within +/-{bound:.4g} nm reaches {delta_ghz:.4g} GHz") from e
