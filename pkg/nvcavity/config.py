"""Loads the TOML parameter files that describe a cavity, its emitter and the analysis settings"""

import logging
import os
import tomllib

from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from .constants import DEFAULTS, REF
from .core import NVCavityError, SchemaError, config_hash, require
from .emitter_purcell import CavityCoupling, EmitterParams, ExcitationForm
from .inference import SweepModel
from .layered_cavity import (CavityGeometry, CavityResponse, Layer, MirrorKind, MirrorSpec, Resonance, coupling_rate_g, dispersion_slope, find_resonances,
                             free_spectral_range)
from .photon_budget import BudgetSystem, EfficiencyChain, internal_efficiency
from .vibration_average import EnsembleShape, EnsembleSpec, Quadrature, VibrationSpec

log = logging.getLogger(__name__)

CONFIG_DIR_ENV = "NVCAVITY_CONFIG_DIR"
"""Environment variable naming a directory of config files, searched before the bundled ones"""

DEFAULT_CONFIG = "device.toml"

_SCHEMA: dict[str, frozenset] = {
    "": frozenset({"cavity", "emitter", "coupling", "vibration", "ensemble", "chain", "analysis", "synth"}),
    "cavity": frozenset({"air_gap_um", "fiber_roc_um", "fiber_mirror_diameter_um", "emitter_depth_nm", "window_thz", "kappa_ghz", "slope_ghz_per_nm", "finesse",
                         "design_finesse", "flat_mirror", "fiber_mirror", "diamond"}),
    "mirror": frozenset({"kind", "transmission_ppm", "loss_ppm", "layers", "stopband_center_thz", "substrate_index"}),
    "layer": frozenset({"thickness_nm", "refractive_index", "label"}),
    "emitter": frozenset({"tau0_ns", "beta0", "dark_ratio", "transition_thz", "xi", "p_in", "phi_p0"}),
    "coupling": frozenset({"g_mhz", "gamma_mhz", "detuning_ghz"}),
    "vibration": frozenset({"sigma_nm", "truncation", "quadrature_order", "method", "convergence_rtol"}),
    "ensemble": frozenset({"width_ghz", "enabled", "shape"}),
    "chain": frozenset({"eta_int", "kappa_fs_ghz", "eta_ext", "eta_psb", "eta_psb_range", "incoupling", "nd_filter_db", "eta_joint"}),
    "analysis": frozenset({"fit_window_ns", "model_bin_ns", "tcspc_bin_ns", "min_photons", "weak_limit", "excitation_form", "significance", "max_nfev", "ftol",
                           "xtol"}),
    "synth": frozenset({"purcell_branching", "tau0_ns", "sigma_nm", "amplitude", "span_ghz", "points", "mode"}),
}


@dataclass(frozen=True)
class AnalysisSettings:
    fit_window_ns: tuple[float, float] = DEFAULTS.FIT_WINDOW_NS
    model_bin_ns: float = DEFAULTS.MODEL_BIN_NS
    tcspc_bin_ns: float = DEFAULTS.TCSPC_BIN_NS
    min_photons: int = DEFAULTS.MIN_PHOTONS
    weak_limit: bool = True
    excitation_form: ExcitationForm = ExcitationForm.PRINTED
    significance: float = DEFAULTS.SIGNIFICANCE
    max_nfev: int = DEFAULTS.MAX_NFEV
    ftol: float = DEFAULTS.FTOL
    xtol: float = DEFAULTS.XTOL

    def __post_init__(self):
        require(self.min_photons >= 1 and self.max_nfev >= 1, "min_photons and max_nfev must be positive")
        require(self.significance > 0 and self.ftol > 0 and self.xtol > 0, "significance and fit tolerances must be positive")


@dataclass(frozen=True)
class SynthTruth:
    """Injected parameters for synthetic sweep datasets"""
    purcell_branching: float = 0.07
    tau0_ns: float = 10.9
    sigma_nm: float = 0.18
    amplitude: float = 1e7
    span_ghz: float = 120.0
    points: int = 41
    mode: str = "resonant"

    def params(self) -> dict[str, float]:
        return {"purcell_branching": self.purcell_branching, "tau0_ns": self.tau0_ns, "sigma_nm": self.sigma_nm, "amplitude": self.amplitude}


@dataclass(frozen=True)
class SystemConfig:
    """A parsed config file.  Values not given in the file fall back to the library defaults; `kappa_ghz`, `slope_ghz_per_nm` and `g_mhz`
    are computed from the geometry unless overridden."""
    geometry: CavityGeometry
    emitter: EmitterParams
    vibration: VibrationSpec
    ensemble: EnsembleSpec
    chain: EfficiencyChain
    analysis: AnalysisSettings = AnalysisSettings()
    synth: SynthTruth = SynthTruth()
    window_thz: tuple[float, float] = (465.0, 476.0)
    gamma_mhz: float = REF.GAMMA_MHZ
    detuning_ghz: float = 0.0
    g_override_mhz: Optional[float] = None
    kappa_override_ghz: Optional[float] = None
    slope_override_ghz_per_nm: Optional[float] = None
    finesse_override: Optional[float] = None
    design_finesse: float = REF.DESIGN_FINESSE
    source: Optional[Path] = None
    digest: Optional[str] = field(default=None, compare=False)

    @cached_property
    def resonance(self) -> Resonance:
        """The resonance nearest the emitter transition inside `window_thz`"""
        if not (found := find_resonances(self.geometry, self.window_thz)):
            raise NVCavityError(f"no cavity resonance between {self.window_thz[0]} and {self.window_thz[1]} THz")
        return min(found, key=lambda r: abs(r.frequency_thz - self.emitter.transition_thz))

    @cached_property
    def response(self) -> CavityResponse:
        kappa = self.kappa_override_ghz or self.resonance.kappa_ghz
        slope = self.slope_override_ghz_per_nm or dispersion_slope(self.geometry, self.resonance)
        return CavityResponse(kappa, slope)

    @cached_property
    def coupling(self) -> CavityCoupling:
        g = self.g_override_mhz if self.g_override_mhz is not None else coupling_rate_g(self.geometry, self.resonance, self.emitter)
        return CavityCoupling(g, self.response.kappa_ghz, self.gamma_mhz, self.detuning_ghz, self.chain.eta_zpl, self.chain.eta_psb)

    @property
    def finesse(self) -> float:
        return self.finesse_override or free_spectral_range(self.geometry) * 1e3 / self.response.kappa_ghz

    def budget_system(self) -> BudgetSystem:
        return BudgetSystem(self.emitter, self.coupling, self.response, self.vibration, self.chain, self.finesse, self.design_finesse, self.analysis.weak_limit,
                            self.analysis.excitation_form)

    def sweep_model(self) -> SweepModel:
        return SweepModel(self.response, self.emitter.beta0, self.emitter.dark_ratio, self.ensemble if self.ensemble.enabled else None, self.analysis.fit_window_ns,
                          self.analysis.model_bin_ns, self.vibration.quadrature_order, self.vibration.method)

    def with_overrides(self, sigma_nm: Optional[float] = None, quadrature_order: Optional[int] = None, truncation: Optional[float] = None,
                       convergence_rtol: Optional[float] = None, **analysis) -> "SystemConfig":
        """A copy with command-line overrides applied.  Arguments left as None keep the config's value.

        Args:
            sigma_nm (Optional[float], optional): rms length jitter. Defaults to None.
            quadrature_order (Optional[int], optional): Gauss-Hermite order. Defaults to None.
            truncation (Optional[float], optional): Trapezoid range in units of sigma. Defaults to None.
            convergence_rtol (Optional[float], optional): Allowed change under quadrature refinement. Defaults to None.
            analysis: Any `AnalysisSettings` field, e.g. max_nfev, ftol, xtol, significance or min_photons

        Returns:
            SystemConfig: this config if nothing changed, else an updated copy
        """
        vib_over = {k: v for k, v in (("sigma_nm", sigma_nm), ("quadrature_order", quadrature_order), ("truncation", truncation),
                                      ("convergence_rtol", convergence_rtol)) if v is not None}
        an_over = {k: v for k, v in analysis.items() if v is not None}
        if not vib_over and not an_over:
            return self
        return replace(self, vibration=replace(self.vibration, **vib_over), analysis=replace(self.analysis, **an_over))

    def tolerances(self) -> dict[str, Any]:
        """Numerical settings echoed into output metadata"""
        an = self.analysis
        return {"truncation": self.vibration.truncation, "quadrature_order": self.vibration.quadrature_order, "quadrature": self.vibration.method.value,
                "convergence_rtol": self.vibration.convergence_rtol, "fit_window_ns": list(an.fit_window_ns), "model_bin_ns": an.model_bin_ns,
                "max_nfev": an.max_nfev, "ftol": an.ftol, "xtol": an.xtol, "significance": an.significance, "min_photons": an.min_photons}


##################################################################################################
########################################## P A R S I N G #########################################
##################################################################################################


def _check_keys(path: Path, table: dict, schema: str, where: str) -> dict:
    if not isinstance(table, dict):
        raise SchemaError(path, f"[{where}] must be a table", column=where)
    if unknown := set(table) - _SCHEMA[schema]:
        raise SchemaError(path, f"unknown key(s) {sorted(unknown)} in [{where or 'top level'}]", column=where)
    return table


def _enum(path: Path, cls, value: str, where: str):
    try:
        return cls(value)
    except ValueError:
        raise SchemaError(path, f"{value!r} is not one of {[m.value for m in cls]}", column=where) from None


def _layer(path: Path, t: dict, where: str) -> Layer:
    return Layer(**_check_keys(path, t, "layer", where))


def _mirror(path: Path, t: dict, where: str) -> MirrorSpec:
    t = dict(_check_keys(path, t, "mirror", where))
    if "kind" in t:
        t["kind"] = _enum(path, MirrorKind, t["kind"], f"{where}.kind")
    t["layers"] = tuple(_layer(path, l, f"{where}.layers") for l in t.get("layers", ()))
    return MirrorSpec(**t)


def _build(path: Path, raw: dict) -> SystemConfig:
    _check_keys(path, raw, "", "")
    for name in ("cavity", "emitter", "chain"):
        if name not in raw:
            raise SchemaError(path, f"missing required table [{name}]", column=name)

    cav = dict(_check_keys(path, raw["cavity"], "cavity", "cavity"))
    over = {k: cav.pop(k, None) for k in ("kappa_ghz", "slope_ghz_per_nm", "finesse")}
    window = tuple(cav.pop("window_thz", (465.0, 476.0)))
    design = cav.pop("design_finesse", REF.DESIGN_FINESSE)
    geometry = CavityGeometry(_mirror(path, cav.pop("flat_mirror", {}), "cavity.flat_mirror"), _mirror(path, cav.pop("fiber_mirror", {}), "cavity.fiber_mirror"),
                              _layer(path, cav.pop("diamond"), "cavity.diamond") if "diamond" in cav else None, **cav)

    em = dict(_check_keys(path, raw["emitter"], "emitter", "emitter"))
    emitter = EmitterParams.from_lifetime(em.pop("tau0_ns"), em.pop("beta0"), em.pop("dark_ratio", 0.0), **em)

    cp = _check_keys(path, raw.get("coupling", {}), "coupling", "coupling")

    vib = dict(_check_keys(path, raw.get("vibration", {}), "vibration", "vibration"))
    if "method" in vib:
        vib["method"] = _enum(path, Quadrature, vib["method"], "vibration.method")
    vibration = VibrationSpec(**{"sigma_nm": 0.0, **vib})

    ens = dict(_check_keys(path, raw.get("ensemble", {}), "ensemble", "ensemble"))
    if "shape" in ens:
        ens["shape"] = _enum(path, EnsembleShape, ens["shape"], "ensemble.shape")
    ensemble = EnsembleSpec(**ens)

    ch = dict(_check_keys(path, raw["chain"], "chain", "chain"))
    if "kappa_fs_ghz" in ch:
        if over["kappa_ghz"] is None:
            raise SchemaError(path, "kappa_fs_ghz needs cavity.kappa_ghz to fix the internal efficiency", column="chain.kappa_fs_ghz")
        ch["eta_int"] = internal_efficiency(ch.pop("kappa_fs_ghz"), over["kappa_ghz"])
    if "eta_psb_range" in ch:
        ch["eta_psb_range"] = tuple(ch["eta_psb_range"])
    chain = EfficiencyChain(**ch)

    an = dict(_check_keys(path, raw.get("analysis", {}), "analysis", "analysis"))
    if "fit_window_ns" in an:
        an["fit_window_ns"] = tuple(an["fit_window_ns"])
    if "excitation_form" in an:
        an["excitation_form"] = _enum(path, ExcitationForm, an["excitation_form"], "analysis.excitation_form")

    return SystemConfig(geometry, emitter, vibration, ensemble, chain, AnalysisSettings(**an),
                        SynthTruth(**_check_keys(path, raw.get("synth", {}), "synth", "synth")), window, cp.get("gamma_mhz", REF.GAMMA_MHZ),
                        cp.get("detuning_ghz", 0.0), cp.get("g_mhz"), over["kappa_ghz"], over["slope_ghz_per_nm"], over["finesse"], design, path)


def default_config_path(name: str = DEFAULT_CONFIG) -> Path:
    """Resolves a config file name: the directory in $NVCAVITY_CONFIG_DIR first, then the files bundled with the package"""
    if (d := os.environ.get(CONFIG_DIR_ENV)) and (p := Path(d) / name).is_file():
        return p
    return Path(str(resources.files("nvcavity") / "data" / name))


def load_config(path: Union[str, Path, None] = None) -> SystemConfig:
    """Parses a TOML config file into typed parameter objects.

    Args:
        path (Union[str, Path, None], optional): The file to read; a bare file name is looked up with `default_config_path()`.  Defaults to
        None, the bundled reference device config.

    Raises:
        SchemaError: If the file is missing, is not valid TOML, has unknown keys or misses required tables.
        ValidationError: If a value is physically invalid.

    Returns:
        SystemConfig: The parsed config
    """
    path = default_config_path() if path is None else Path(path)
    if not path.is_file() and path.parent == Path("."):
        path = default_config_path(path.name)
    if not path.is_file():
        raise SchemaError(path, "no such config file")

    data = path.read_bytes()
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise SchemaError(path, f"not a valid TOML file: {e}") from e

    try:
        cfg = _build(path, raw)
    except KeyError as e:
        raise SchemaError(path, f"missing required key {e}") from e
    except TypeError as e:
        raise SchemaError(path, f"malformed table: {e}") from e

    log.debug("Loaded config '%s'", path)
    return replace(cfg, digest=config_hash(data))
