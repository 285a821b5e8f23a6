"""Photon budget of the cavity-coupled emitter: where detected ZPL photons are lost, how much of that is due to vibrations, what
excitation probability the measured counts imply, and how far proposed upgrades would raise collection."""

import logging

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from rich.table import Table

from .constants import REF, IMPROVEMENTS
from .core import ValidationError, require
from .emitter_purcell import (CavityCoupling, EmitterParams, ExcitationForm, collectable_zpl_fraction, detuned_purcell, excitation_probability,
                              psb_fraction)
from .layered_cavity import CavityResponse
from .vibration_average import VibrationSpec, length_nodes, resonant_sweep

log = logging.getLogger(__name__)

CATEGORIES = ("excitation", "collection", "zpl_branching")

_VIBRATION_SHARES = dict(zip(CATEGORIES, (0.5 / 2.5, 1 / 2.5, 1 / 2.5)))
"""Exponent shares of the T^(5/2) weight: excitation sqrt(T), collection T, Purcell enhancement T"""


def db(p: float) -> float:
    """Loss in dB of a probability (or ratio) `p`, -10 log10(p)"""
    return float(-10 * np.log10(p))


@dataclass(frozen=True)
class EfficiencyChain:
    """Detection efficiencies downstream of the emitter.  `eta_int` and `eta_ext` are an assumed split; `eta_joint`, when set, is the
    measured total they were split from (which already includes vibration losses)."""
    eta_int: float
    eta_ext: float
    eta_psb: float = 0.0077
    eta_psb_range: tuple[float, float] = (0.0043, 0.0121)
    incoupling: float = 0.025
    nd_filter_db: float = 0.0
    eta_joint: Optional[float] = None

    def __post_init__(self):
        for name in ("eta_int", "eta_ext", "eta_psb", "incoupling"):
            require(0 <= (v := getattr(self, name)) <= 1, "%s must lie in [0, 1], got %s", name, v)
        require(0 <= self.eta_psb_range[0] <= self.eta_psb_range[1] <= 1, "invalid PSB efficiency range %s", self.eta_psb_range)
        require(self.nd_filter_db >= 0, "ND filter attenuation must be non-negative")
        require(self.eta_joint is None or 0 < self.eta_joint <= 1, "joint collection must lie in (0, 1], got %s", self.eta_joint)

    @property
    def eta_zpl(self) -> float:
        """Total ZPL collection, eta_int * eta_ext"""
        return self.eta_int * self.eta_ext

    @classmethod
    def from_kappa(cls, kappa_fs_ghz: float, kappa_ghz: float, eta_ext: float, **kwargs) -> "EfficiencyChain":
        """Chain whose internal efficiency is the flat-mirror share of the cavity linewidth"""
        return cls(internal_efficiency(kappa_fs_ghz, kappa_ghz), eta_ext, **kwargs)

    def nd_corrected(self, counts: float) -> float:
        """Counts corrected for the ND filter in the detection path"""
        return counts * 10 ** (self.nd_filter_db / 10)


def internal_efficiency(kappa_fs_ghz: float, kappa_ghz: float) -> float:
    """eta_int = kappa_FS / kappa, the fraction of cavity decay leaving through the flat (collection) mirror.

    Raises:
        ValidationError: If kappa_FS exceeds kappa or either is not positive.
    """
    require(kappa_fs_ghz > 0 and kappa_ghz > 0, "linewidths must be positive")
    if kappa_fs_ghz > kappa_ghz:
        raise ValidationError(f"kappa_FS ({kappa_fs_ghz} GHz) cannot exceed the total linewidth ({kappa_ghz} GHz)")
    return kappa_fs_ghz / kappa_ghz


def psb_efficiency_range(geometric: tuple[float, float] = REF.PSB_GEOMETRIC, mirror: float = REF.PSB_MIRROR, path: float = REF.PSB_PATH,
                         detector: float = REF.PSB_DETECTOR) -> tuple[float, float]:
    """PSB collection efficiency bounds: the dipole-orientation dependent geometric range times mirror, path and detector transmission"""
    k = mirror * path * detector
    return geometric[0] * k, geometric[1] * k


def fiber_path_efficiency(reflection_db: float, cavity_reflection: float = 1.0) -> float:
    """Single-pass efficiency of the fiber path from a reflection measurement that passes it twice and reflects off the cavity once"""
    require(reflection_db <= 0 and 0 < cavity_reflection <= 1, "reflection must be a loss and cavity reflection in (0, 1]")
    return float(np.sqrt(10 ** (reflection_db / 10) / cavity_reflection))


@dataclass(frozen=True)
class BudgetSystem:
    """The full parameter set the budget is evaluated on"""
    emitter: EmitterParams
    coupling: CavityCoupling
    response: CavityResponse
    vibration: VibrationSpec
    chain: EfficiencyChain
    finesse: float = 2000.0
    design_finesse: float = REF.DESIGN_FINESSE
    weak_limit: bool = True
    form: ExcitationForm = ExcitationForm.PRINTED

    def with_sigma(self, sigma_nm: float) -> "BudgetSystem":
        return replace(self, vibration=replace(self.vibration, sigma_nm=sigma_nm))

    def with_finesse(self, finesse: float) -> "BudgetSystem":
        """Same mirrors and coupling g at a different achieved finesse: kappa and eta_int scale with 1/finesse and finesse"""
        require(0 < finesse <= self.design_finesse, "finesse must lie in (0, %s], got %s", self.design_finesse, finesse)
        s = self.finesse / finesse
        kappa = self.coupling.kappa_ghz * s
        return replace(self, coupling=replace(self.coupling, kappa_ghz=kappa), response=replace(self.response, kappa_ghz=kappa),
                       chain=replace(self.chain, eta_int=min(self.chain.eta_int / s, 1.0)), finesse=finesse)

    @property
    def p_ex0(self) -> float:
        """On-resonance excitation probability per pulse, including initialization"""
        return float(self.emitter.p_in * excitation_probability(self.emitter.phi_p0, 0.0, self.coupling.kappa_ghz, self.weak_limit, self.form))

    @property
    def zpl_fraction0(self) -> float:
        """On-resonance, vibration-free fraction of decays into the cavity ZPL mode"""
        return float(collectable_zpl_fraction(self.coupling.purcell0, self.emitter.beta0, self.emitter.dark_ratio))

    def detected_zpl(self) -> float:
        """Detected ZPL photons per pulse from the vibration-averaged resonant model at zero detuning"""
        coupling = replace(self.coupling, eta_zpl0=self.chain.eta_zpl)
        return float(resonant_sweep(self.response, self.emitter, coupling, self.vibration, 0.0, self.weak_limit, self.form, check_convergence=False).counts[0])

    def detected_psb(self) -> float:
        """Detected PSB photons per pulse from the same model"""
        coupling = replace(self.coupling, eta_psb=self.chain.eta_psb)
        return float(resonant_sweep(self.response, self.emitter, coupling, self.vibration, 0.0, self.weak_limit, self.form, check_convergence=False).psb_counts[0])

    def zpl_fraction(self) -> float:
        """Fraction of decays into the cavity ZPL mode, averaged over the length distribution"""
        slope = abs(self.response.slope_ghz_per_nm)
        dl, w = length_nodes(self.vibration.sigma_nm, self.coupling.kappa_ghz / 2 / slope, self.vibration)
        f = detuned_purcell(self.coupling.purcell0, self.response.slope_ghz_per_nm * dl, self.coupling.kappa_ghz)
        return float(np.sum(w * collectable_zpl_fraction(f, self.emitter.beta0, self.emitter.dark_ratio)))


##################################################################################################
########################################## L E D G E R ###########################################
##################################################################################################


class LedgerEntry(NamedTuple):
    """One multiplicative loss factor"""
    label: str
    db: float
    category: str
    cause: str
    linear: float


@dataclass(frozen=True)
class LossLedger:
    """dB breakdown of the detected photons per pulse.  Entries multiply to `detected`."""
    entries: tuple[LedgerEntry, ...]
    detected: float
    channel: str = "zpl"

    def totals(self) -> dict[str, float]:
        """Loss per category in dB"""
        return {c: sum(e.db for e in self.entries if e.category == c) for c in dict.fromkeys(e.category for e in self.entries)}

    @property
    def total_db(self) -> float:
        return sum(e.db for e in self.entries)

    @property
    def vibration_db(self) -> float:
        return sum(e.db for e in self.entries if e.cause == "vibration")

    def columns(self) -> dict[str, list]:
        return {"label": [e.label for e in self.entries], "db": [e.db for e in self.entries], "category": [e.category for e in self.entries],
                "cause": [e.cause for e in self.entries], "linear": [e.linear for e in self.entries]}


def _entry(label: str, p: float, category: str, cause: str = "internal") -> LedgerEntry:
    require(0 < p <= 1, "%s must lie in (0, 1] to enter the ledger, got %s", label, p)
    return LedgerEntry(label, db(p), category, cause, float(p))


def budget_decompose(system: BudgetSystem) -> LossLedger:
    """Splits the detected ZPL photons per pulse into dB losses by category.  Intrinsic factors are evaluated on resonance without
    vibrations; the remaining gap to the vibration-averaged model is shared out by each factor's exponent in the T^(5/2) weight.

    Args:
        system (BudgetSystem): The parameter set

    Returns:
        LossLedger: entries whose dB sum equals -10 log10 of the modelled detected ZPL photons per pulse
    """
    e, chain = system.emitter, system.chain
    entries = [_entry("initialization", e.p_in, "excitation"),
               _entry("pulse area", system.p_ex0 / e.p_in, "excitation"),
               _entry("internal collection", chain.eta_int, "collection"),
               _entry("external collection", chain.eta_ext, "collection"),
               _entry("ZPL branching into cavity", system.zpl_fraction0, "zpl_branching")]

    ideal = system.p_ex0 * system.zpl_fraction0 * chain.eta_zpl
    detected = system.detected_zpl()
    gap = db(detected / ideal)
    log.debug("Vibration gap %.3f dB (%.4g of %.4g photons per pulse)", gap, detected, ideal)

    for cat, share in _VIBRATION_SHARES.items():
        d = gap * share
        entries.append(LedgerEntry(f"vibrations ({cat.replace('_', ' ')})", d, cat, "vibration", 10 ** (-d / 10)))

    return LossLedger(tuple(entries), detected)


def psb_ledger(system: BudgetSystem) -> LossLedger:
    """The same breakdown for detected PSB photons.  Vibrations only enter through the excitation, with a net gain from the larger
    PSB share off resonance folded into the single vibration entry."""
    e, chain = system.emitter, system.chain
    branching = float(psb_fraction(system.coupling.purcell0, e.beta0, e.dark_ratio))
    entries = [_entry("initialization", e.p_in, "excitation"),
               _entry("pulse area", system.p_ex0 / e.p_in, "excitation"),
               _entry("PSB collection", chain.eta_psb, "collection"),
               _entry("PSB branching", branching, "psb_branching")]

    detected = system.detected_psb()
    d = db(detected / (system.p_ex0 * branching * chain.eta_psb))
    entries.append(LedgerEntry("vibrations (excitation)", d, "excitation", "vibration", 10 ** (-d / 10)))
    return LossLedger(tuple(entries), detected, "psb")


def ledger_table(ledger: LossLedger, title: Optional[str] = None) -> Table:
    """Renders a ledger for the console"""
    table = Table(title=title or f"{ledger.channel.upper()} loss budget")
    for name, justify in (("Loss", "left"), ("Category", "left"), ("Cause", "left"), ("dB", "right"), ("Factor", "right")):
        table.add_column(name, justify=justify)

    for e in ledger.entries:
        table.add_row(e.label, e.category, e.cause, f"{e.db:.2f}", f"{e.linear:.3g}")

    table.add_section()
    for cat, total in ledger.totals().items():
        table.add_row(f"[bold]{cat}[/bold]", "", "", f"{total:.2f}", "")
    table.add_row("[bold]total[/bold]", "", "", f"{ledger.total_db:.2f}", f"{ledger.detected:.3g}")
    return table


class Counterfactual(NamedTuple):
    """The modelled system with and without vibrations"""
    zpl_fraction0: float
    zpl_fraction: float
    detected_zpl0: float
    detected_zpl: float
    gap_db: float


def zero_vibration_counterfactual(system: BudgetSystem) -> Counterfactual:
    """Re-evaluates the full model with the length jitter switched off.

    Returns:
        Counterfactual: ZPL fraction and detected ZPL photons per pulse at sigma = 0 and at the configured sigma, with the dB gap
    """
    still = system.with_sigma(0.0)
    d0, d = still.detected_zpl(), system.detected_zpl()
    return Counterfactual(still.zpl_fraction(), system.zpl_fraction(), d0, d, db(d / d0))


##################################################################################################
######################################## B A C K - O U T #########################################
##################################################################################################


class Backout(NamedTuple):
    """Excitation probability implied by measured counts, with the interval from uncertain efficiencies"""
    p_ex: float
    low: float
    high: float
    channel: str


def excitation_backout(measured: float, channel: str, chain: EfficiencyChain, branching: float) -> Backout:
    """Infers the excitation probability per pulse from detected photons per pulse.

    Args:
        measured (float): Detected photons per pulse, already corrected for any ND filter
        channel (str): "zpl" (divides by branching * eta_int * eta_ext) or "psb" (divides by branching * eta_psb)
        chain (EfficiencyChain): Collection efficiencies
        branching (float): Fraction of decays into the channel

    Raises:
        ValidationError: If the counts are not positive, an efficiency is zero, or the channel is unknown.

    Returns:
        Backout: central estimate and interval
    """
    require(measured > 0, "measured counts must be positive, got %s", measured)
    require(0 < branching <= 1, "branching must lie in (0, 1], got %s", branching)

    match channel:
        case "zpl":
            eff = branching * chain.eta_zpl
            require(eff > 0, "ZPL collection efficiency is zero")
            p = measured / eff
            return Backout(p, p, p, channel)
        case "psb":
            lo_eta, hi_eta = chain.eta_psb_range
            require(lo_eta > 0 and chain.eta_psb > 0, "PSB collection efficiency is zero")
            return Backout(measured / (branching * chain.eta_psb), measured / (branching * hi_eta), measured / (branching * lo_eta), channel)
        case _:
            raise ValidationError(f"unknown channel {channel!r}, expected 'zpl' or 'psb'")


def corrected_detection(measured: float, p_ex: float) -> float:
    """Detected photons per pulse rescaled to unit excitation probability"""
    require(0 < p_ex <= 1, "excitation probability must lie in (0, 1], got %s", p_ex)
    return measured / p_ex


class SILComparison(NamedTuple):
    corrected: float
    reference: float
    ratio: float


def sil_benchmark(corrected: float, reference: float = REF.SIL_ZPL_PER_PULSE) -> SILComparison:
    """Compares excitation-corrected ZPL photons per pulse with a solid-immersion-lens emitter"""
    require(corrected >= 0 and reference > 0, "counts must be non-negative and the reference positive")
    return SILComparison(corrected, reference, corrected / reference)


##################################################################################################
###################################### P R O J E C T I O N S #####################################
##################################################################################################


OVERRIDES = frozenset({"sigma_nm", "finesse", "g_scale", "p_in", "phi_p0", "eta_int", "eta_ext"})
"""Parameters an upgrade may change for a model recompute"""


@dataclass(frozen=True)
class Upgrade:
    """One proposed improvement, given either as a fixed enhancement factor or as parameter overrides for the model"""
    label: str
    factor: Optional[float] = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        require((self.factor is None) != (not self.overrides), "upgrade %r needs exactly one of a factor or overrides", self.label)
        require(self.factor is None or self.factor > 0, "upgrade factor must be positive, got %s", self.factor)
        if unknown := set(self.overrides) - OVERRIDES:
            raise ValidationError(f"upgrade {self.label!r} overrides unknown parameters {sorted(unknown)}")


@dataclass(frozen=True)
class ImprovementScenario:
    upgrades: tuple[Upgrade, ...]
    baseline: float = IMPROVEMENTS.BASELINE_ZPL_PER_PULSE

    def __post_init__(self):
        require(0 < self.baseline <= 1, "baseline must lie in (0, 1], got %s", self.baseline)

    @classmethod
    def reference(cls) -> "ImprovementScenario":
        """The factor-only improvement chain for the current device"""
        return cls(tuple(Upgrade(label, factor) for label, factor in IMPROVEMENTS.CHAIN))


class ProjectionRow(NamedTuple):
    label: str
    factor: float
    cumulative: float
    display: str
    capped: bool
    model_recomputed: bool


def _one_figure(p: float) -> str:
    """Percentage rounded to one significant figure"""
    return f"{float(f'{100 * p:.1g}'):g}%"


def apply_overrides(system: BudgetSystem, overrides: dict) -> BudgetSystem:
    """A copy of `system` with the upgrade's parameter overrides applied"""
    for key, value in overrides.items():
        match key:
            case "sigma_nm":
                system = system.with_sigma(value)
            case "finesse":
                system = system.with_finesse(value)
            case "g_scale":
                system = replace(system, coupling=replace(system.coupling, g_mhz=system.coupling.g_mhz * value))
            case "p_in" | "phi_p0":
                system = replace(system, emitter=replace(system.emitter, **{key: value}))
            case "eta_int" | "eta_ext":
                system = replace(system, chain=replace(system.chain, **{key: value}))
    return system


def project_improvements(scenario: ImprovementScenario, system: Optional[BudgetSystem] = None) -> list[ProjectionRow]:
    """Cumulative ZPL collection after each upgrade in turn.

    Args:
        scenario (ImprovementScenario): Ordered upgrades and the baseline detected ZPL photons per pulse
        system (Optional[BudgetSystem], optional): Model used for upgrades given as overrides; its state accumulates along the chain.
        Defaults to None.

    Raises:
        ValidationError: If an upgrade needs the model and no system was given.

    Returns:
        list[ProjectionRow]: one row per upgrade; cumulative values above 1 are capped and flagged
    """
    rows, p = [], scenario.baseline
    before = system.detected_zpl() if system else None

    for u in scenario.upgrades:
        if u.overrides:
            require(system is not None, "upgrade %r needs a model system", u.label)
            system = apply_overrides(system, u.overrides)
            factor = (after := system.detected_zpl()) / before
            before = after
            log.info("%s: model gain x%.3g", u.label, factor)
        else:
            factor = u.factor

        p *= factor
        if capped := p > 1:
            log.warning("Projection exceeds unit probability after %r; capping", u.label)
            p = 1.0
        rows.append(ProjectionRow(u.label, float(factor), float(p), _one_figure(p), capped, bool(u.overrides)))

    return rows


def projection_columns(rows: list[ProjectionRow]) -> dict[str, list]:
    return {name: [getattr(r, name) for r in rows] for name in ProjectionRow._fields}


def finesse_sweep(system: BudgetSystem, finesses, sigmas_nm) -> dict[str, np.ndarray]:
    """ZPL emission fraction and outcoupled ZPL fraction (times eta_int) against finesse for several vibration levels, with g and the
    mirror losses held at the system's values.

    Args:
        system (BudgetSystem): Reference system; its `finesse` anchors the scaling of kappa and eta_int
        finesses (ArrayLike): Finesse values, each at most the design finesse
        sigmas_nm (ArrayLike): Vibration levels (nm)

    Returns:
        dict[str, np.ndarray]: "finesse" plus "zpl_fraction_<sigma>" and "outcoupled_<sigma>" columns
    """
    finesses = np.atleast_1d(np.asarray(finesses, dtype=float))
    out = {"finesse": finesses}
    for s in np.atleast_1d(sigmas_nm):
        variants = [system.with_sigma(float(s)).with_finesse(f) for f in finesses]
        out[f"zpl_fraction_{s:g}"] = np.array([v.zpl_fraction() for v in variants])
        out[f"outcoupled_{s:g}"] = out[f"zpl_fraction_{s:g}"] * np.array([v.chain.eta_int for v in variants])
    return out
