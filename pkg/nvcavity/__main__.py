"""Main entry point for nvcavity"""

import argparse
import logging
import sys
import tomllib

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from rich.console import Console
from rich.logging import RichHandler

from .config import SystemConfig, load_config
from .constants import IMPROVEMENTS
from .core import NVCavityError, SchemaError, ValidationError, metadata, write_csv, write_json
from .emitter_purcell import psb_fraction
from .inference import SweepDataset, SweepModel, fit_result_to_dict, fit_sweep_joint, g2_analyze, ple_analyze, read_g2, read_ple, synth_experiment
from .layered_cavity import coupling_regime, dispersion_diagram
from .photon_budget import (ImprovementScenario, Upgrade, budget_decompose, corrected_detection, excitation_backout, finesse_sweep, ledger_table,
                            project_improvements, projection_columns, psb_ledger, sil_benchmark, zero_vibration_counterfactual)
from .vibration_average import CryostatPhaseProfile, broadened_lineshape, offresonant_sweep, phase_forward_model, resonant_sweep, vibration_linewidth

log = logging.getLogger(__name__)

_PRESETS = {"loss-budget": "budget", "roadmap": "project", "finesse-tradeoff": "project"}


class _Run:
    """Shared state of one invocation: the parsed arguments, the config and the output directory"""

    def __init__(self, args: argparse.Namespace, cfg: SystemConfig) -> None:
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.console = Console(no_color=args.no_color, quiet=args.quiet)

    def meta(self, **extra) -> dict:
        return metadata(self.cfg.digest, self.args.seed, config=str(self.cfg.source), **self.cfg.tolerances(), **extra)

    def pmap(self, fn, items: list) -> list:
        if self.args.threads <= 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.args.threads) as pool:
            return list(pool.map(fn, items))


##################################################################################################
######################################## C O M M A N D S #########################################
##################################################################################################


def cmd_dispersion(run: _Run) -> None:
    """Resonance frequencies against air gap"""
    a, cfg = run.args, run.cfg
    gaps = np.linspace(a.gap_min_um or cfg.geometry.air_gap_um - 0.15, a.gap_max_um or cfg.geometry.air_gap_um + 0.15, a.points)
    table = dispersion_diagram(cfg.geometry, gaps, cfg.window_thz)
    log.info("Minimum branch separation %.4g THz", table.min_branch_separation())
    write_csv(run.out / "dispersion.csv", table.columns(), run.meta(window_thz=list(cfg.window_thz)))


def cmd_sweep(run: _Run) -> None:
    """Forward-modelled counts and lifetime across a length sweep"""
    a, cfg = run.args, run.cfg
    l_det = np.linspace(-a.span_nm, a.span_nm, a.points)
    kw = {"fit_window_ns": cfg.analysis.fit_window_ns, "model_bin_ns": cfg.analysis.model_bin_ns}
    if a.mode == "resonant":
        curves = resonant_sweep(cfg.response, cfg.emitter, cfg.coupling, cfg.vibration, l_det, cfg.analysis.weak_limit, cfg.analysis.excitation_form, **kw)
    else:
        curves = offresonant_sweep(cfg.response, cfg.emitter, cfg.coupling, cfg.vibration, l_det, cfg.ensemble if cfg.ensemble.enabled else None, **kw)

    regime = coupling_regime(cfg.coupling.g_mhz, cfg.coupling.kappa_ghz, cfg.coupling.gamma_mhz)
    log.info("%s coupling (%s), F = %.3g", regime.regime, regime.hierarchy, cfg.coupling.purcell0)
    write_csv(run.out / f"sweep_{a.mode}.csv", curves.columns(), run.meta(mode=a.mode, sigma_nm=cfg.vibration.sigma_nm, slope_ghz_per_nm=cfg.response.slope_ghz_per_nm))


def _sweep_prediction(dataset: SweepDataset, model: SweepModel, fit) -> tuple[np.ndarray, np.ndarray]:
    counts, tau = np.empty(dataset.counts.size), np.empty(dataset.counts.size)
    for s in dataset.sessions:
        i = dataset.session == s
        off = fit[f"offset_{s}"] if f"offset_{s}" in fit.names else 0.0
        counts[i], tau[i] = model.curves(dataset.mode, fit["purcell_branching"], fit["tau0_ns"], fit["sigma_nm"], dataset.detuning_ghz[i] - fit["center_ghz"] - off)
    return fit["amplitude"] * counts, tau


def cmd_fit(run: _Run) -> None:
    """Joint counts + lifetime fit of a sweep dataset.  Nothing is written unless the fit succeeds; fit.json goes last."""
    an = run.cfg.analysis
    dataset = SweepDataset.from_csv(run.args.dataset)
    model = run.cfg.sweep_model()
    fit = fit_sweep_joint(dataset, model, max_nfev=an.max_nfev, ftol=an.ftol, xtol=an.xtol)

    counts, tau = _sweep_prediction(dataset, model, fit)
    residuals = dataset.columns() | {"model_counts": counts, "model_lifetime_ns": tau, "counts_residual": (dataset.counts - counts) / dataset.counts_err,
                                     "lifetime_residual": (dataset.lifetime_ns - tau) / dataset.lifetime_err_ns}
    payload = fit_result_to_dict(fit, purcell=1 + fit["purcell_branching"] / model.beta0)

    meta = run.meta(dataset=str(run.args.dataset), mode=dataset.mode)
    write_csv(run.out / "fit_residuals.csv", residuals, meta)
    write_json(run.out / "fit.json", payload, meta)


def cmd_ple(run: _Run) -> None:
    """Per-scan and drift-corrected PLE linewidths"""
    res = ple_analyze(read_ple(run.args.traces), run.cfg.analysis.significance)
    meta = run.meta(traces=str(run.args.traces))
    write_json(run.out / "ple.json", {"raw": res.raw._asdict(), "centered": res.centered._asdict(), "flagged": res.flagged, "n_fitted": len(res.fits)}, meta)
    write_csv(run.out / "ple_fits.csv", res.columns(), meta)


def cmd_g2(run: _Run) -> None:
    """Zero-delay autocorrelation of a coincidence histogram"""
    res = g2_analyze(read_g2(run.args.histogram), run.args.model)
    payload = {k: v for k, v in res._asdict().items() if k not in ("fit", "normalized")} | {"normalized": res.normalized}
    if res.fit:
        payload["fit"] = fit_result_to_dict(res.fit)
    write_json(run.out / "g2.json", payload, run.meta(histogram=str(run.args.histogram), model=run.args.model))


def cmd_budget(run: _Run) -> None:
    """ZPL and PSB loss ledgers, the zero-vibration counterfactual and the excitation back-out"""
    a, system = run.args, run.cfg.budget_system()
    zpl, psb, cf = budget_decompose(system), psb_ledger(system), zero_vibration_counterfactual(system)

    chain = system.chain
    measured = chain.nd_corrected(a.measured_zpl) if a.nd_corrected else a.measured_zpl
    back = excitation_backout(measured, "zpl", chain, a.branching or system.zpl_fraction())
    sil = sil_benchmark(corrected_detection(measured, min(back.p_ex, 1.0)))
    payload = {"zpl": {"totals_db": zpl.totals(), "total_db": zpl.total_db, "vibration_db": zpl.vibration_db, "detected": zpl.detected},
               "psb": {"totals_db": psb.totals(), "total_db": psb.total_db, "detected": psb.detected},
               "counterfactual": cf._asdict(), "backout_zpl": back._asdict(), "sil": sil._asdict()}
    if a.measured_psb:
        branching = a.psb_branching or float(psb_fraction(system.coupling.purcell0, system.emitter.beta0, system.emitter.dark_ratio))
        payload["backout_psb"] = excitation_backout(a.measured_psb, "psb", chain, branching)._asdict()

    meta = run.meta(sigma_nm=system.vibration.sigma_nm)
    write_csv(run.out / "budget.csv", zpl.columns(), meta)
    write_csv(run.out / "budget_psb.csv", psb.columns(), meta)
    write_json(run.out / "budget.json", payload, meta)
    run.console.print(ledger_table(zpl))
    log.info("Zero vibration: ZPL fraction %.3g, %.3g detected per pulse (%.2f dB gap)", cf.zpl_fraction0, cf.detected_zpl0, cf.gap_db)


def _scenario(path: Path) -> ImprovementScenario:
    """Reads a scenario TOML: an optional `baseline` and an array of `[[upgrade]]` tables with `label` and `factor` or `overrides`"""
    try:
        raw = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise SchemaError(path, f"cannot read scenario: {e}") from e
    if not (ups := raw.get("upgrade")):
        raise SchemaError(path, "a scenario needs at least one [[upgrade]] table", column="upgrade")
    try:
        return ImprovementScenario(tuple(Upgrade(**u) for u in ups), raw.get("baseline", IMPROVEMENTS.BASELINE_ZPL_PER_PULSE))
    except TypeError as e:
        raise SchemaError(path, f"malformed upgrade: {e}", column="upgrade") from e


def cmd_project(run: _Run) -> None:
    """Cumulative ZPL collection after proposed upgrades, or collection against finesse"""
    a, system = run.args, run.cfg.budget_system()
    if a.finesse_sweep:
        finesses = list(np.linspace(system.finesse / 4, system.design_finesse, a.points))
        parts = run.pmap(lambda s: finesse_sweep(system, finesses, [s]), a.sigmas)
        cols = {"finesse": np.asarray(finesses)}
        for p in parts:
            cols |= {k: v for k, v in p.items() if k != "finesse"}
        write_csv(run.out / "finesse_sweep.csv", cols, run.meta(sigmas_nm=a.sigmas))
        return

    scenario = _scenario(Path(a.scenario)) if a.scenario else ImprovementScenario.reference()
    rows = project_improvements(scenario, system)
    write_csv(run.out / "projection.csv", projection_columns(rows), run.meta(baseline=scenario.baseline, scenario=a.scenario))
    for r in rows:
        log.info("%-45s x%-7.3g -> %s%s", r.label, r.factor, r.display, " (capped)" if r.capped else "")


def cmd_synth(run: _Run) -> None:
    """Synthetic datasets in the formats the analysis commands read"""
    a, cfg = run.args, run.cfg
    meta = run.meta(kind=a.kind, noise=a.noise)
    match a.kind:
        case "sweep":
            truth = cfg.synth.params() | {"center_ghz": 0.0}
            grid = np.linspace(-cfg.synth.span_ghz / 2, cfg.synth.span_ghz / 2, cfg.synth.points)
            ds = synth_experiment("sweep", a.seed, a.noise, model=cfg.sweep_model(), truth=truth, detuning_ghz=[grid], mode=cfg.synth.mode)
            write_csv(run.out / "synth_sweep.csv", ds.columns(), meta | {"mode": ds.mode, "truth": truth})
        case "decay":
            t, c = synth_experiment("decay", a.seed, a.noise, tau_ns=cfg.synth.tau0_ns, total_counts=1e5, bin_ns=cfg.analysis.tcspc_bin_ns, background=2.0)
            write_csv(run.out / "synth_decay.csv", {"t_ns": t, "counts": c}, meta)
        case "ple":
            traces = synth_experiment("ple", a.seed, a.noise, n_traces=40, fwhm_mhz=190.0, peak_counts=60.0, random_walk_mhz=40.0)
            write_csv(run.out / "synth_ple.csv", {"frequency_ghz": np.concatenate([t.frequency_ghz for t in traces]),
                                                  "counts": np.concatenate([t.counts for t in traces]),
                                                  "scan": np.concatenate([np.full(t.counts.size, t.scan_index) for t in traces])},
                      meta | {"bin_mhz": traces[0].bin_mhz})
        case "g2":
            h = synth_experiment("g2", a.seed, a.noise, plateau=200.0, g2_zero=0.02, background=1.0)
            write_csv(run.out / "synth_g2.csv", {"k": h.k, "coincidences": h.coincidences, "background": h.background}, meta | {"train_length": h.train_length})


def cmd_vibration(run: _Run) -> None:
    """Vibration-broadened cavity line and the coldhead-phase forward model"""
    cfg = run.cfg
    width = vibration_linewidth(cfg.response, cfg.vibration.sigma_nm)
    nu = np.linspace(-4 * width, 4 * width, run.args.points)
    meta = run.meta(vibration_linewidth_ghz=width)
    write_csv(run.out / "lineshape.csv", {"detuning_ghz": nu, "bare": broadened_lineshape(nu, cfg.response, 0.0),
                                          "broadened": broadened_lineshape(nu, cfg.response, cfg.vibration.sigma_nm)}, meta)

    profile = CryostatPhaseProfile.synthetic()
    write_csv(run.out / "phase_profile.csv", {"phase": profile.phase, "sigma_nm": profile.sigma_nm}, meta)
    model = phase_forward_model(profile, cfg.response, cfg.emitter, cfg.coupling, cfg.vibration)
    write_json(run.out / "phase_model.json", {k: {"counts_per_pulse": c, "lifetime_ns": t} for k, (c, t) in model.items()}, meta)
    log.info("Vibration linewidth %.3g GHz (bare %.3g GHz)", width, cfg.response.kappa_ghz)


##################################################################################################
############################################ M A I N #############################################
##################################################################################################


def _parser() -> argparse.ArgumentParser:
    cli_parser = argparse.ArgumentParser(prog="nvcavity", description="NV center fiber-cavity simulation and analysis CLI")
    cli_parser.add_argument("--config", type=str, metavar="path", help="TOML config file (default: device.toml from $NVCAVITY_CONFIG_DIR or the bundled copy)")
    cli_parser.add_argument("--out", type=str, default=".", metavar="dir", help="output directory")
    cli_parser.add_argument("--seed", type=int, default=0, help="random seed, recorded in every output")
    cli_parser.add_argument("--quad-order", type=int, dest="quad_order", metavar="n", help="override the Gauss-Hermite order")
    cli_parser.add_argument("--sigma-nm", type=float, dest="sigma_nm", metavar="nm", help="override the rms length jitter")
    cli_parser.add_argument("--truncation", type=float, metavar="k", help="override the trapezoid range, in units of sigma")
    cli_parser.add_argument("--rtol", type=float, dest="convergence_rtol", metavar="r", help="allowed relative change under quadrature refinement")
    cli_parser.add_argument("--max-nfev", type=int, dest="max_nfev", metavar="n", help="evaluation budget of the sweep fit")
    cli_parser.add_argument("--ftol", type=float, metavar="r", help="relative cost tolerance of the sweep fit")
    cli_parser.add_argument("--xtol", type=float, metavar="r", help="relative step tolerance of the sweep fit")
    cli_parser.add_argument("--significance", type=float, metavar="z", help="PLE peak significance below which a scan is flagged")
    cli_parser.add_argument("--min-photons", type=int, dest="min_photons", metavar="n", help="photon floor of a phase-resolved window")
    cli_parser.add_argument("--threads", type=int, default=1, metavar="n", help="worker threads for independent model evaluations")
    cli_parser.add_argument("--preset", choices=tuple(_PRESETS), help="run a standard analysis of the configured device")
    cli_parser.add_argument("--no-color", action='store_true', dest="no_color", help="disables colored log output")
    cli_parser.add_argument("-q", action='store_true', dest="quiet", help="only log warnings and errors")

    sub = cli_parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("dispersion", help="resonance frequencies against air gap")
    p.add_argument("--gap-min-um", type=float, dest="gap_min_um")
    p.add_argument("--gap-max-um", type=float, dest="gap_max_um")
    p.add_argument("--points", type=int, default=61)

    p = sub.add_parser("sweep", help="forward-modelled length sweep")
    p.add_argument("--mode", choices=("offresonant", "resonant"), default="resonant")
    p.add_argument("--span-nm", type=float, default=0.6, dest="span_nm")
    p.add_argument("--points", type=int, default=121)

    p = sub.add_parser("fit", help="joint fit of a sweep dataset")
    p.add_argument("dataset", type=str)

    p = sub.add_parser("ple", help="PLE linewidth analysis")
    p.add_argument("traces", type=str)

    p = sub.add_parser("g2", help="autocorrelation analysis")
    p.add_argument("histogram", type=str)
    p.add_argument("--model", choices=("flat", "bunching"), default="flat")

    p = sub.add_parser("budget", help="photon loss budget")
    p.add_argument("--measured-zpl", type=float, default=IMPROVEMENTS.BASELINE_ZPL_PER_PULSE, dest="measured_zpl", help="detected ZPL photons per pulse")
    p.add_argument("--measured-psb", type=float, dest="measured_psb", help="detected PSB photons per pulse")
    p.add_argument("--branching", type=float, help="ZPL branching for the back-out (default: the model's)")
    p.add_argument("--psb-branching", type=float, dest="psb_branching", help="PSB branching for the back-out (default: the model's)")
    p.add_argument("--nd-corrected", action='store_true', dest="nd_corrected", help="scale the measured ZPL counts by the ND filter")

    p = sub.add_parser("project", help="improvement projections")
    p.add_argument("scenario", nargs="?", help="scenario TOML (default: the reference improvement chain)")
    p.add_argument("--finesse-sweep", action='store_true', dest="finesse_sweep")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.2, 0.01])
    p.add_argument("--points", type=int, default=40)

    p = sub.add_parser("synth", help="synthetic datasets")
    p.add_argument("--kind", choices=("sweep", "decay", "ple", "g2"), default="sweep")
    p.add_argument("--noise", choices=("poisson", "none"), default="poisson")

    p = sub.add_parser("vibration", help="vibration-broadened line and coldhead-phase model")
    p.add_argument("--points", type=int, default=201)

    return cli_parser


def _setup_logging(no_color: bool, quiet: bool) -> None:
    if no_color:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("{asctime}: {levelname}: {message}", "%Y-%m-%d %H:%M:%S", "{"))
    else:
        handler = RichHandler(rich_tracebacks=True)
    lg = logging.getLogger("nvcavity")
    lg.addHandler(handler)
    lg.setLevel("WARNING" if quiet else "DEBUG")


def _parse_args(argv: list[str]) -> tuple[argparse.ArgumentParser, argparse.Namespace]:
    cli_parser = _parser()
    args = cli_parser.parse_args(argv)
    if args.preset and args.command is None:
        args = cli_parser.parse_args(argv + [_PRESETS[args.preset]] + (["--finesse-sweep"] if args.preset == "finesse-tradeoff" else []))
    return cli_parser, args


def _run(cli_parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.command is None:
        cli_parser.print_help()
        return 0

    try:
        cfg = load_config(args.config).with_overrides(args.sigma_nm, args.quad_order, args.truncation, args.convergence_rtol, max_nfev=args.max_nfev,
                                                      ftol=args.ftol, xtol=args.xtol, significance=args.significance, min_photons=args.min_photons)
        run = _Run(args, cfg)

        match args.command:
            case "dispersion":
                cmd_dispersion(run)
            case "sweep":
                cmd_sweep(run)
            case "fit":
                cmd_fit(run)
            case "ple":
                cmd_ple(run)
            case "g2":
                cmd_g2(run)
            case "budget":
                cmd_budget(run)
            case "project":
                cmd_project(run)
            case "synth":
                cmd_synth(run)
            case "vibration":
                cmd_vibration(run)
    except ValidationError as e:
        log.error("%s", e)
        return 2
    except NVCavityError as e:
        log.error("%s", e)
        return 1
    except (OSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 1

    return 0


def main(argv: list[str] = None) -> int:
    """Runs one command.  Logging is left to the caller.

    Args:
        argv (list[str], optional): Arguments without the program name. Defaults to None, meaning `sys.argv[1:]`.

    Returns:
        int: the exit code: 0 on success, 1 on runtime or convergence errors, 2 on invalid input
    """
    return _run(*_parse_args(sys.argv[1:] if argv is None else list(argv)))


def _main():
    """Main driver, invoked when this file is run directly."""
    cli_parser, args = _parse_args(sys.argv[1:])
    _setup_logging(args.no_color, args.quiet)
    sys.exit(_run(cli_parser, args))


if __name__ == "__main__":
    _main()
