"""Miscellaneous methods and classes shared between the simulation, analysis and budget modules"""

import hashlib
import io
import json
import logging
import os
import re

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from tempfile import NamedTemporaryFile
from typing import Any, Union

import numpy as np
import pandas as pd

from scipy.optimize import least_squares

from . import __version__
from .constants import DEFAULTS

log = logging.getLogger(__name__)


class NVCavityError(Exception):
    """Base class for all errors raised by nvcavity"""


class ValidationError(NVCavityError, ValueError):
    """Raised when an input violates a physical or structural constraint"""


class RangeError(ValidationError):
    """Raised when an input lies outside the domain on which an operation is invertible"""


class SchemaError(ValidationError):
    """Raised when an input file does not match its documented format"""

    def __init__(self, path: Union[str, Path], message: str, line: int = None, column: str = None) -> None:
        """Initializer, creates a new SchemaError.

        Args:
            path (Union[str, Path]): The offending file
            message (str): What went wrong
            line (int, optional): 1-based line number in `path`, if known. Defaults to None.
            column (str, optional): The column name, if known. Defaults to None.
        """
        self.path = str(path)
        self.line = line
        self.column = column
        where = self.path + (f":{line}" if line is not None else "") + (f" [{column}]" if column else "")
        super().__init__(f"{where}: {message}")


class ConvergenceError(NVCavityError, RuntimeError):
    """Raised when a numerical routine fails to converge.  `diagnostics` carries whatever was available at the point of failure."""

    def __init__(self, message: str, diagnostics: dict = None) -> None:
        """Initializer, creates a new ConvergenceError.

        Args:
            message (str): What went wrong
            diagnostics (dict, optional): Best-so-far values, peak data, tolerances, etc. Defaults to None.
        """
        super().__init__(message)
        self.diagnostics: dict = diagnostics or {}


def require(condition: bool, message: str, *args) -> None:
    """Raises a `ValidationError` with `message % args` if `condition` is falsy.

    Args:
        condition (bool): The condition that must hold
        message (str): %-style message template
    """
    if not condition:
        raise ValidationError(message % args if args else message)


##################################################################################################
######################################## F I T T I N G ###########################################
##################################################################################################


@dataclass(frozen=True)
class FitResult:
    """The outcome of a weighted least-squares fit"""
    names: tuple[str, ...]
    values: np.ndarray
    errors: np.ndarray
    covariance: np.ndarray
    chi2_red: float
    n_iter: int
    success: bool
    message: str = ""
    at_bound: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def error(self, name: str) -> float:
        """Fetch the 1-sigma uncertainty of a parameter.

        Args:
            name (str): The parameter name

        Returns:
            float: sqrt of the matching diagonal entry of the covariance matrix
        """
        return float(self.errors[self.names.index(name)])

    @property
    def params(self) -> dict[str, tuple[float, float]]:
        """Parameter map of name -> (value, 1-sigma uncertainty)"""
        return {n: (float(v), float(e)) for n, v, e in zip(self.names, self.values, self.errors)}

    def to_dict(self) -> dict:
        """Converts this FitResult into a JSON-ready `dict`.

        Returns:
            dict: parameters, uncertainties, covariance, chi2 and iteration count
        """
        return {"parameters": {n: v for n, (v, _) in self.params.items()}, "uncertainties": {n: e for n, (_, e) in self.params.items()},
                "covariance": self.covariance.tolist(), "chi2_red": self.chi2_red, "n_iter": self.n_iter, "success": self.success,
                "message": self.message, "at_bound": list(self.at_bound), **self.extra}


def weighted_least_squares(residuals: Callable[[np.ndarray], np.ndarray], x0: Sequence[float], names: Sequence[str], bounds: tuple = (-np.inf, np.inf),
                           absolute_sigma: bool = True, max_nfev: int = DEFAULTS.MAX_NFEV, ftol: float = DEFAULTS.FTOL, xtol: float = DEFAULTS.XTOL,
                           gtol: float = DEFAULTS.GTOL, x_scale: Union[str, Sequence[float]] = "jac", raise_on_failure: bool = True) -> FitResult:
    """Minimizes the sum of squared, already-weighted `residuals` with a bounded trust-region (Levenberg-Marquardt style) solver.

    Args:
        residuals (Callable[[np.ndarray], np.ndarray]): Maps a parameter vector to (model - data) / sigma.
        x0 (Sequence[float]): Starting guess
        names (Sequence[str]): Parameter names, same order as `x0`
        bounds (tuple, optional): (lower, upper) bounds as accepted by `scipy.optimize.least_squares`; either side may be infinite. Defaults to (-np.inf, np.inf).
        absolute_sigma (bool, optional): Set `False` to rescale the covariance by the reduced chi-square. Defaults to True.
        max_nfev (int, optional): Maximum number of residual evaluations. Defaults to DEFAULTS.MAX_NFEV.
        ftol (float, optional): Relative cost tolerance. Defaults to DEFAULTS.FTOL.
        xtol (float, optional): Relative step tolerance. Defaults to DEFAULTS.XTOL.
        gtol (float, optional): Gradient tolerance. Defaults to DEFAULTS.GTOL.
        x_scale (Union[str, Sequence[float]], optional): Characteristic parameter scales. Defaults to "jac".
        raise_on_failure (bool, optional): Set `False` to return a failed FitResult rather than raising. Defaults to True.

    Raises:
        ConvergenceError: If the solver gave up and `raise_on_failure` is set.

    Returns:
        FitResult: The fitted parameters with covariance from the Jacobian at the optimum.
    """
    x0 = np.asarray(x0, dtype=float)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), x0.shape) for b in bounds)
    require(np.all(lo < hi), "every lower bound must lie below its upper bound")

    # strictly inside finite bounds; infinite ones need no margin
    pad_lo, pad_hi = (np.where(np.isfinite(b), 1e-12 * np.maximum(np.abs(np.nan_to_num(b)), 1.0), 0.0) for b in (lo, hi))
    x0 = np.clip(x0, lo + pad_lo, hi - pad_hi)

    res = least_squares(residuals, x0, bounds=(lo, hi), method="trf", x_scale=x_scale, max_nfev=max_nfev, ftol=ftol, xtol=xtol, gtol=gtol)

    dof = max(res.fun.size - x0.size, 1)
    chi2_red = float(2 * res.cost / dof)

    jtj = res.jac.T @ res.jac
    cov = np.linalg.pinv(jtj)
    cov = 0.5 * (cov + cov.T)
    if not absolute_sigma:
        cov *= chi2_red

    span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    at_bound = tuple(n for n, v, l, h, s in zip(names, res.x, lo, hi, span) if min(v - l, h - v) < 1e-6 * s)
    for n in at_bound:
        log.warning("Fit parameter '%s' finished at a bound", n)

    if res.status <= 0:
        log.error("Least squares did not converge: %s", res.message)
        if raise_on_failure:
            raise ConvergenceError(f"least squares did not converge: {res.message}", {"best": dict(zip(names, res.x.tolist())), "cost": float(res.cost), "nfev": res.nfev})

    return FitResult(tuple(names), res.x.copy(), np.sqrt(np.clip(np.diag(cov), 0, None)), cov, chi2_red, int(res.nfev), res.status > 0, str(res.message), at_bound)


def poisson_sigma(counts: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """Poisson uncertainty `sqrt(N)`, floored so that empty bins still carry weight.

    Args:
        counts (np.ndarray): Observed counts
        floor (float, optional): Minimum count used in the square root. Defaults to 1.0.

    Returns:
        np.ndarray: The per-bin uncertainties
    """
    return np.sqrt(np.maximum(np.asarray(counts, dtype=float), floor))


def loglinear_lifetime(t: np.ndarray, c: np.ndarray) -> float:
    """Lifetime of a decay curve from a weighted straight-line fit to `log(c)`.  Used to extract an apparent lifetime from noiseless model curves.

    Args:
        t (np.ndarray): Times (ns)
        c (np.ndarray): Decay curve values (> 0), shape (..., len(t))

    Returns:
        float: The apparent lifetime(s) in ns, shape c.shape[:-1]
    """
    c = np.asarray(c, dtype=float)
    w = c / c.sum(axis=-1, keepdims=True)
    tm = (w * t).sum(axis=-1, keepdims=True)
    y = np.log(np.maximum(c, np.finfo(float).tiny))
    ym = (w * y).sum(axis=-1, keepdims=True)
    slope = (w * (t - tm) * (y - ym)).sum(axis=-1) / (w * (t - tm) ** 2).sum(axis=-1)
    return -1.0 / slope


def fit_decay(t_left_ns: np.ndarray, counts: np.ndarray, bin_ns: float, background: Union[float, np.ndarray] = 0.0, tau_guess: float = None) -> FitResult:
    """Poisson-weighted fit of a binned single-exponential decay, counts_i = A * integral over bin i of exp(-t/tau) + background.

    Args:
        t_left_ns (np.ndarray): Left edges of the histogram bins (ns)
        counts (np.ndarray): Raw (integer) counts per bin
        bin_ns (float): Bin width (ns)
        background (Union[float, np.ndarray], optional): Known background per bin (scalar or one value per bin), fitted through the model. Defaults to 0.0.
        tau_guess (float, optional): Starting lifetime; estimated from a log-linear fit if omitted. Defaults to None.

    Raises:
        ValidationError: If there are too few bins or no counts.

    Returns:
        FitResult: parameters `amplitude` (counts/ns at t = 0) and `tau` (ns)
    """
    t = np.asarray(t_left_ns, dtype=float)
    c = np.asarray(counts, dtype=float)
    require(t.size >= 3 and t.size == c.size, "need at least 3 matching bins, got %d times and %d counts", t.size, c.size)
    require(c.sum() > 0, "cannot fit a decay histogram with no counts")
    b = np.broadcast_to(np.asarray(background, dtype=float), c.shape)

    if not tau_guess:
        pos = c - b > 0
        tau_guess = loglinear_lifetime(t[pos], c[pos] - b[pos]) if pos.sum() >= 2 else (t[-1] - t[0]) / 3
        tau_guess = tau_guess if np.isfinite(tau_guess) and tau_guess > 0 else (t[-1] - t[0]) / 3
    a_guess = max(c[0] - b[0], 1e-3 * c.max()) / (tau_guess * (1 - np.exp(-bin_ns / tau_guess))) * np.exp(t[0] / tau_guess)

    sigma = poisson_sigma(c)

    def residuals(p):
        a, tau = p
        return (a * tau * np.exp(-t / tau) * (1 - np.exp(-bin_ns / tau)) + b - c) / sigma

    return weighted_least_squares(residuals, [a_guess, tau_guess], ("amplitude", "tau"), bounds=([0, 1e-3], [np.inf, 1e4]), x_scale=[a_guess, tau_guess])



##################################################################################################
########################################### I / O ################################################
##################################################################################################


def config_hash(data: Union[bytes, str, Path]) -> str:
    """Short, stable hash of a config file or its contents.

    Args:
        data (Union[bytes, str, Path]): Raw bytes, or a path to read

    Returns:
        str: The first 16 hex digits of the SHA-256 digest
    """
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]


def metadata(config_digest: str = None, seed: int = None, **extra) -> dict:
    """Builds the metadata block embedded in every output file.

    Args:
        config_digest (str, optional): Hash of the config used. Defaults to None.
        seed (int, optional): The random seed used. Defaults to None.

    Returns:
        dict: Ordered metadata, tool version first
    """
    return {"tool": "nvcavity", "version": __version__, "config_hash": config_digest, "seed": seed, **extra}


def _atomic_write(path: Path, text: str) -> None:
    """Writes `text` to a temp file beside `path`, then renames it over `path`.

    Args:
        path (Path): The destination
        text (str): The contents to write
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False, newline="") as f:
        f.write(text)
        tmp = f.name
    os.replace(tmp, path)


def write_csv(path: Union[str, Path], columns: dict[str, Iterable], meta: dict = None) -> Path:
    """Atomically writes columns to a CSV file with `#`-prefixed metadata lines above the header row.  Text cells are quoted as needed.

    Args:
        path (Union[str, Path]): The destination
        columns (dict[str, Iterable]): Column name -> values.  All columns must have equal length.
        meta (dict, optional): Metadata to echo as `# key: value` lines. Defaults to None.

    Returns:
        Path: The path written
    """
    cols = {k: list(v) for k, v in columns.items()}
    require(len({len(v) for v in cols.values()}) <= 1, "columns of unequal length: %s", {k: len(v) for k, v in cols.items()})

    df = pd.DataFrame(cols)
    head = "".join(f"# {k}: {json.dumps(v, default=_json_default)}\n" for k, v in (meta or {}).items())
    _atomic_write(path := Path(path), head + df.to_csv(index=False, lineterminator="\n"))
    log.debug("Wrote %d rows to '%s'", len(df), path)
    return path
def _json_default(o: Any) -> Any:
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path: Union[str, Path], payload: dict, meta: dict = None) -> Path:
    """Atomically writes `payload` as JSON with a `metadata` key.

    Args:
        path (Union[str, Path]): The destination
        payload (dict): The structured result
        meta (dict, optional): Metadata block. Defaults to None.

    Returns:
        Path: The path written
    """
    _atomic_write(path := Path(path), json.dumps({"metadata": meta or {}, **payload}, indent=2, sort_keys=False, default=_json_default) + "\n")
    return path


def read_csv(path: Union[str, Path], required: Sequence[str], optional: Sequence[str] = ()) -> tuple[dict[str, np.ndarray], dict]:
    """Reads a numeric CSV file written by `write_csv()` (or by hand, following the same layout).

    Args:
        path (Union[str, Path]): The file to read
        required (Sequence[str]): Columns that must be present; only requested columns are parsed as numbers
        optional (Sequence[str], optional): Columns that are returned if present. Defaults to ().

    Raises:
        SchemaError: On a missing file, missing columns, non-numeric cells, ragged rows or zero data rows.

    Returns:
        tuple[dict[str, np.ndarray], dict]: Column name -> values, and the parsed metadata lines.
    """
    if not (path := Path(path)).is_file():
        raise SchemaError(path, "no such file")

    lines = path.read_text().splitlines(keepends=True)
    meta = {}
    n_meta = 0
    for line in lines:
        if not line.strip():
            n_meta += 1
            continue
        if not line.startswith("#"):
            break
        k, _, v = line[1:].partition(":")
        try:
            meta[k.strip()] = json.loads(v.strip())
        except json.JSONDecodeError:
            meta[k.strip()] = v.strip()
        n_meta += 1

    body = lines[n_meta:]
    lineno = [n_meta + i for i, line in enumerate(body, 1) if line.strip()]
    try:
        df = pd.read_csv(io.StringIO("".join(body)), header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise SchemaError(path, "no data rows") from None
    except pd.errors.ParserError as e:
        m = re.search(r"Expected (\d+) fields in line (\d+), saw (\d+)", str(e))
        raise SchemaError(path, f"expected {m[1]} cells, found {m[3]}" if m else f"malformed row: {e}", n_meta + int(m[2]) if m else None) from None

    header = [str(c).strip() for c in df.iloc[0]]
    if missing := [c for c in required if c not in header]:
        raise SchemaError(path, f"missing column(s) {missing}", lineno[0])
    if len(df) < 2:
        raise SchemaError(path, "no data rows")

    rows = df.iloc[1:].reset_index(drop=True)
    if (short := rows.isna().any(axis=1)).any():
        i = int(np.argmax(short.to_numpy()))
        raise SchemaError(path, f"expected {len(header)} cells, found {int(rows.iloc[i].notna().sum())}", lineno[i + 1])

    out = {}
    for name in (*required, *optional):
        if name not in header:
            continue
        cells = rows[header.index(name)].str.strip()
        values = pd.to_numeric(cells, errors="coerce")
        if (bad := values.isna()).any():
            i = int(np.argmax(bad.to_numpy()))
            raise SchemaError(path, f"not a number: '{cells.iloc[i]}'", lineno[i + 1], name)
        out[name] = values.to_numpy(dtype=float)
    return out, meta
