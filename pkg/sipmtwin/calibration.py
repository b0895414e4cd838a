"""
ToT to energy calibration.

The calibration curve is ``tot = a + b ln(E + d) + c ln²(E + d)``; it is fitted
with a damped Gauss-Newton (Levenberg-Marquardt) iteration on the analytic
Jacobian and inverted on its monotone branch to turn ToT into energy.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DomainError,
    FitFailedError,
    InvalidArgumentError,
    NoSolutionError,
    OutOfRangeError,
)
from .file_utils import read_csv, write_csv
from .rng import SeedLike, Stream, make_rng

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ("source_label", "energy_keV", "tot_ns", "bias_V", "threshold_V")
N_PARAMETERS = 4

Setting = Tuple[float, float]


@dataclass
class CalibrationDataset:
    """ Measured (energy, ToT) pairs, optionally tagged with their (bias, threshold) setting

    * **energies** - Photopeak energies in keV
    * **tots** - ToT values in ns
    * **sources** - Source label per point
    * **bias** - SiPM bias per point in V (NaN when unknown)
    * **threshold** - Comparator threshold per point in V (NaN when unknown)
    """

    energies: np.ndarray
    tots: np.ndarray
    sources: List[str] = field(default_factory=list)
    bias: Optional[np.ndarray] = None
    threshold: Optional[np.ndarray] = None

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64).reshape(-1)
        self.tots = np.asarray(self.tots, dtype=np.float64).reshape(-1)
        n = self.energies.size
        if self.tots.size != n:
            raise InvalidArgumentError("energies and tots differ in length")
        if n and (self.energies.min() <= 0 or self.tots.min() <= 0):
            raise InvalidArgumentError("energies and tots must be positive")
        self.sources = list(self.sources) or [""] * n
        self.bias = np.full(n, np.nan) if self.bias is None else np.asarray(self.bias, float)
        self.threshold = (
            np.full(n, np.nan) if self.threshold is None else np.asarray(self.threshold, float)
        )
        if not (len(self.sources) == self.bias.size == self.threshold.size == n):
            raise InvalidArgumentError("per-point columns differ in length")

    def __len__(self) -> int:
        return self.energies.size

    def subset(self, index) -> "CalibrationDataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return CalibrationDataset(
            self.energies[index],
            self.tots[index],
            [self.sources[i] for i in index],
            self.bias[index],
            self.threshold[index],
        )

    def settings(self) -> List[Setting]:
        """ Distinct (bias, threshold) pairs; untagged points share one (NaN, NaN) setting """
        pairs = {(_tag(b), _tag(t)) for b, t in zip(self.bias, self.threshold)}
        return sorted(pairs, key=_setting_key)

    def for_setting(self, setting: Setting) -> "CalibrationDataset":
        bias, threshold = setting
        same = _same(self.bias, bias) & _same(self.threshold, threshold)
        return self.subset(same)

    def to_csv(self, path: Union[str, Path]) -> Path:
        rows = zip(self.sources, self.energies, self.tots, self.bias, self.threshold)
        return write_csv(path, DATASET_COLUMNS, rows)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "CalibrationDataset":
        rows = read_csv(path, required=DATASET_COLUMNS)
        return cls(
            [float(r["energy_keV"]) for r in rows],
            [float(r["tot_ns"]) for r in rows],
            [r["source_label"] for r in rows],
            [float(r["bias_V"] or "nan") for r in rows],
            [float(r["threshold_V"] or "nan") for r in rows],
        )


_NAN = float("nan")


def _tag(value: float) -> float:
    value = float(value)
    return _NAN if math.isnan(value) else value


def _setting_key(setting: Setting) -> Tuple:
    # NaN sorts last
    return tuple((math.isnan(v), 0.0 if math.isnan(v) else v) for v in setting)


def _same(values: np.ndarray, target: float) -> np.ndarray:
    if math.isnan(target):
        return np.isnan(values)
    return values == target


@dataclass
class FitDiagnostics:
    final_s: float
    iterations: int
    converged: bool
    stderr: Optional[Tuple[float, float, float, float]] = None
    monotone: bool = True


@dataclass
class CalibrationModel:
    """ Parameters of the log-quadratic calibration curve

    **Parameters:**

    * **a**, **b**, **c** - Coefficients in ns
    * **d** - Energy offset in keV
    * **fit** - Fit diagnostics, `None` for hand-made models
    * **setting** - (bias, threshold) the model was fitted at
    * **energy_range** - (lowest, highest) energy in keV of the fitted points;
      `None` leaves the model unbounded
    """

    a: float
    b: float
    c: float
    d: float
    fit: Optional[FitDiagnostics] = None
    setting: Optional[Setting] = None
    energy_range: Optional[Tuple[float, float]] = None

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    @classmethod
    def from_params(cls, p: Sequence[float], **kwargs) -> "CalibrationModel":
        return cls(float(p[0]), float(p[1]), float(p[2]), float(p[3]), **kwargs)

    @property
    def tot_range(self) -> Optional[Tuple[float, float]]:
        """ ToT in ns at the ends of the fitted energy range """
        if self.energy_range is None:
            return None
        lo, hi = self.energy_range
        return float(tot_model(lo, self)), float(tot_model(hi, self))

    def to_record(self) -> Dict:
        record = {"a": self.a, "b": self.b, "c": self.c, "d": self.d}
        if self.fit is not None:
            record.update(
                final_S=self.fit.final_s,
                iterations=self.fit.iterations,
                converged=self.fit.converged,
                monotone=self.fit.monotone,
                stderr=None if self.fit.stderr is None else list(self.fit.stderr),
            )
        if self.setting is not None:
            record["setting"] = {"bias_V": self.setting[0], "threshold_V": self.setting[1]}
        if self.energy_range is not None:
            record["energy_range_keV"] = list(self.energy_range)
        return record


def _log_offset(energies: np.ndarray, d: float) -> np.ndarray:
    shifted = np.asarray(energies, dtype=np.float64) + d
    if np.any(shifted <= 0):
        raise DomainError(f"E + d must be positive (d = {d})")
    return np.log(shifted)


def tot_model(energy: Union[float, np.ndarray], m: CalibrationModel) -> Union[float, np.ndarray]:
    """ Calibration curve a + b ln(E + d) + c ln²(E + d), in ns """
    u = _log_offset(energy, m.d)
    tot = m.a + m.b * u + m.c * u * u
    return float(tot) if np.ndim(tot) == 0 else tot


def residual_sum(ds: CalibrationDataset, m: CalibrationModel) -> float:
    """ Sum of squared ToT residuals in ns² """
    r = ds.tots - tot_model(ds.energies, m)
    return float(np.dot(r, r))


def jacobian(ds: CalibrationDataset, m: CalibrationModel) -> np.ndarray:
    """ Partials of the curve with respect to (a, b, c, d), one row per point """
    u = _log_offset(ds.energies, m.d)
    return np.column_stack(
        [np.ones_like(u), u, u * u, (m.b + 2.0 * m.c * u) / (ds.energies + m.d)]
    )


def initial_guess(ds: CalibrationDataset, d: float = 1.0) -> CalibrationModel:
    """ Fix d and solve the linear least squares problem for (a, b, c) """
    u = _log_offset(ds.energies, d)
    design = np.column_stack([np.ones_like(u), u, u * u])
    (a, b, c), *_ = np.linalg.lstsq(design, ds.tots, rcond=None)
    return CalibrationModel(float(a), float(b), float(c), float(d))


def fit(
    ds: CalibrationDataset,
    initial: Optional[CalibrationModel] = None,
    max_iterations: int = 200,
    tolerance: float = 1e-10,
) -> CalibrationModel:
    """ Damped Gauss-Newton fit of the calibration curve

    Each iteration solves ``(JᵀJ + λ diag(JᵀJ)) δ = Jᵀr``; a step that raises S or
    leaves the domain E + d > 0 is rejected and λ grows tenfold, an accepted
    step shrinks it. Stops when the relative decrease of S drops below
    `tolerance` or after `max_iterations`.

    * **ds** - Calibration dataset with at least 4 points
    * **initial** - Starting model; `initial_guess(ds)` when omitted
    * **max_iterations** - Iteration limit
    * **tolerance** - Relative ΔS stopping threshold
    **return** - Fitted `CalibrationModel` with diagnostics
    """
    if len(ds) < N_PARAMETERS:
        raise InvalidArgumentError(f"need at least {N_PARAMETERS} points, got {len(ds)}")
    m = initial or initial_guess(ds)
    p = m.params
    s = residual_sum(ds, m)
    lam, iterations, converged = 1e-3, 0, False
    eps = np.finfo(float).tiny

    for _ in range(max_iterations):
        current = CalibrationModel.from_params(p)
        J = jacobian(ds, current)
        r = ds.tots - tot_model(ds.energies, current)
        A, g = J.T @ J, J.T @ r
        scale = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), eps))

        accepted, singular_only = False, True
        while lam <= 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(scale), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            singular_only = False
            trial = p + step
            if np.any(ds.energies + trial[3] <= 0):
                lam *= 10.0
                continue
            s_trial = residual_sum(ds, CalibrationModel.from_params(trial))
            if s_trial <= s:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0

        if not accepted:
            if singular_only:
                raise FitFailedError(
                    "normal equations are singular at every damping level",
                    {"S": s, "iterations": iterations, "params": p.tolist()},
                )
            # no damping level lowers S: stationary point
            converged = True
            break
        iterations += 1
        decrease = s - s_trial
        p, s = trial, s_trial
        if decrease / max(s, eps) < tolerance:
            converged = True
            break

    energy_range = (float(ds.energies.min()), float(ds.energies.max()))
    result = CalibrationModel.from_params(p, setting=m.setting, energy_range=energy_range)
    J = jacobian(ds, result)
    stderr = None
    dof = len(ds) - N_PARAMETERS
    if dof > 0:
        try:
            cov = np.linalg.inv(J.T @ J) * s / dof
            stderr = tuple(float(v) for v in np.sqrt(np.clip(np.diag(cov), 0.0, None)))
        except np.linalg.LinAlgError:
            logger.warning("JᵀJ is singular at the solution, no standard errors")
    monotone = bool(np.all(J[:, 3] * (ds.energies + result.d) > 0))
    if not monotone:
        logger.warning("Fitted calibration is not monotone over the dataset energies")
    result.fit = FitDiagnostics(s, iterations, converged, stderr, monotone)
    logger.debug(f"Calibration fit: S={s:.6g} after {iterations} iterations")
    return result


def invert(
    tot: Union[float, np.ndarray],
    m: CalibrationModel,
    errors: str = "raise",
    extrapolate: bool = False,
) -> Union[float, np.ndarray]:
    """ Energy in keV for a ToT in ns, on the branch where the curve rises

    A fitted model only accepts ToT inside its `tot_range`.

    * **tot** - ToT in ns (scalar or array)
    * **m** - Calibration model
    * **errors** - `raise` or `nan` (invalid entries become NaN)
    * **extrapolate** - Accept ToT beyond the fitted energy range
    """
    tot = np.asarray(tot, dtype=np.float64)
    rhs = tot - m.a
    with np.errstate(divide="ignore", invalid="ignore"):
        if m.c == 0:
            if m.b == 0:
                raise OutOfRangeError("a constant calibration cannot be inverted")
            if m.b < 0:
                raise OutOfRangeError(f"calibration falls with energy (b = {m.b:g}, c = 0)")
            u = rhs / m.b
            no_solution = np.zeros(tot.shape, dtype=bool)
        else:
            disc = m.b * m.b + 4.0 * m.c * rhs
            no_solution = disc < 0
            root = np.sqrt(np.where(no_solution, 0.0, disc))
            # b + 2cu = sqrt(disc) on the rising branch
            denom = m.b + root
            stable = np.abs(denom) > 1e-12 * max(abs(m.b), 1.0)
            u = np.where(stable, 2.0 * rhs / np.where(stable, denom, 1.0), (root - m.b) / (2.0 * m.c))
        energy = np.exp(u) - m.d
    out_of_range = ~no_solution & ~(energy > 0)
    if m.tot_range is not None and not extrapolate:
        lo, hi = m.tot_range
        out_of_range |= ~no_solution & ~((tot >= lo) & (tot <= hi))
    if errors == "raise":
        if np.any(no_solution):
            raise NoSolutionError("ToT below the minimum of the calibration curve")
        if np.any(out_of_range):
            raise OutOfRangeError("ToT outside the calibrated range or at a non-positive energy")
    energy = np.where(no_solution | out_of_range, np.nan, energy)
    return float(energy) if energy.ndim == 0 else energy


def fit_by_setting(
    ds: CalibrationDataset, initial_d: float = 1.0, **kwargs
) -> Dict[Setting, CalibrationModel]:
    """ One calibration per (bias, threshold) setting in the dataset """
    models = {}
    for setting in ds.settings():
        part = ds.for_setting(setting)
        start = initial_guess(part, d=initial_d)
        start.setting = setting
        models[setting] = fit(part, start, **kwargs)
        logger.info(
            f"Setting bias={setting[0]} V threshold={setting[1]} V: {len(part)} points, "
            f"S={models[setting].fit.final_s:.4g}"
        )
    return models


def synthesize_dataset(
    model: CalibrationModel,
    energies: Dict[str, float],
    points_per_source: int,
    noise_sigma: float,
    seed: SeedLike,
    setting: Setting = (float("nan"), float("nan")),
) -> CalibrationDataset:
    """ Points drawn from `model` with gaussian ToT noise

    * **model** - Generating curve
    * **energies** - Source label to photopeak energy in keV
    * **points_per_source** - Repeats per source
    * **noise_sigma** - ToT noise in ns
    * **seed** - Seed of the calibration stream
    * **setting** - (bias, threshold) tag of every point
    """
    rng = make_rng(seed, Stream.CALIBRATION)
    labels = [label for label in energies for _ in range(points_per_source)]
    e = np.array([energies[label] for label in labels])
    tots = tot_model(e, model) + rng.normal(0.0, noise_sigma, size=e.size)
    n = e.size
    return CalibrationDataset(
        e, tots, labels, np.full(n, setting[0]), np.full(n, setting[1])
    )


class EasyCalibrator:
    """ Calibration facade

    Usage:
    ```python
    >>> calibrator = EasyCalibrator()
    >>> models = calibrator.calibrate(CalibrationDataset.from_csv("points.csv"))
    >>> calibrator.energy(120.0, models[(40.0, 0.01)])
    ```

    **Parameters:**

    * **initial_d** - Starting energy offset in keV
    * **max_iterations** - Iteration limit of each fit
    * **tolerance** - Relative ΔS stopping threshold
    """

    def __init__(self, initial_d: float = 1.0, max_iterations: int = 200, tolerance: float = 1e-10):
        self.initial_d = initial_d
        self.max_iterations = max_iterations
        self.tolerance = tolerance

    def fit(self, ds: CalibrationDataset) -> CalibrationModel:
        return fit(
            ds,
            initial_guess(ds, d=self.initial_d),
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
        )

    def calibrate(self, ds: CalibrationDataset) -> Dict[Setting, CalibrationModel]:
        return fit_by_setting(
            ds,
            initial_d=self.initial_d,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
        )

    def energy(
        self, tot, model: CalibrationModel, errors: str = "raise", extrapolate: bool = False
    ):
        return invert(tot, model, errors=errors, extrapolate=extrapolate)
