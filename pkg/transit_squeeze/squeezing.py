"""conditional spin squeezing from simulated measurement records

The optical record of each repeat is weighted by the probe pulses and the
in-phase Larmor reference (a matched filter for the p quadrature) and
reduced to equal-time bins. Over repeats, the bins and the collective spin
quadrature of interest are jointly Gaussian, so the variance of the spin
given the record is a Schur complement of their sample covariance.
Prediction conditions on bins before the target time, retrodiction on the
whole record.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp
from scipy.optimize import curve_fit

from transit_squeeze._constants import CSS_VARIANCE, PNL_THERMAL_FACTOR
from transit_squeeze._exceptions import (
    InvalidParameterError,
    MissingCalibrationError,
    NumericalError,
)
from transit_squeeze.dynamics import MeasurementSetup, RepeatOutput
from transit_squeeze.spectra import DemodulatedRecord

logger: logging.Logger = logging.getLogger(__name__)

Estimator = Literal["prediction", "retrodiction"]
Target = Literal["midpoint", "final"]
PnlMode = Literal["theory_stationary", "experiment_45"]

RIDGE_RELATIVE: float = 1e-8
# wall hits after which an atom's position no longer remembers the beam
TRANSIT_DECORRELATION_HITS: float = 8.0


@dataclass(frozen=True)
class CovarianceSummary:
    matrix: np.ndarray  # (n, n)
    means: np.ndarray  # (n,)
    n_repeats: int

    def __post_init__(self) -> None:
        if not np.allclose(self.matrix, self.matrix.T):
            raise NumericalError("covariance matrix is not symmetric")

    @property
    def size(self) -> int:
        return self.means.size


class ConditionalEstimate(NamedTuple):
    """Gaussian conditioning of one target on a set of record bins"""

    var_conditional: float  # raw Schur complement
    var_prior: float
    var_corrected: float  # residual-variance dof correction applied
    var_residual: float  # held-out empirical residual of the linear estimate
    n_features: int
    n_repeats: int
    ridge: float
    estimator: Estimator


@dataclass(frozen=True)
class SqueezingResult:
    """`xi_squared_db` compares `var_corrected` (dof-corrected when asked) with `var_pnl`"""

    var_conditional: float  # raw Schur complement
    var_pnl: float
    xi_squared_db: float
    estimator: Estimator
    kappa2_T2: float | None = None
    var_prior: float | None = None
    var_residual: float | None = None
    n_repeats: int = 0
    var_corrected: float | None = None
    ridge: float = 0.0

    def __post_init__(self) -> None:
        if self.var_conditional < 0:
            raise NumericalError(f"negative conditional variance {self.var_conditional!r}")

    @property
    def xi_squared(self) -> float:
        return 10.0 ** (self.xi_squared_db / 10.0)


class FeatureRow(NamedTuple):
    """one repeat reduced to its binned in-phase record and the true collective p quadrature at the bin edges"""

    features: np.ndarray  # (bins,)
    truth_p: np.ndarray  # (bins + 1,)


# covariance and conditioning
# ==============================


def covariance_analysis(records: np.ndarray) -> CovarianceSummary:
    """unbiased sample covariance over repeats of an (N, n) array; diagonal holds per-time variances"""
    data: np.ndarray = np.asarray(records, dtype=float)
    if data.ndim != 2:
        raise InvalidParameterError(f"expected a (repeats, samples) array, got shape {data.shape}")
    if data.shape[0] < 2:
        raise InvalidParameterError(f"need at least 2 repeats for a covariance, got {data.shape[0]}")
    matrix: np.ndarray = np.atleast_2d(np.cov(data, rowvar=False, ddof=1))
    return CovarianceSummary(
        matrix=0.5 * (matrix + matrix.T),
        means=data.mean(axis=0),
        n_repeats=data.shape[0],
    )


def conditional_variance(var_prior: float, cov: float, var_obs: float) -> float:
    """Var(p | x) = Var(p) - Cov(p, x)^2 / Var(x)"""
    if not var_obs > 0:
        raise InvalidParameterError(f"observation variance must be positive, got {var_obs!r}")
    return var_prior - cov * cov / var_obs


def schur_conditional_variance(
    cov: np.ndarray,
    target_index: int,
    observed_indices: Sequence[int] | np.ndarray,
    ridge_relative: float = RIDGE_RELATIVE,
) -> tuple[float, np.ndarray, float]:
    """variance of component `target_index` given the `observed_indices` components

    C_tt - C_to (C_oo + lambda I)^-1 C_ot with lambda = `ridge_relative` * trace(C_oo) / k

    # Returns:
    - `tuple[float, np.ndarray, float]`
        (conditional variance, regression weights, ridge lambda)
    """
    observed: np.ndarray = np.asarray(observed_indices, dtype=int)
    var_prior: float = float(cov[target_index, target_index])
    if observed.size == 0:
        return var_prior, np.zeros(0), 0.0

    c_oo: np.ndarray = cov[np.ix_(observed, observed)]
    c_ot: np.ndarray = cov[observed, target_index]
    ridge: float = ridge_relative * float(np.trace(c_oo)) / observed.size
    regularized: np.ndarray = c_oo + ridge * np.eye(observed.size)
    try:
        weights: np.ndarray = linalg.cho_solve(linalg.cho_factor(regularized), c_ot)
    except linalg.LinAlgError:
        logger.warning("observation covariance is not positive definite, falling back to least squares")
        weights = linalg.lstsq(regularized, c_ot)[0]
    var_cond: float = var_prior - float(c_ot @ weights)
    if var_cond < 0:
        logger.debug(f"clipping round-off negative conditional variance {var_cond!r}")
        var_cond = 0.0
    return var_cond, weights, ridge


def bin_record(
    demod: DemodulatedRecord | np.ndarray,
    n_bins: int,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """reduce each repeat to `n_bins` equal-time bins, (N, m) -> (N, n_bins)

    without `weights`, the mean of the in-phase part over each bin. With
    per-sample `weights` w, bin j is sum(w x) / sum(w^2) over its samples:
    the least-squares amplitude of the weighted template, which is the
    matched-filter estimate of the signal it describes.
    """
    data: np.ndarray = demod.in_phase if isinstance(demod, DemodulatedRecord) else np.real(demod)
    data = np.atleast_2d(data)
    m: int = data.shape[-1]
    if m < n_bins:
        raise InvalidParameterError(f"cannot split {m} samples into {n_bins} bins")
    starts: np.ndarray = np.round(np.linspace(0, m, n_bins + 1)).astype(int)
    if weights is None:
        return np.add.reduceat(data, starts[:-1], axis=-1) / np.diff(starts)

    w: np.ndarray = np.asarray(weights, dtype=float)
    if w.shape != (m,):
        raise InvalidParameterError(f"expected {m} weights, one per sample, got shape {w.shape}")
    norm: np.ndarray = np.add.reduceat(w * w, starts[:-1])
    if np.any(norm <= 0):
        raise InvalidParameterError("a bin has no weighted samples; the probe never reads p there")
    return np.add.reduceat(data * w, starts[:-1], axis=-1) / norm


def target_edge(n_bins: int, target: Target) -> int:
    """bin-edge index of the squeezing target time"""
    return n_bins // 2 if target == "midpoint" else n_bins


def _held_out_residual(
    features: np.ndarray,
    target: np.ndarray,
    ridge_relative: float,
) -> float:
    # fit the linear estimate on one half of the repeats, score it on the other, and swap
    n: int = features.shape[0]
    half: int = n // 2
    if half < 2 or features.shape[1] == 0:
        return float(np.var(target, ddof=1))
    residuals: list[np.ndarray] = []
    for fit, score in ((slice(0, half), slice(half, n)), (slice(half, n), slice(0, half))):
        joint: CovarianceSummary = covariance_analysis(np.column_stack([features[fit], target[fit]]))
        k: int = features.shape[1]
        _, weights, _ = schur_conditional_variance(joint.matrix, k, np.arange(k), ridge_relative)
        estimate: np.ndarray = joint.means[k] + (features[score] - joint.means[:k]) @ weights
        residuals.append(target[score] - estimate)
    return float(np.var(np.concatenate(residuals), ddof=1))


def estimate_conditional(
    features: np.ndarray,
    truth_p: np.ndarray,
    target: Target = "midpoint",
    estimator: Estimator = "retrodiction",
    dof_correction: bool = True,
    ridge_relative: float = RIDGE_RELATIVE,
) -> ConditionalEstimate:
    """conditional variance of the collective p quadrature at the target time

    # Parameters:
    - `features : np.ndarray`
        (N, bins) binned in-phase record
    - `truth_p : np.ndarray`
        (N, bins + 1) true collective p quadrature at the bin edges
    - `target : Target`
        `"midpoint"` or `"final"` edge (defaults to `"midpoint"`)
    - `estimator : Estimator`
        `"prediction"` uses bins that end before the target time,
        `"retrodiction"` uses every bin (defaults to `"retrodiction"`)
    - `dof_correction : bool`
        scale the finite-sample Schur complement by (N - 1) / (N - 1 - k)
        for `var_corrected` (defaults to `True`)

    # Returns:
    - `ConditionalEstimate`
    """
    x: np.ndarray = np.atleast_2d(np.asarray(features, dtype=float))
    truth: np.ndarray = np.atleast_2d(np.asarray(truth_p, dtype=float))
    n_repeats, n_bins = x.shape
    if truth.shape != (n_repeats, n_bins + 1):
        raise InvalidParameterError(
            f"truth_p must have shape {(n_repeats, n_bins + 1)} to match the features, got {truth.shape}"
        )
    edge: int = target_edge(n_bins, target)
    observed: np.ndarray = np.arange(edge) if estimator == "prediction" else np.arange(n_bins)
    y: np.ndarray = truth[:, edge]

    joint: CovarianceSummary = covariance_analysis(np.column_stack([x, y]))
    var_cond, _, ridge = schur_conditional_variance(
        joint.matrix, n_bins, observed, ridge_relative
    )
    k: int = observed.size
    var_corrected: float = var_cond
    if dof_correction:
        dof: int = n_repeats - 1 - k
        if dof <= 0:
            raise NumericalError(
                f"{n_repeats} repeats cannot support {k} conditioning bins; raise dynamics.n_repeats or lower analysis.bins"
            )
        var_corrected = var_cond * (n_repeats - 1) / dof
    return ConditionalEstimate(
        var_conditional=var_cond,
        var_prior=float(joint.matrix[n_bins, n_bins]),
        var_corrected=var_corrected,
        var_residual=_held_out_residual(x[:, observed], y, ridge_relative),
        n_features=k,
        n_repeats=n_repeats,
        ridge=ridge,
        estimator=estimator,
    )


# projection noise reference and figures of merit
# ==============================


def pnl_reference(
    mode: PnlMode,
    stationary_variance: float | None = None,
    thermal_variance: float | None = None,
) -> float:
    """projection-noise reference variance

    - `"theory_stationary"`: spin variance of a stationary-atom run at the same optical settings
    - `"experiment_45"`: 4/5 of the thermal-state noise variance

    # Raises:
    - `MissingCalibrationError` : the run that `mode` needs was not supplied
    """
    if mode == "theory_stationary":
        if stationary_variance is None:
            raise MissingCalibrationError("theory_stationary PNL needs a stationary-atom calibration run")
        return stationary_variance
    if mode == "experiment_45":
        if thermal_variance is None:
            raise MissingCalibrationError("experiment_45 PNL needs a thermal-state calibration run")
        return PNL_THERMAL_FACTOR * thermal_variance
    raise InvalidParameterError(f"unknown PNL mode {mode!r}")


def squeezing_db(var_conditional: float, pnl: float) -> float:
    """10 log10(var_conditional / pnl); negative means squeezed"""
    if not pnl > 0:
        raise InvalidParameterError(f"PNL reference must be positive, got {pnl!r}")
    if var_conditional <= 0:
        return -math.inf
    return 10.0 * math.log10(var_conditional / pnl)


def _exp_decay(tau: np.ndarray, amplitude: float, t2: float) -> np.ndarray:
    return amplitude * np.exp(-tau / t2)


def fit_lags(n_bins: int, bin_width: float, min_lag_time: float = 0.0) -> np.ndarray:
    """bin lags entering the T2 fit: from the first lag at or beyond `min_lag_time` to half the record

    # Raises:
    - `NumericalError` : fewer than two lags are left to fit
    """
    max_lag: int = min(n_bins - 1, max(2, n_bins // 2))
    first: int = max(1, min(math.ceil(min_lag_time / bin_width - 1e-9), max_lag - 1))
    if max_lag - first + 1 < 2:
        raise NumericalError(f"{n_bins} bins leave fewer than two lags to fit T2; raise analysis.bins")
    return np.arange(first, max_lag + 1)


def fit_t2(summary: CovarianceSummary, bin_width: float, min_lag_time: float = 0.0) -> float:
    """T2 from an exponential fit to the off-diagonal record autocovariance versus lag

    the diagonal carries the white shot noise and is left out, as are lags
    shorter than `min_lag_time` (ms), where atoms crossing the beam still
    correlate the record on top of the spin coherence
    """
    lags: np.ndarray = fit_lags(summary.size, bin_width, min_lag_time)
    autocov: np.ndarray = np.array([np.mean(np.diagonal(summary.matrix, offset=int(lag))) for lag in lags])
    if not np.all(np.isfinite(autocov)):
        raise NumericalError("record autocovariance is not finite, cannot fit T2")
    if not autocov[0] > 0:
        raise NumericalError("record shows no positive correlation at the first fitted lag, cannot fit T2")
    tau: np.ndarray = lags * bin_width
    try:
        popt, _ = curve_fit(
            _exp_decay,
            tau,
            autocov,
            p0=(autocov[0], tau[-1]),
            bounds=((0.0, 1e-9), (np.inf, np.inf)),
            maxfev=10_000,
        )
    except (RuntimeError, ValueError) as e:
        raise NumericalError(f"T2 fit failed: {e}") from e
    return float(popt[1])


def transit_lag_time(setup: MeasurementSetup) -> float:
    """lag after which beam-crossing correlations have died out, 0 for frozen atoms"""
    if setup.stationary:
        return 0.0
    return TRANSIT_DECORRELATION_HITS * setup.geom.mean_free_time


def kappa2_t2(kappa: float, t2: float) -> float:
    return kappa * kappa * t2


def batch_statistics(values_db: Sequence[float]) -> tuple[float, float]:
    """mean and sample standard deviation (the error bar) over independent batches"""
    values: np.ndarray = np.asarray(values_db, dtype=float)
    if values.size == 0:
        raise InvalidParameterError("no batch results")
    std: float = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


# closed-form benchmark
# ==============================


def _riccati(kappa: float, gamma: float, langevin_variance: float, v0: float, t_end: float) -> float:
    # Kalman-Bucy variance of a decaying quadrature read out through white noise of density 1/2
    if t_end <= 0:
        return v0

    def rhs(_t: float, v: np.ndarray) -> np.ndarray:
        return 2 * gamma * (langevin_variance - v) - 2 * kappa * kappa * v * v

    sol = solve_ivp(rhs, (0.0, t_end), [v0], method="LSODA", rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise NumericalError(f"Riccati integration failed: {sol.message}")
    return float(sol.y[0, -1])


def ideal_qnd_variance(
    kappa: float,
    gamma: float,
    duration: float,
    estimator: Estimator = "prediction",
    t: float | None = None,
    langevin_variance: float = CSS_VARIANCE,
) -> float:
    """conditional variance of a homogeneously coupled, stationary ensemble

    forward filter for prediction; two-filter smoother (forward from 0, backward
    from `duration`) for retrodiction. `t` defaults to `duration`. With
    gamma = 0 both reduce to 1 / (2 (1 + kappa^2 t)) at t = duration.
    """
    t_target: float = duration if t is None else t
    if not 0 <= t_target <= duration:
        raise InvalidParameterError(f"target time {t_target} must lie within [0, {duration}]")
    v_prior: float = langevin_variance
    v_forward: float = _riccati(kappa, gamma, langevin_variance, v_prior, t_target)
    if estimator == "prediction":
        return v_forward
    v_backward: float = _riccati(kappa, gamma, langevin_variance, v_prior, duration - t_target)
    return 1.0 / (1.0 / v_forward + 1.0 / v_backward - 1.0 / v_prior)


# reduction inside workers
# ==============================


def reduce_to_features(repeat: RepeatOutput, setup: MeasurementSetup) -> FeatureRow:
    """matched-filter one repeat for p and keep only its bins and spin truth

    each record sample is weighted by the probe pulse amplitude times the
    in-phase reference, so shot noise recorded while the probe is dark
    carries no weight
    """
    return FeatureRow(
        features=bin_record(repeat.x_out, setup.n_bins, weights=setup.readout_weights)[0],
        truth_p=repeat.truth_p,
    )


def analyze_rows(
    rows: Sequence[FeatureRow],
    var_pnl: float,
    target: Target = "midpoint",
    estimator: Estimator = "retrodiction",
    dof_correction: bool = True,
    kappa: float | None = None,
    bin_width: float | None = None,
    min_lag_time: float = 0.0,
) -> SqueezingResult:
    """squeezing of one batch of reduced repeats against a PNL reference

    kappa^2 T2 is fitted when `kappa` and `bin_width` are given; a failed fit
    leaves it at None
    """
    features: np.ndarray = np.stack([r.features for r in rows])
    truth: np.ndarray = np.stack([r.truth_p for r in rows])
    est: ConditionalEstimate = estimate_conditional(
        features, truth, target=target, estimator=estimator, dof_correction=dof_correction
    )
    k2t2: float | None = None
    if kappa is not None and bin_width is not None:
        try:
            k2t2 = kappa2_t2(kappa, fit_t2(covariance_analysis(features), bin_width, min_lag_time))
        except NumericalError as e:
            logger.warning(f"kappa^2 T2 not available: {e}")
    return SqueezingResult(
        var_conditional=est.var_conditional,
        var_pnl=var_pnl,
        xi_squared_db=squeezing_db(est.var_corrected, var_pnl),
        estimator=estimator,
        kappa2_T2=k2t2,
        var_prior=est.var_prior,
        var_residual=est.var_residual,
        n_repeats=est.n_repeats,
        var_corrected=est.var_corrected,
        ridge=est.ridge,
    )


def target_variance(rows: Sequence[FeatureRow], target: Target = "midpoint") -> float:
    """sample variance of the true target quadrature, the basis of both PNL references"""
    truth: np.ndarray = np.stack([r.truth_p for r in rows])
    edge: int = target_edge(truth.shape[1] - 1, target)
    return float(np.var(truth[:, edge], ddof=1))
