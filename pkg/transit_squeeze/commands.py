"""the `simulate` subcommands: spectra, squeezing, calibration and summaries"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, NamedTuple

from transit_squeeze._exceptions import CalibrationError, NumericalError, OutputMismatchError
from transit_squeeze.batch import (
    STREAM_HELD_OUT,
    STREAM_MAIN,
    STREAM_PNL,
    STREAM_SHOT_REFERENCE,
    STREAM_TRAJECTORY,
    batch_stream,
    repeat_generator,
    stack_results,
)
from transit_squeeze.config import (
    RunConfig,
    apply_overrides,
    config_hash,
    format_config,
    sweep_points,
)
from transit_squeeze.dynamics import (
    MeasurementRecord,
    MeasurementSetup,
    RepeatOutput,
    run_setup,
)
from transit_squeeze.kinematics import (
    simulate_trajectory,
    wall_reset_probability_for,
    write_trajectory_csv,
)
from transit_squeeze.outputs import (
    point_slug,
    read_json,
    read_spectrum,
    write_json,
    write_record,
    write_spectrum,
    write_table,
)
from transit_squeeze.spectra import (
    Periodogram,
    PeriodogramReducer,
    SpectrumEstimate,
    average_periodograms,
    crop,
    shot_reference,
    summarize_spectrum,
    to_db_rel_shot,
)
from transit_squeeze.squeezing import (
    FeatureRow,
    SqueezingResult,
    analyze_rows,
    batch_statistics,
    covariance_analysis,
    fit_t2,
    kappa2_t2,
    pnl_reference,
    reduce_to_features,
    target_variance,
    transit_lag_time,
)

logger: logging.Logger = logging.getLogger(__name__)

SHOT_REFERENCE_REPEATS: int = 200
# flat part of the lock-in passband relative to its cutoff
PASSBAND_FRACTION: float = 0.75
# retrodiction may beat prediction by round-off only
ORDERING_TOLERANCE: float = 1e-6
# first calibration bracket, in multiples of the wall-decay estimate
CALIBRATION_BRACKET: float = 4.0


@dataclass(frozen=True)
class RunOptions:
    seed: int
    workers: int = 1
    out_dir: Path = Path("results")
    progress: bool = False


class CalibrationReport(NamedTuple):
    wall_reset_probability: float
    kappa2_T2: float
    kappa2_T2_held_out: float
    held_out_ok: bool
    iterations: int
    config: RunConfig
    config_path: Path
    report_path: Path


def _point_metadata(cfg: RunConfig, opts: RunOptions, labels: dict[str, Any]) -> dict[str, Any]:
    return {
        "config_hash": config_hash(cfg),
        "seed": opts.seed,
        "labels": labels,
        "config": format_config(cfg),
    }


# spectra
# ==============================


def _spectrum_window(cfg: RunConfig) -> tuple[float, float, float]:
    """(lo, cutoff, half span) in kHz; the cutoff keeps the shown span inside the flat passband"""
    lo: float = cfg.dynamics.larmor_khz
    half_span: float = 0.5 * cfg.analysis.spectrum_span_khz
    return lo, half_span / PASSBAND_FRACTION, half_span


def compute_spectrum(cfg: RunConfig, opts: RunOptions, stream: int = STREAM_MAIN) -> SpectrumEstimate:
    """averaged lock-in spectrum of one config, cropped to the configured span, in linear units"""
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    lo, bw, half_span = _spectrum_window(cfg)
    reducer: PeriodogramReducer = PeriodogramReducer(lo=lo, bw=bw, segment_ms=cfg.analysis.segment_ms)

    if cfg.output.dump_records:
        repeats: list[RepeatOutput] = run_setup(
            setup, cfg.dynamics.n_repeats, opts.seed, stream=stream, workers=opts.workers, progress=opts.progress
        )
        record: MeasurementRecord = MeasurementRecord(
            samples=stack_results(repeats, "x_out"),
            dt=setup.dt,
            larmor=setup.larmor,
            metadata={"seed": opts.seed, "stream": stream, "config_hash": config_hash(cfg)},
            truth_x=stack_results(repeats, "truth_x"),
            truth_p=stack_results(repeats, "truth_p"),
            truth_times=setup.dt * setup.bin_edges,
        )
        write_record(record, opts.out_dir / "records", stem=f"record_{config_hash(cfg)}")
        periodograms: list[Periodogram] = [reducer(r, setup) for r in repeats]
    else:
        periodograms = run_setup(
            setup,
            cfg.dynamics.n_repeats,
            opts.seed,
            stream=stream,
            workers=opts.workers,
            progress=opts.progress,
            reducer=reducer,
        )
    return crop(average_periodograms(periodograms), lo - half_span, lo + half_span)


def shot_reference_for(cfg: RunConfig, opts: RunOptions) -> float:
    """shot-noise level from a coupling-free run with identical sampling and lock-in settings"""
    shot_cfg: RunConfig = apply_overrides(
        cfg,
        {
            "coupling.kappa_target": 0.0,
            "dynamics.n_sim": 1,
            "dynamics.n_repeats": max(2, min(cfg.dynamics.n_repeats, SHOT_REFERENCE_REPEATS)),
            "output.dump_records": False,
        },
    )
    est: SpectrumEstimate = compute_spectrum(shot_cfg, opts, stream=STREAM_SHOT_REFERENCE)
    return shot_reference(est, center_khz=cfg.dynamics.larmor_khz)


def _dump_trajectories(cfg: RunConfig, opts: RunOptions) -> list[Path]:
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    paths: list[Path] = []
    for i in range(cfg.output.trajectories):
        trajectory = simulate_trajectory(
            setup.geom, setup.duration, setup.dt, repeat_generator(opts.seed, STREAM_TRAJECTORY, i)
        )
        paths.append(
            write_trajectory_csv(
                trajectory, opts.out_dir / "trajectories" / f"trajectory_{config_hash(cfg)}_{i:03d}.csv"
            )
        )
    return paths


def cmd_spectrum(cfg: RunConfig, opts: RunOptions) -> list[Path]:
    """one spectrum CSV per sweep point plus `spectrum_summary.csv` with background levels at the fixed offset"""
    cfg = resolve_calibration(cfg, opts)
    paths: list[Path] = []
    rows: list[dict[str, Any]] = []
    for labels, point in sweep_points(cfg):
        logger.info(f"spectrum {point_slug(labels)}: {config_hash(point)}")
        est: SpectrumEstimate = compute_spectrum(point, opts)
        est = to_db_rel_shot(est, shot_reference_for(point, opts))
        summary: dict[str, Any] = summarize_spectrum(
            est,
            center_khz=point.dynamics.larmor_khz,
            offset_khz=point.analysis.background_offset_khz,
            halfwidth_khz=point.analysis.background_halfwidth_khz,
        )
        paths.append(
            write_spectrum(
                est,
                opts.out_dir,
                labels,
                {**_point_metadata(point, opts, labels), "summary": summary},
            )
        )
        if point.output.trajectories:
            paths.extend(_dump_trajectories(point, opts))
        rows.append({**labels, "config_hash": config_hash(point), **summary})
    paths.append(write_table(rows, opts.out_dir / "spectrum_summary.csv"))
    return paths


def cmd_summarize(cfg: RunConfig, opts: RunOptions) -> Path:
    """re-analyse spectra written by `cmd_spectrum` for the same config; outputs from other configs are rejected"""
    if cfg.analysis.calibrate_wall_reset:
        calibration_path: Path = opts.out_dir / "calibration.json"
        if not calibration_path.exists():
            raise OutputMismatchError(f"{calibration_path} is missing; the spectra were calibrated when written")
        cfg = apply_overrides(
            cfg,
            {
                "cell.wall_reset_probability": read_json(calibration_path)["wall_reset_probability"],
                "analysis.calibrate_wall_reset": False,
            },
        )
    rows: list[dict[str, Any]] = []
    for labels, point in sweep_points(cfg):
        est, _ = read_spectrum(opts.out_dir, labels, config_hash(point))
        summary: dict[str, Any] = summarize_spectrum(
            est,
            center_khz=point.dynamics.larmor_khz,
            offset_khz=point.analysis.background_offset_khz,
            halfwidth_khz=point.analysis.background_halfwidth_khz,
        )
        rows.append({**labels, "config_hash": config_hash(point), **summary})
        logger.info(f"{point_slug(labels)}: {summary}")
    return write_table(rows, opts.out_dir / "summary.csv")


# squeezing
# ==============================


def _feature_rows(cfg: RunConfig, opts: RunOptions, stream: int) -> list[FeatureRow]:
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    return run_setup(
        setup,
        cfg.dynamics.n_repeats,
        opts.seed,
        stream=stream,
        workers=opts.workers,
        progress=opts.progress,
        reducer=reduce_to_features,
    )


def pnl_for(cfg: RunConfig, opts: RunOptions) -> float:
    """PNL reference for one sweep point from its calibration run"""
    mode = cfg.analysis.pnl_mode
    if mode == "theory_stationary":
        calib: RunConfig = apply_overrides(cfg, {"dynamics.stationary_atoms": True})
        rows: list[FeatureRow] = _feature_rows(calib, opts, STREAM_PNL)
        return pnl_reference(mode, stationary_variance=target_variance(rows, cfg.analysis.target))
    calib = apply_overrides(cfg, {"dynamics.initial_state": "thermal"})
    rows = _feature_rows(calib, opts, STREAM_PNL)
    return pnl_reference(mode, thermal_variance=target_variance(rows, cfg.analysis.target))


def squeezing_point(cfg: RunConfig, opts: RunOptions) -> dict[str, Any]:
    """squeezing of one config over `analysis.n_batches` independent batches"""
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    kappa: float = setup.field.kappa_effective
    bin_width: float = setup.duration / setup.n_bins
    min_lag_time: float = transit_lag_time(setup)
    var_pnl: float = pnl_for(cfg, opts)
    analysis = cfg.analysis

    batches: list[SqueezingResult] = []
    predictions: list[SqueezingResult] = []
    for b in range(analysis.n_batches):
        rows: list[FeatureRow] = _feature_rows(cfg, opts, batch_stream(b, STREAM_MAIN))
        result: SqueezingResult = analyze_rows(
            rows,
            var_pnl,
            target=analysis.target,
            estimator=analysis.estimator,
            dof_correction=analysis.dof_correction,
            kappa=kappa,
            bin_width=bin_width,
            min_lag_time=min_lag_time,
        )
        prediction: SqueezingResult = analyze_rows(
            rows,
            var_pnl,
            target=analysis.target,
            estimator="prediction",
            dof_correction=analysis.dof_correction,
        )
        retro: SqueezingResult = (
            result
            if analysis.estimator == "retrodiction"
            else analyze_rows(rows, var_pnl, target=analysis.target, dof_correction=analysis.dof_correction)
        )
        if retro.var_conditional > prediction.var_conditional + ORDERING_TOLERANCE * prediction.var_conditional:
            raise NumericalError(
                f"retrodiction variance {retro.var_conditional!r} exceeds prediction {prediction.var_conditional!r}"
            )
        if result.var_prior is not None and result.var_conditional > result.var_prior * (1 + ORDERING_TOLERANCE):
            raise NumericalError("conditional variance exceeds its prior")
        logger.info(f"batch {b}: xi^2 = {result.xi_squared_db:.3f} dB")
        batches.append(result)
        predictions.append(prediction)

    mean_db, error_db = batch_statistics([r.xi_squared_db for r in batches])
    k2t2_values: list[float] = [r.kappa2_T2 for r in batches if r.kappa2_T2 is not None]
    return {
        "config_hash": config_hash(cfg),
        "seed": opts.seed,
        "beam_diameter_mm": cfg.beam.diameter_mm,
        "beam_shape": cfg.beam.shape,
        "kappa_ms_sqrt": kappa,
        "larmor_khz": cfg.dynamics.larmor_khz,
        "estimator": analysis.estimator,
        "var_conditional": sum(r.var_conditional for r in batches) / len(batches),
        "var_corrected": sum(
            r.var_conditional if r.var_corrected is None else r.var_corrected for r in batches
        )
        / len(batches),
        "ridge": max(r.ridge for r in batches),
        "var_pnl": var_pnl,
        "xi2_db": mean_db,
        "xi2_db_prediction": batch_statistics([r.xi_squared_db for r in predictions])[0],
        "kappa2_T2": sum(k2t2_values) / len(k2t2_values) if k2t2_values else None,
        "n_repeats": cfg.dynamics.n_repeats,
        "n_batches": analysis.n_batches,
        "error_bar_db": error_db,
    }


def cmd_squeezing(cfg: RunConfig, opts: RunOptions) -> Path:
    """`squeezing.json` (one result per sweep point) and the same rows as `squeezing.csv`"""
    cfg = resolve_calibration(cfg, opts)
    results: list[dict[str, Any]] = []
    for labels, point in sweep_points(cfg):
        logger.info(f"squeezing {point_slug(labels)}: {config_hash(point)}")
        entry: dict[str, Any] = {**squeezing_point(point, opts), "labels": labels}
        logger.info(f"{point_slug(labels)}: xi^2 = {entry['xi2_db']:.2f} +- {entry['error_bar_db']:.2f} dB")
        results.append(entry)
    write_table(
        [{k: v for k, v in r.items() if k != "labels"} | r["labels"] for r in results],
        opts.out_dir / "squeezing.csv",
    )
    return write_json(opts.out_dir / "squeezing.json", results)


# calibration
# ==============================


class BisectionResult(NamedTuple):
    argument: float
    value: float
    iterations: int
    history: list[tuple[float, float]]


def bisect_decreasing(
    func: Callable[[float], float],
    low: float,
    high: float,
    target: float,
    tolerance: float,
    max_iter: int,
) -> BisectionResult:
    """find x in [`low`, `high`] with `func(x)` within `tolerance` (relative) of `target`, for decreasing `func`

    # Raises:
    - `CalibrationError` : `target` lies outside [func(high), func(low)], or
      `max_iter` midpoints did not get close enough
    """
    value_low, value_high = func(low), func(high)
    history: list[tuple[float, float]] = [(low, value_low), (high, value_high)]
    if not value_high <= target <= value_low:
        raise CalibrationError(
            f"target {target} is not bracketed by [{value_high:.4g}, {value_low:.4g}] over [{low}, {high}]"
        )
    for iterations in range(1, max_iter + 1):
        middle: float = 0.5 * (low + high)
        value: float = func(middle)
        history.append((middle, value))
        if abs(value - target) <= tolerance * target:
            return BisectionResult(argument=middle, value=value, iterations=iterations, history=history)
        if value > target:
            low = middle
        else:
            high = middle
    raise CalibrationError(
        f"no argument within {tolerance:.1%} of target {target} after {max_iter} bisection steps"
    )


def measure_kappa2_t2(cfg: RunConfig, opts: RunOptions, stream: int) -> float:
    """kappa^2 T2 with T2 fitted to the autocovariance of the binned record"""
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    rows: list[FeatureRow] = _feature_rows(cfg, opts, stream)
    features = covariance_analysis(stack_results(rows, "features"))
    t2: float = fit_t2(features, setup.duration / setup.n_bins, transit_lag_time(setup))
    return kappa2_t2(setup.field.kappa_effective, t2)


def calibrate_wall_reset(cfg: RunConfig, opts: RunOptions) -> CalibrationReport:
    """bisect `cell.wall_reset_probability` until the fitted kappa^2 T2 hits its target

    The search starts from the reset probability whose wall decay alone
    gives the target T2, bracketing it by `CALIBRATION_BRACKET` before
    falling back to the full [0, `analysis.calibration_upper`] range. All
    bisection steps share one random stream, so the measured curve is
    monotone in the reset probability up to the fit. The result is checked
    on an independent stream, and `calibrated.cfg` / `calibration.json` are
    written either way.
    """
    base: RunConfig = dataclasses.replace(cfg, sweep=())
    analysis = base.analysis
    target: float = analysis.kappa2_t2_target
    setup: MeasurementSetup = MeasurementSetup.from_config(base)
    kappa: float = setup.field.kappa_effective
    if not kappa > 0:
        raise CalibrationError("kappa^2 T2 calibration needs a nonzero coupling")
    estimate: float = wall_reset_probability_for(setup.geom, target / (kappa * kappa))
    logger.info(f"wall decay alone reaches kappa^2 T2 = {target} at wall_reset_probability = {estimate:.4g}")

    measured: dict[float, float] = {}

    def measure(probability: float) -> float:
        if probability not in measured:
            measured[probability] = measure_kappa2_t2(
                apply_overrides(base, {"cell.wall_reset_probability": probability}), opts, STREAM_MAIN
            )
            logger.info(f"wall_reset_probability = {probability:.6g}: kappa^2 T2 = {measured[probability]:.4f}")
        return measured[probability]

    high: float = min(analysis.calibration_upper, CALIBRATION_BRACKET * estimate)
    if measure(high) > target:
        high = analysis.calibration_upper
    found: BisectionResult = bisect_decreasing(
        measure,
        0.0,
        high,
        target,
        analysis.calibration_tolerance,
        analysis.calibration_max_iter,
    )

    calibrated: RunConfig = apply_overrides(
        cfg,
        {"cell.wall_reset_probability": found.argument, "analysis.calibrate_wall_reset": False},
    )
    held_out: float = measure_kappa2_t2(dataclasses.replace(calibrated, sweep=()), opts, STREAM_HELD_OUT)
    held_out_ok: bool = abs(held_out - target) <= analysis.calibration_held_out_tolerance
    if not held_out_ok:
        logger.warning(
            f"held-out kappa^2 T2 = {held_out:.4f} misses the target {target} "
            f"by more than {analysis.calibration_held_out_tolerance}"
        )

    config_path: Path = opts.out_dir / "calibrated.cfg"
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(format_config(calibrated), encoding="utf-8")
    report_path: Path = write_json(
        opts.out_dir / "calibration.json",
        {
            "config_hash": config_hash(calibrated),
            "seed": opts.seed,
            "target_kappa2_T2": target,
            "wall_reset_probability": found.argument,
            "wall_reset_probability_estimate": estimate,
            "kappa2_T2": found.value,
            "kappa2_T2_held_out": held_out,
            "held_out_ok": held_out_ok,
            "iterations": found.iterations,
            "history": [{"wall_reset_probability": p, "kappa2_T2": v} for p, v in found.history],
        },
    )
    return CalibrationReport(
        wall_reset_probability=found.argument,
        kappa2_T2=found.value,
        kappa2_T2_held_out=held_out,
        held_out_ok=held_out_ok,
        iterations=found.iterations,
        config=calibrated,
        config_path=config_path,
        report_path=report_path,
    )


def cmd_calibrate(cfg: RunConfig, opts: RunOptions) -> CalibrationReport:
    """calibrate the wall reset probability and insist that the held-out run confirms it

    # Raises:
    - `CalibrationError` : no bracket, no convergence, or a held-out miss (the
      report and config are still written in the last case)
    """
    report: CalibrationReport = calibrate_wall_reset(cfg, opts)
    if not report.held_out_ok:
        raise CalibrationError(
            f"held-out kappa^2 T2 = {report.kappa2_T2_held_out:.4f} misses the target "
            f"{cfg.analysis.kappa2_t2_target}; see {report.report_path}"
        )
    return report


def resolve_calibration(cfg: RunConfig, opts: RunOptions) -> RunConfig:
    """`cfg` itself, or with its wall reset probability calibrated first when `analysis.calibrate_wall_reset` is set"""
    if not cfg.analysis.calibrate_wall_reset:
        return cfg
    report: CalibrationReport = calibrate_wall_reset(cfg, opts)
    logger.info(
        f"calibrated wall_reset_probability = {report.wall_reset_probability:.6g} "
        f"(held-out kappa^2 T2 = {report.kappa2_T2_held_out:.4f})"
    )
    return report.config
