"""stochastic spin dynamics and synthesis of the optical measurement record

Spins are kept in the frame rotating at the Larmor frequency, so without
coupling or decay the quadratures are constant. Each simulated atom carries
Gaussian quadratures (x_i, p_i) with variance 1/2; collective quadratures are
X = sum(x_i) / sqrt(n_sim), which keeps the collective statistics independent
of n_sim. The light couples to the collective spin through per-atom weights
g_i(t) set by the local probe intensity (see `optics`).

Units: time in ms, rates in ms^-1, angular frequencies in rad/ms.
"""

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, NamedTuple

import numpy as np

from transit_squeeze._constants import CSS_VARIANCE, ZERO_CELSIUS
from transit_squeeze._exceptions import InvalidParameterError, StepSizeError
from transit_squeeze.batch import STREAM_MAIN, run_repeats, stack_results
from transit_squeeze.config import RunConfig, config_hash
from transit_squeeze.kinematics import (
    CellGeometry,
    propagate_ensemble,
    sample_initial_position,
    sample_initial_velocity,
)
from transit_squeeze.optics import (
    BeamProfile,
    CouplingField,
    CouplingParams,
    beam_intensity,
    coupling_field,
    instantaneous_coupling,
    intensity_moments,
    peak_coupling,
    probe_decoherence_peak,
    readout_weights,
    resolve_kappa,
    strobe_fraction,
)

logger: logging.Logger = logging.getLogger(__name__)

# Euler-Maruyama stability limits
MAX_DECAY_PER_STEP: float = 0.05
MIN_SAMPLES_PER_LARMOR_PERIOD: int = 20
# default step: 40 samples per Larmor period, never coarser than 1 us
SAMPLES_PER_LARMOR_PERIOD: int = 40
MAX_DEFAULT_DT: float = 1e-3  # ms

InitialState = Literal["css", "thermal"]


class SpinEnsemble(NamedTuple):
    """per-atom quadratures in the rotating frame"""

    x_quad: np.ndarray
    p_quad: np.ndarray
    n_sim: int
    time: float = 0.0

    @property
    def collective_x(self) -> float:
        return float(np.sum(self.x_quad) / math.sqrt(self.n_sim))

    @property
    def collective_p(self) -> float:
        return float(np.sum(self.p_quad) / math.sqrt(self.n_sim))


class LightInputs(NamedTuple):
    """one sample of the shot-noise-limited input quadratures"""

    x_in: float
    p_in: float


@dataclass(frozen=True)
class DecoherenceParams:
    """transverse decay: `gamma_background` everywhere, plus `gamma_probe_peak` * local intensity while the probe is on"""

    gamma_background: float = 0.0  # ms^-1
    gamma_probe_peak: float = 0.0  # ms^-1
    langevin_variance: float = CSS_VARIANCE

    def __post_init__(self) -> None:
        if self.gamma_background < 0 or self.gamma_probe_peak < 0:
            raise InvalidParameterError(
                f"decay rates must be nonnegative, got {self.gamma_background = }, {self.gamma_probe_peak = }"
            )
        if self.langevin_variance < 0:
            raise InvalidParameterError(
                f"langevin_variance must be nonnegative, got {self.langevin_variance = }"
            )

    @property
    def gamma_max(self) -> float:
        return self.gamma_background + self.gamma_probe_peak


@dataclass(frozen=True)
class MeasurementRecord:
    """`samples[j, k]` is x_out of repeat j at time k*dt

    `truth_x`/`truth_p` hold the collective quadratures of every repeat at
    `truth_times`, which are the bin edges of the record (first and last
    sample included). Experiments cannot see them; the analysis uses them as
    the squeezing target and as an oracle.
    """

    samples: np.ndarray  # (N, n)
    dt: float  # ms
    larmor: float  # rad/ms
    metadata: dict[str, Any] = field(default_factory=dict)
    truth_x: np.ndarray | None = None  # (N, bins + 1)
    truth_p: np.ndarray | None = None  # (N, bins + 1)
    truth_times: np.ndarray | None = None  # (bins + 1,)

    def __post_init__(self) -> None:
        if self.samples.ndim != 2:
            raise InvalidParameterError(
                f"samples must be a (repeats, times) array, got shape {self.samples.shape}"
            )
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt = }")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidParameterError("measurement record contains non-finite samples")

    @property
    def n_repeats(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_samples)

    @property
    def duration(self) -> float:
        return self.dt * self.n_samples


class RepeatOutput(NamedTuple):
    """one simulated repeat: the light record and the collective spin at the bin edges"""

    x_out: np.ndarray  # (n,)
    truth_x: np.ndarray  # (bins + 1,)
    truth_p: np.ndarray  # (bins + 1,)


# step size
# ==============================


def default_time_step(larmor: float) -> float:
    """40 samples per Larmor period, capped at 1 us; `larmor` in rad/ms"""
    if larmor == 0:
        return MAX_DEFAULT_DT
    return min(MAX_DEFAULT_DT, 2 * math.pi / (SAMPLES_PER_LARMOR_PERIOD * abs(larmor)))


def check_step_size(dt: float, larmor: float, dec: DecoherenceParams) -> None:
    """raise `StepSizeError` when `dt` under-resolves decay or the 2x Larmor strobe"""
    if not dt > 0:
        raise StepSizeError(f"dt must be positive, got {dt = }")
    if dt * dec.gamma_max > MAX_DECAY_PER_STEP:
        raise StepSizeError(
            f"dt = {dt} ms is too coarse for a decay rate of {dec.gamma_max} ms^-1 "
            f"(dt * gamma = {dt * dec.gamma_max:.3g} > {MAX_DECAY_PER_STEP})"
        )
    if abs(larmor) * dt > 2 * math.pi / MIN_SAMPLES_PER_LARMOR_PERIOD:
        raise StepSizeError(
            f"dt = {dt} ms gives fewer than {MIN_SAMPLES_PER_LARMOR_PERIOD} samples per Larmor period"
        )


# elementary operations
# ==============================


def init_css_ensemble(
    n_sim: int,
    rng: np.random.Generator,
    variance: float = CSS_VARIANCE,
) -> SpinEnsemble:
    """i.i.d. Gaussian quadratures, mean 0, per-atom (and so collective) variance `variance`"""
    if n_sim < 1:
        raise InvalidParameterError(f"n_sim must be at least 1, got {n_sim = }")
    scale: float = math.sqrt(variance)
    return SpinEnsemble(
        x_quad=rng.normal(0.0, scale, n_sim),
        p_quad=rng.normal(0.0, scale, n_sim),
        n_sim=n_sim,
    )


def draw_light(rng: np.random.Generator, dt: float) -> LightInputs:
    """independent input quadratures with two-sided spectral density 1/2, i.e. variance 1/(2 dt) per sample"""
    scale: float = math.sqrt(0.5 / dt)
    x_in, p_in = rng.normal(0.0, scale, 2)
    return LightInputs(x_in=float(x_in), p_in=float(p_in))


def readout_sample(
    ens: SpinEnsemble,
    couplings: np.ndarray,
    light: LightInputs,
    larmor: float,
    t: float,
) -> float:
    """x_out = x_in + sum_i g_i (p_i cos(larmor t) - x_i sin(larmor t)); p_out = p_in is not recorded"""
    phase: float = larmor * t
    return light.x_in + float(
        np.dot(couplings, ens.p_quad) * math.cos(phase)
        - np.dot(couplings, ens.x_quad) * math.sin(phase)
    )


def step_spin(
    ens: SpinEnsemble,
    couplings: np.ndarray,
    light: LightInputs,
    dec: DecoherenceParams,
    larmor: float,
    dt: float,
    rng: np.random.Generator,
    probe_weight: np.ndarray | float = 0.0,
    reset: np.ndarray | None = None,
    reset_variance: float = CSS_VARIANCE,
) -> SpinEnsemble:
    """one Euler-Maruyama step of the Langevin equations with measurement backaction

    dx_i = g_i p_in cos(larmor t) dt - gamma_i x_i dt + sqrt(2 gamma_i dt) f
    dp_i = -g_i p_in sin(larmor t) dt - gamma_i p_i dt + sqrt(2 gamma_i dt) f

    with gamma_i = gamma_background + gamma_probe_peak * `probe_weight`_i and
    f ~ Normal(0, langevin_variance). The Larmor phase is taken at the step
    midpoint, so a pulse straddling a grid point kicks both sides evenly.
    Atoms flagged in `reset` then get fresh quadratures with variance
    `reset_variance`.
    """
    check_step_size(dt, larmor, dec)
    phase: float = larmor * (ens.time + 0.5 * dt)
    gamma: np.ndarray = np.broadcast_to(
        dec.gamma_background + dec.gamma_probe_peak * np.asarray(probe_weight, dtype=float),
        ens.x_quad.shape,
    )
    kick: np.ndarray = couplings * (light.p_in * dt)
    x_new: np.ndarray = ens.x_quad + kick * math.cos(phase) - gamma * ens.x_quad * dt
    p_new: np.ndarray = ens.p_quad - kick * math.sin(phase) - gamma * ens.p_quad * dt

    if np.any(gamma > 0):
        noise: np.ndarray = np.sqrt(2.0 * gamma * dt * dec.langevin_variance)
        x_new = x_new + noise * rng.standard_normal(ens.n_sim)
        p_new = p_new + noise * rng.standard_normal(ens.n_sim)

    if reset is not None:
        n_reset: int = int(np.count_nonzero(reset))
        if n_reset:
            scale: float = math.sqrt(reset_variance)
            x_new[reset] = rng.normal(0.0, scale, n_reset)
            p_new[reset] = rng.normal(0.0, scale, n_reset)

    return SpinEnsemble(x_quad=x_new, p_quad=p_new, n_sim=ens.n_sim, time=ens.time + dt)


# one repeat
# ==============================


@dataclass(frozen=True)
class MeasurementSetup:
    """everything a single repeat needs, resolved from a run configuration"""

    geom: CellGeometry
    profile: BeamProfile
    field: CouplingField  # time-averaged coupling
    decoherence: DecoherenceParams
    larmor: float  # rad/ms
    duty: float
    dt: float  # ms
    n_steps: int
    n_sim: int
    n_bins: int
    stationary: bool = False
    initial_variance: float = CSS_VARIANCE

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise InvalidParameterError(f"n_steps must be at least 1, got {self.n_steps = }")
        if not 1 <= self.n_bins <= self.n_steps:
            raise InvalidParameterError(
                f"n_bins must lie in [1, n_steps = {self.n_steps}], got {self.n_bins = }"
            )
        if self.n_sim < 1:
            raise InvalidParameterError(f"n_sim must be at least 1, got {self.n_sim = }")
        check_step_size(self.dt, self.larmor, self.decoherence)

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def bin_edges(self) -> np.ndarray:
        """sample indices of the bin edges, n_bins + 1 of them from 0 to n_steps"""
        return np.round(np.linspace(0, self.n_steps, self.n_bins + 1)).astype(int)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps)

    @property
    def exposure(self) -> np.ndarray:
        """pulse-on fraction of every step"""
        return strobe_fraction(self.times, self.dt, self.larmor, self.duty)

    @property
    def readout_weights(self) -> np.ndarray:
        """matched filter of the record for the p quadrature, one weight per step"""
        return readout_weights(self.times, self.dt, self.larmor, self.duty)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MeasurementSetup":
        geom: CellGeometry = CellGeometry(
            radius_cell=cfg.cell.radius,
            temperature=cfg.cell.temperature_c + ZERO_CELSIUS,
            wall_reset_probability=cfg.cell.wall_reset_probability,
        )
        profile: BeamProfile = BeamProfile.from_diameter(
            shape=cfg.beam.shape,
            diameter=cfg.beam.diameter_mm,
            center=(cfg.beam.center_x_mm, cfg.beam.center_y_mm),
        )
        duty: float = cfg.probe.duty_cycle if cfg.probe.stroboscopic else 1.0
        params: CouplingParams = CouplingParams(
            area_interaction=cfg.probe.area_mm2 * 1e-6,
            detuning=2 * math.pi * cfg.probe.detuning_ghz * 1e9,
            power_peak=cfg.probe.peak_power_mw * 1e-3,
            duty_cycle=duty,
            atom_number=cfg.probe.atom_number,
        )
        kappa: float = resolve_kappa(cfg.coupling.kappa_target, params)
        field_avg: CouplingField = coupling_field(
            kappa, profile, geom, normalization=cfg.coupling.normalization
        )
        mean_u, _ = intensity_moments(profile, geom)
        # no precession to follow: the probe stays on and carries the average power
        strobe_duty: float = duty if cfg.dynamics.larmor_khz != 0 else 1.0
        decoherence: DecoherenceParams = DecoherenceParams(
            gamma_background=cfg.dynamics.gamma_background,
            gamma_probe_peak=probe_decoherence_peak(cfg.dynamics.gamma_probe, mean_u, strobe_duty),
            langevin_variance=cfg.dynamics.langevin_variance,
        )
        larmor: float = 2 * math.pi * cfg.dynamics.larmor_khz
        dt: float = (
            cfg.dynamics.dt_us * 1e-3
            if cfg.dynamics.dt_us is not None
            else default_time_step(larmor)
        )
        initial_variance: float = CSS_VARIANCE * (
            cfg.dynamics.thermal_variance_ratio
            if cfg.dynamics.initial_state == "thermal"
            else 1.0
        )
        return cls(
            geom=geom,
            profile=profile,
            field=field_avg,
            decoherence=decoherence,
            larmor=larmor,
            duty=strobe_duty,
            dt=dt,
            n_steps=int(round(cfg.dynamics.duration_ms / dt)),
            n_sim=cfg.dynamics.n_sim,
            n_bins=cfg.analysis.bins,
            stationary=cfg.dynamics.stationary_atoms,
            initial_variance=initial_variance,
        )


def simulate_repeat(setup: MeasurementSetup, rng: np.random.Generator) -> RepeatOutput:
    """co-integrate atomic motion, spin dynamics and the light record for one repeat"""
    n_sim: int = setup.n_sim
    dt: float = setup.dt
    geom: CellGeometry = setup.geom

    positions: np.ndarray = sample_initial_position(geom, rng, n_sim)
    velocities: np.ndarray = (
        np.zeros((n_sim, 2)) if setup.stationary else sample_initial_velocity(geom, rng, n_sim)
    )
    ens: SpinEnsemble = init_css_ensemble(n_sim, rng, setup.initial_variance)

    # midpoint of every step, where the readout and the kicks take their phase
    midpoints: np.ndarray = setup.times + 0.5 * dt
    # couplings scale with the square root of the pulse exposure so that the
    # integral of kappa^2 over each step is exact
    exposure: np.ndarray = setup.exposure
    amplitude: np.ndarray = np.sqrt(exposure)
    pulse: CouplingField = peak_coupling(setup.field, setup.duty)
    probe_decay: bool = setup.decoherence.gamma_probe_peak > 0

    x_out: np.ndarray = np.empty(setup.n_steps)
    edges: np.ndarray = setup.bin_edges
    truth_x: np.ndarray = np.empty(edges.size)
    truth_p: np.ndarray = np.empty(edges.size)
    next_edge: int = 0

    local: np.ndarray = instantaneous_coupling(pulse, setup.profile, positions, n_sim)
    intensity: np.ndarray | float = beam_intensity(setup.profile, positions) if probe_decay else 0.0
    for k in range(setup.n_steps):
        while next_edge < edges.size and edges[next_edge] == k:
            truth_x[next_edge] = ens.collective_x
            truth_p[next_edge] = ens.collective_p
            next_edge += 1

        couplings: np.ndarray = amplitude[k] * local
        light: LightInputs = draw_light(rng, dt)
        x_out[k] = readout_sample(ens, couplings, light, setup.larmor, float(midpoints[k]))

        reset: np.ndarray | None = None
        if not setup.stationary:
            positions, velocities, reset = propagate_ensemble(positions, velocities, dt, geom, rng)

        ens = step_spin(
            ens,
            couplings,
            light,
            setup.decoherence,
            setup.larmor,
            dt,
            rng,
            probe_weight=intensity * exposure[k],
            reset=reset,
            reset_variance=setup.initial_variance,
        )
        if not setup.stationary:
            local = instantaneous_coupling(pulse, setup.profile, positions, n_sim)
            if probe_decay:
                intensity = beam_intensity(setup.profile, positions)

    while next_edge < edges.size:
        truth_x[next_edge] = ens.collective_x
        truth_p[next_edge] = ens.collective_p
        next_edge += 1

    return RepeatOutput(x_out=x_out, truth_x=truth_x, truth_p=truth_p)


def _reduced_repeat(
    setup: MeasurementSetup,
    reducer: Callable[[RepeatOutput, MeasurementSetup], Any],
    rng: np.random.Generator,
) -> Any:
    return reducer(simulate_repeat(setup, rng), setup)


def run_setup(
    setup: MeasurementSetup,
    n_repeats: int,
    seed: int,
    stream: int = STREAM_MAIN,
    workers: int = 1,
    progress: bool = False,
    reducer: Callable[[RepeatOutput, MeasurementSetup], Any] | None = None,
) -> list[Any]:
    """run `n_repeats` repeats of `setup`, optionally shrinking each one with `reducer` inside the worker"""
    task: Callable[[np.random.Generator], Any] = (
        functools.partial(simulate_repeat, setup)
        if reducer is None
        else functools.partial(_reduced_repeat, setup, reducer)
    )
    return run_repeats(task, n_repeats, seed, stream=stream, workers=workers, progress=progress)


def run_measurement(
    cfg: RunConfig,
    seed: int | None = None,
    workers: int = 1,
    stream: int = STREAM_MAIN,
    progress: bool = False,
) -> MeasurementRecord:
    """full Monte Carlo measurement: `cfg.dynamics.n_repeats` independent repeats

    identical (seed, config) give a bit-identical record for any worker count
    """
    setup: MeasurementSetup = MeasurementSetup.from_config(cfg)
    seed = cfg.seed if seed is None else seed
    logger.info(
        f"simulating {cfg.dynamics.n_repeats} repeats x {setup.n_steps} steps, "
        f"n_sim = {setup.n_sim}, dt = {setup.dt:.3g} ms"
    )
    results: list[RepeatOutput] = run_setup(
        setup, cfg.dynamics.n_repeats, seed, stream=stream, workers=workers, progress=progress
    )
    return MeasurementRecord(
        samples=stack_results(results, "x_out"),
        dt=setup.dt,
        larmor=setup.larmor,
        metadata={
            "seed": seed,
            "stream": stream,
            "config_hash": config_hash(cfg),
            "kappa_ms_sqrt": setup.field.kappa_effective,
        },
        truth_x=stack_results(results, "truth_x"),
        truth_p=stack_results(results, "truth_p"),
        truth_times=setup.dt * setup.bin_edges,
    )
