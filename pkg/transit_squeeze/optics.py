"""probe beam profiles, the Faraday coupling constant, and per-atom coupling weights

Rates and couplings handed to the dynamics are in ms units: kappa in
ms^-1/2, angular frequencies in rad/ms. `CouplingParams` is SI, matching the
way the coupling formula is usually written down.
"""

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import integrate

from transit_squeeze._constants import (
    AREA_REFERENCE,
    ATOM_NUMBER_REFERENCE,
    C_LIGHT,
    DETUNING_REFERENCE,
    DUTY_CYCLE_REFERENCE,
    GAMMA_NATURAL,
    HBAR,
    PEAK_POWER_REFERENCE,
    SPLIT_13,
    SPLIT_23,
    WAVELENGTH_D2,
)
from transit_squeeze._exceptions import (
    CouplingDomainError,
    InvalidParameterError,
    SingularDetuningError,
)
from transit_squeeze.kinematics import CellGeometry

BeamShape = Literal["gaussian", "tophat"]
BEAM_SHAPES: tuple[BeamShape, ...] = ("gaussian", "tophat")

NormalizationMode = Literal["mean", "variance"]
NORMALIZATION_MODES: tuple[NormalizationMode, ...] = ("mean", "variance")

# kappa^2 in s^-1 -> ms^-1
_SQRT_S_TO_MS: float = math.sqrt(1e-3)


@dataclass(frozen=True)
class BeamProfile:
    """transverse probe profile; `radius_beam` is the 1/e^2 intensity radius for gaussian beams"""

    shape: BeamShape
    radius_beam: float  # mm
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.shape not in BEAM_SHAPES:
            raise InvalidParameterError(
                f"unknown beam shape {self.shape!r}, expected one of {BEAM_SHAPES}"
            )
        if not self.radius_beam > 0:
            raise InvalidParameterError(
                f"radius_beam must be positive, got {self.radius_beam = }"
            )

    @classmethod
    def from_diameter(
        cls,
        shape: BeamShape,
        diameter: float,
        center: tuple[float, float] = (0.0, 0.0),
    ) -> "BeamProfile":
        """build from a quoted diameter (1/e^2 diameter for gaussian beams), in mm"""
        return cls(shape=shape, radius_beam=diameter / 2, center=center)

    @property
    def is_centered(self) -> bool:
        return self.center == (0.0, 0.0)


@dataclass(frozen=True)
class CouplingParams:
    """inputs of the effective Faraday coupling, all SI (rad/s, m, m^2, W)"""

    gamma_natural: float = GAMMA_NATURAL
    wavelength: float = WAVELENGTH_D2
    area_interaction: float = AREA_REFERENCE
    detuning: float = DETUNING_REFERENCE
    split_13: float = SPLIT_13
    split_23: float = SPLIT_23
    power_peak: float = PEAK_POWER_REFERENCE
    duty_cycle: float = DUTY_CYCLE_REFERENCE
    atom_number: float = ATOM_NUMBER_REFERENCE
    photon_angular_frequency: float | None = None
    hbar: float = HBAR
    c_light: float = C_LIGHT

    def __post_init__(self) -> None:
        if self.detuning == 0:
            raise InvalidParameterError("detuning must be nonzero")
        if not 0 < self.duty_cycle <= 1:
            raise InvalidParameterError(
                f"duty_cycle must lie in (0, 1], got {self.duty_cycle = }"
            )
        for name in ("gamma_natural", "wavelength", "split_13", "split_23", "hbar", "c_light"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive, got {getattr(self, name)!r}")

    @property
    def omega_photon(self) -> float:
        """optical angular frequency, from the wavelength unless given explicitly"""
        if self.photon_angular_frequency is not None:
            return self.photon_angular_frequency
        return 2 * math.pi * self.c_light / self.wavelength


@dataclass(frozen=True)
class CouplingField:
    """effective coupling and the normalization that maps beam intensity to per-atom weights"""

    kappa_effective: float  # ms^-1/2
    normalization: float
    mode: NormalizationMode = "mean"


def beam_intensity(profile: BeamProfile, point: np.ndarray) -> np.ndarray:
    """relative intensity (peak 1) at `point`, shape (..., 2) -> (...)"""
    p: np.ndarray = np.asarray(point, dtype=float) - np.asarray(profile.center)
    r2: np.ndarray = np.sum(p * p, axis=-1)
    w2: float = profile.radius_beam * profile.radius_beam
    if profile.shape == "gaussian":
        return np.exp(-2.0 * r2 / w2)
    return (r2 <= w2).astype(float)


def intensity_moments(profile: BeamProfile, geom: CellGeometry) -> tuple[float, float]:
    """(E[u], E[u^2]) of the relative intensity for a point uniform on the cell disk

    closed form for a beam centered in the cell, 2D quadrature otherwise
    """
    R: float = geom.radius_cell
    w: float = profile.radius_beam
    if profile.is_centered:
        if profile.shape == "gaussian":
            first: float = (w * w / (2 * R * R)) * -math.expm1(-2 * R * R / (w * w))
            second: float = (w * w / (4 * R * R)) * -math.expm1(-4 * R * R / (w * w))
            return first, second
        covered: float = min(w, R) ** 2 / (R * R)
        return covered, covered

    def _moment(power: int) -> float:
        value, _ = integrate.dblquad(
            lambda theta, r: r
            * float(beam_intensity(profile, np.array([r * math.cos(theta), r * math.sin(theta)])))
            ** power,
            0.0,
            R,
            0.0,
            2 * math.pi,
        )
        return value / (math.pi * R * R)

    return _moment(1), _moment(2)


# coupling constant
# ==============================


def vector_coefficient_a1(params: CouplingParams) -> float:
    """vector interaction coefficient of the 87Rb D2 line for a detuning from F'=3

    a1 = (sqrt(2)/100) (-15 / (1 - d13/d) - 25 / (1 - d23/d) + 140)
    """
    d: float = params.detuning
    for split, name in ((params.split_13, "split_13"), (params.split_23, "split_23")):
        if math.isclose(d, split, rel_tol=1e-12):
            raise SingularDetuningError(f"detuning {d!r} rad/s coincides with {name}")
    return (math.sqrt(2) / 100) * (
        -15 / (1 - params.split_13 / d) - 25 / (1 - params.split_23 / d) + 140
    )


def effective_kappa(params: CouplingParams, stroboscopic: bool = True) -> float:
    """effective coupling in ms^-1/2

    kappa = -(Gamma lambda^2) / (16 pi A Delta) * a1 * sqrt(P N / (hbar omega)),
    with the time-averaged power P * duty when `stroboscopic` is set.
    positive for a negative detuning when a1 > 0.

    # Raises:
    - `CouplingDomainError` : nonpositive area, negative power or atom number
    - `SingularDetuningError` : from `vector_coefficient_a1`
    """
    if not params.area_interaction > 0:
        raise CouplingDomainError(
            f"area_interaction must be positive, got {params.area_interaction!r} m^2"
        )
    if params.power_peak < 0:
        raise CouplingDomainError(f"power_peak must be nonnegative, got {params.power_peak!r} W")
    if params.atom_number < 0:
        raise CouplingDomainError(f"atom_number must be nonnegative, got {params.atom_number!r}")

    power: float = params.power_peak * (params.duty_cycle if stroboscopic else 1.0)
    prefactor: float = -(params.gamma_natural * params.wavelength**2) / (
        16 * math.pi * params.area_interaction * params.detuning
    )
    photon_flux: float = power * params.atom_number / (params.hbar * params.omega_photon)
    return prefactor * vector_coefficient_a1(params) * math.sqrt(photon_flux) * _SQRT_S_TO_MS


def resolve_kappa(kappa_target: float | None, params: CouplingParams) -> float:
    """`kappa_target` when pinned, otherwise the coupling formula evaluated on `params`"""
    if kappa_target is not None:
        if kappa_target < 0:
            raise InvalidParameterError(f"kappa_target must be nonnegative, got {kappa_target!r}")
        return kappa_target
    return abs(effective_kappa(params))


# per-atom weights
# ==============================


def coupling_field(
    kappa: float,
    profile: BeamProfile,
    geom: CellGeometry,
    normalization: NormalizationMode = "mean",
) -> CouplingField:
    """fix the intensity normalization for a beam/cell pair

    - `"mean"`: the ensemble average of kappa(t) equals `kappa`, so the
      beam-integrated probe power does not depend on the beam size
    - `"variance"`: the ensemble average of sum_i g_i^2 equals `kappa**2`
    """
    if normalization not in NORMALIZATION_MODES:
        raise InvalidParameterError(
            f"unknown normalization {normalization!r}, expected one of {NORMALIZATION_MODES}"
        )
    mean_u, mean_u2 = intensity_moments(profile, geom)
    norm: float = mean_u if normalization == "mean" else math.sqrt(mean_u2)
    if not norm > 0:
        raise InvalidParameterError("probe beam does not overlap the cell")
    return CouplingField(kappa_effective=kappa, normalization=norm, mode=normalization)


def instantaneous_coupling(
    field: CouplingField,
    profile: BeamProfile,
    point: np.ndarray,
    n_sim: int,
) -> np.ndarray:
    """g_i = kappa * u(r_i) / (normalization * sqrt(n_sim)) for atom position(s) `point`"""
    if n_sim < 1:
        raise InvalidParameterError(f"n_sim must be at least 1, got {n_sim = }")
    return (
        field.kappa_effective
        * beam_intensity(profile, point)
        / (field.normalization * math.sqrt(n_sim))
    )


def peak_coupling(field: CouplingField, duty: float) -> CouplingField:
    """field for the pulses of a stroboscopic probe with the same time-averaged kappa^2"""
    if not 0 < duty <= 1:
        raise InvalidParameterError(f"duty must lie in (0, 1], got {duty = }")
    return CouplingField(
        kappa_effective=field.kappa_effective / math.sqrt(duty),
        normalization=field.normalization,
        mode=field.mode,
    )


def strobe_envelope(
    t: np.ndarray | float,
    larmor: float,
    duty: float,
) -> np.ndarray:
    """square pulses at twice the Larmor frequency, centered where cos(larmor t) = +-1

    `larmor` in rad/ms, `t` in ms. duty 1 or a zero field give continuous probing.
    """
    if not 0 < duty <= 1:
        raise InvalidParameterError(f"duty must lie in (0, 1], got {duty = }")
    t_arr: np.ndarray = np.asarray(t, dtype=float)
    if duty == 1 or larmor == 0:
        return np.ones_like(t_arr)
    phase: np.ndarray = np.mod(larmor * t_arr / math.pi, 1.0)
    return ((phase < duty / 2) | (phase > 1 - duty / 2)).astype(float)


def _strobe_on_time(phase: np.ndarray, duty: float) -> np.ndarray:
    # pulse-on phase accumulated from 0, phase measured in half Larmor periods
    whole: np.ndarray = np.floor(phase)
    frac: np.ndarray = phase - whole
    return whole * duty + np.minimum(frac, duty / 2) + np.maximum(frac - (1 - duty / 2), 0.0)


def strobe_fraction(
    t: np.ndarray | float,
    dt: float,
    larmor: float,
    duty: float,
) -> np.ndarray:
    """fraction of the step [t, t + dt) during which `strobe_envelope` is on

    exact for any step size, so integrated probe exposure does not depend on
    how the pulses fall on the sampling grid
    """
    if not 0 < duty <= 1:
        raise InvalidParameterError(f"duty must lie in (0, 1], got {duty = }")
    t_arr: np.ndarray = np.asarray(t, dtype=float)
    if duty == 1 or larmor == 0:
        return np.ones_like(t_arr)
    scale: float = larmor / math.pi
    on_time: np.ndarray = _strobe_on_time(scale * (t_arr + dt), duty) - _strobe_on_time(
        scale * t_arr, duty
    )
    return np.clip(on_time / (scale * dt), 0.0, 1.0)


def readout_weights(
    t: np.ndarray | float,
    dt: float,
    larmor: float,
    duty: float,
) -> np.ndarray:
    """matched filter for the p quadrature on the step grid starting at `t`

    pulse amplitude sqrt(exposure / duty) times the in-phase reference
    cos(larmor t) at the step midpoint. Steps the probe never lights get
    weight 0, so their shot noise drops out of the estimate.
    """
    t_arr: np.ndarray = np.asarray(t, dtype=float)
    exposure: np.ndarray = strobe_fraction(t_arr, dt, larmor, duty)
    return np.sqrt(exposure / duty) * np.cos(larmor * (t_arr + 0.5 * dt))


def probe_decoherence_peak(gamma_probe: float, mean_intensity: float, duty: float) -> float:
    """peak-intensity, pulse-on probe decoherence rate whose ensemble and time average is `gamma_probe`"""
    if gamma_probe < 0:
        raise InvalidParameterError(f"gamma_probe must be nonnegative, got {gamma_probe = }")
    if gamma_probe == 0:
        return 0.0
    return gamma_probe / (mean_intensity * duty)
