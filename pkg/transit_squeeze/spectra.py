"""lock-in demodulation and averaged spectral estimates of measurement records

Frequencies are in kHz and times in ms throughout, so a PSD is power per kHz.
Real records give one-sided spectra; complex baseband records give two-sided
spectra re-centred on the local oscillator, which is the single-sideband view
a lock-in amplifier gives.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy import signal
from scipy.optimize import curve_fit

from transit_squeeze._exceptions import (
    AliasingError,
    InvalidParameterError,
    NumericalError,
    SpectrumGridError,
)
from transit_squeeze.dynamics import MeasurementRecord, MeasurementSetup, RepeatOutput

logger: logging.Logger = logging.getLogger(__name__)

STOPBAND_ATTENUATION_DB: float = 60.0
# Kaiser transition width relative to the cutoff
TRANSITION_FRACTION: float = 0.5
# decimated rate relative to the cutoff
OVERSAMPLING: float = 4.0


@dataclass(frozen=True)
class DemodulatedRecord:
    """complex baseband, one row per repeat, sampled every `dt` ms after decimation"""

    baseband: np.ndarray  # (N, m) complex
    lo_frequency: float  # kHz
    filter_bandwidth: float  # kHz
    decimation: int
    dt: float  # ms

    def __post_init__(self) -> None:
        if self.filter_bandwidth > 0.5 / self.dt:
            raise AliasingError(
                f"filter bandwidth {self.filter_bandwidth} kHz exceeds the decimated Nyquist frequency {0.5 / self.dt} kHz"
            )

    @property
    def fs(self) -> float:
        return 1.0 / self.dt

    @property
    def in_phase(self) -> np.ndarray:
        return self.baseband.real

    @property
    def quadrature(self) -> np.ndarray:
        return self.baseband.imag


@dataclass(frozen=True)
class SpectrumEstimate:
    freq_khz: np.ndarray
    psd: np.ndarray  # per kHz
    n_averages: int
    resolution_bandwidth: float  # kHz
    psd_db: np.ndarray | None = None
    shot_reference: float | None = None

    def __post_init__(self) -> None:
        if self.freq_khz.shape != self.psd.shape:
            raise SpectrumGridError(
                f"frequency grid {self.freq_khz.shape} and psd {self.psd.shape} differ in shape"
            )
        if np.any(self.psd < 0):
            raise NumericalError("negative power spectral density")
        if self.freq_khz.size > 1:
            df: np.ndarray = np.diff(self.freq_khz)
            if np.any(df <= 0) or not np.allclose(df, df[0], rtol=1e-6):
                raise SpectrumGridError("frequency grid must be strictly increasing and uniform")

    @property
    def df(self) -> float:
        return float(self.freq_khz[1] - self.freq_khz[0]) if self.freq_khz.size > 1 else 0.0


class Periodogram(NamedTuple):
    """averaged periodogram of one repeat, the unit of work for parallel spectra"""

    freq_khz: np.ndarray
    psd: np.ndarray
    resolution_bandwidth: float


class LorentzianFit(NamedTuple):
    center_khz: float
    hwhm_khz: float
    amplitude: float
    floor: float
    residual: float  # |psd - model| / |psd| over the fit window


# demodulation
# ==============================


def lowpass_taps(fs: float, bw: float, stopband_db: float = STOPBAND_ATTENUATION_DB) -> np.ndarray:
    """odd-length linear-phase Kaiser FIR with cutoff `bw`, at least `stopband_db` down in the stopband"""
    nyquist: float = 0.5 * fs
    if not 0 < bw < nyquist:
        raise AliasingError(f"cutoff {bw} kHz must lie in (0, {nyquist}) kHz")
    transition: float = min(TRANSITION_FRACTION * bw, nyquist - bw, bw)
    numtaps, beta = signal.kaiserord(stopband_db, transition / nyquist)
    numtaps |= 1
    return signal.firwin(numtaps, bw, window=("kaiser", beta), fs=fs)


def default_decimation(fs: float, bw: float) -> int:
    return max(1, int(fs // (OVERSAMPLING * bw)))


def demodulate_samples(
    samples: np.ndarray,
    dt: float,
    lo: float,
    bw: float,
    decimation: int | None = None,
) -> tuple[np.ndarray, int]:
    """mix rows of `samples` down by `lo`, low-pass at `bw` and decimate

    zero-delay filtering (the FIR is applied centred), so baseband sample j
    lines up with input sample j * decimation
    """
    fs: float = 1.0 / dt
    if abs(lo) >= 0.5 * fs:
        raise AliasingError(f"local oscillator {lo} kHz is not below the Nyquist frequency {0.5 * fs} kHz")
    q: int = default_decimation(fs, bw) if decimation is None else decimation
    if q < 1 or bw * q > 0.5 * fs:
        raise AliasingError(
            f"bandwidth {bw} kHz with decimation {q} aliases at sample rate {fs} kHz"
        )
    x: np.ndarray = np.atleast_2d(np.asarray(samples))
    t: np.ndarray = dt * np.arange(x.shape[-1])
    mixed: np.ndarray = x * np.exp(-2j * math.pi * lo * t)
    taps: np.ndarray = lowpass_taps(fs, bw)
    filtered: np.ndarray = signal.fftconvolve(mixed, taps[None, :], mode="same", axes=-1)
    return filtered[:, ::q], q


def demodulate(
    record: MeasurementRecord,
    lo: float,
    bw: float,
    decimation: int | None = None,
) -> DemodulatedRecord:
    """lock-in demodulation of every repeat of `record` at `lo` kHz with cutoff `bw` kHz

    # Raises:
    - `AliasingError` : `lo` at or above Nyquist, or `bw * decimation` above it
    """
    baseband, q = demodulate_samples(record.samples, record.dt, lo, bw, decimation)
    return DemodulatedRecord(
        baseband=baseband,
        lo_frequency=lo,
        filter_bandwidth=bw,
        decimation=q,
        dt=record.dt * q,
    )


# spectral estimation
# ==============================


def periodogram(
    rows: np.ndarray,
    fs: float,
    window: str = "hann",
    nperseg: int | None = None,
    lo: float = 0.0,
) -> Periodogram:
    """Welch periodogram averaged over the rows, density scaling, per kHz

    complex rows give a two-sided spectrum shifted to be increasing and offset by `lo`
    """
    x: np.ndarray = np.atleast_2d(rows)
    n: int = x.shape[-1]
    seg: int = n if nperseg is None else min(nperseg, n)
    is_complex: bool = bool(np.iscomplexobj(x))
    freq, pxx = signal.welch(
        x,
        fs=fs,
        window=window,
        nperseg=seg,
        noverlap=seg // 2,
        detrend=False,
        return_onesided=not is_complex,
        scaling="density",
        axis=-1,
    )
    psd: np.ndarray = pxx.mean(axis=0)
    if is_complex:
        freq = np.fft.fftshift(freq)
        psd = np.fft.fftshift(psd)
    return Periodogram(freq_khz=freq + lo, psd=psd, resolution_bandwidth=fs / seg)


def average_periodograms(periodograms: Sequence[Periodogram]) -> SpectrumEstimate:
    """order-independent mean of per-record periodograms on a common grid"""
    if len(periodograms) < 2:
        raise InvalidParameterError(f"need at least 2 records to average, got {len(periodograms)}")
    grid: np.ndarray = periodograms[0].freq_khz
    for p in periodograms[1:]:
        if p.freq_khz.shape != grid.shape or not np.allclose(p.freq_khz, grid):
            raise SpectrumGridError("records were demodulated onto different frequency grids")
    return SpectrumEstimate(
        freq_khz=grid,
        psd=np.mean([p.psd for p in periodograms], axis=0),
        n_averages=len(periodograms),
        resolution_bandwidth=periodograms[0].resolution_bandwidth,
    )


def estimate_psd(
    records: DemodulatedRecord | Sequence[DemodulatedRecord],
    window: str = "hann",
    n_avg: int | None = None,
    nperseg: int | None = None,
) -> SpectrumEstimate:
    """averaged PSD over the repeats (rows) of one or more demodulated records

    normalized so that the integral over frequency equals the mean record
    variance; `n_avg` limits the number of rows used

    # Raises:
    - `SpectrumGridError` : records with different rate, length or LO
    """
    group: list[DemodulatedRecord] = [records] if isinstance(records, DemodulatedRecord) else list(records)
    if not group:
        raise InvalidParameterError("no records to estimate a spectrum from")
    first: DemodulatedRecord = group[0]
    for rec in group[1:]:
        if (
            not math.isclose(rec.dt, first.dt)
            or rec.baseband.shape[-1] != first.baseband.shape[-1]
            or not math.isclose(rec.lo_frequency, first.lo_frequency)
        ):
            raise SpectrumGridError("records differ in sample rate, length or local oscillator")
    rows: np.ndarray = np.concatenate([np.atleast_2d(rec.baseband) for rec in group], axis=0)
    if n_avg is not None:
        rows = rows[:n_avg]
    if rows.shape[0] < 2:
        raise InvalidParameterError(f"need at least 2 records to average, got {rows.shape[0]}")
    pgram: Periodogram = periodogram(rows, first.fs, window=window, nperseg=nperseg, lo=first.lo_frequency)
    return SpectrumEstimate(
        freq_khz=pgram.freq_khz,
        psd=pgram.psd,
        n_averages=rows.shape[0],
        resolution_bandwidth=pgram.resolution_bandwidth,
    )


@dataclass(frozen=True)
class PeriodogramReducer:
    """demodulate one repeat inside a worker and keep only its periodogram"""

    lo: float  # kHz
    bw: float  # kHz
    segment_ms: float | None = None
    window: str = "hann"

    def __call__(self, repeat: RepeatOutput, setup: MeasurementSetup) -> Periodogram:
        baseband, q = demodulate_samples(repeat.x_out, setup.dt, self.lo, self.bw)
        dt_out: float = setup.dt * q
        nperseg: int | None = (
            None if self.segment_ms is None else max(2, int(round(self.segment_ms / dt_out)))
        )
        return periodogram(baseband, 1.0 / dt_out, window=self.window, nperseg=nperseg, lo=self.lo)


def crop(est: SpectrumEstimate, f_min: float, f_max: float) -> SpectrumEstimate:
    keep: np.ndarray = (est.freq_khz >= f_min) & (est.freq_khz <= f_max)
    return replace(
        est,
        freq_khz=est.freq_khz[keep],
        psd=est.psd[keep],
        psd_db=None if est.psd_db is None else est.psd_db[keep],
    )


# levels relative to shot noise
# ==============================


def shot_reference(est: SpectrumEstimate, center_khz: float | None = None, halfwidth_khz: float | None = None) -> float:
    """flat level of a shot-noise-only spectrum, the mean over the central half of its span"""
    center: float = float(np.mean(est.freq_khz[[0, -1]])) if center_khz is None else center_khz
    half: float = (
        0.25 * float(est.freq_khz[-1] - est.freq_khz[0]) if halfwidth_khz is None else halfwidth_khz
    )
    band: np.ndarray = np.abs(est.freq_khz - center) <= half
    return float(np.mean(est.psd[band] if band.any() else est.psd))


def to_db_rel_shot(est: SpectrumEstimate, shot_reference: float) -> SpectrumEstimate:
    """attach 10 log10(psd / shot_reference)"""
    if not shot_reference > 0:
        raise InvalidParameterError(f"shot reference must be positive, got {shot_reference!r}")
    with np.errstate(divide="ignore"):
        psd_db: np.ndarray = 10.0 * np.log10(est.psd / shot_reference)
    return replace(est, psd_db=psd_db, shot_reference=shot_reference)


# spectral features
# ==============================


def background_level(
    est: SpectrumEstimate,
    center_khz: float,
    offset_khz: float = 20.0,
    halfwidth_khz: float = 2.0,
) -> float:
    """mean linear PSD in a window of +-`halfwidth_khz` around `center_khz + offset_khz`"""
    target: float = center_khz + offset_khz
    if not est.freq_khz[0] <= target <= est.freq_khz[-1]:
        raise InvalidParameterError(
            f"background frequency {target} kHz lies outside the spectrum [{est.freq_khz[0]}, {est.freq_khz[-1]}] kHz"
        )
    band: np.ndarray = np.abs(est.freq_khz - target) <= halfwidth_khz
    if not band.any():
        return float(est.psd[np.argmin(np.abs(est.freq_khz - target))])
    return float(np.mean(est.psd[band]))


def _lorentzian(f: np.ndarray, center: float, hwhm: float, amplitude: float, floor: float) -> np.ndarray:
    return floor + amplitude / (1.0 + ((f - center) / hwhm) ** 2)


def fit_lorentzian(
    est: SpectrumEstimate,
    center_khz: float,
    window_khz: float | None = None,
) -> LorentzianFit:
    """least-squares Lorentzian line on a flat floor, fitted within +-`window_khz` of `center_khz`"""
    window: float = 0.5 * float(est.freq_khz[-1] - est.freq_khz[0]) if window_khz is None else window_khz
    sel: np.ndarray = np.abs(est.freq_khz - center_khz) <= window
    f: np.ndarray = est.freq_khz[sel]
    y: np.ndarray = est.psd[sel]
    if f.size < 5:
        raise NumericalError(f"only {f.size} spectral bins in the fit window, need at least 5")
    floor0: float = float(np.median(y))
    amp0: float = max(float(np.max(y)) - floor0, 1e-12 * max(floor0, 1e-300))
    hwhm0: float = max(2.0 * est.df, 1e-9)
    try:
        popt, _ = curve_fit(
            _lorentzian,
            f,
            y,
            p0=(center_khz, hwhm0, amp0, floor0),
            bounds=(
                (center_khz - window, 1e-9, 0.0, 0.0),
                (center_khz + window, np.inf, np.inf, np.inf),
            ),
            maxfev=20_000,
        )
    except RuntimeError as e:
        raise NumericalError(f"Lorentzian fit around {center_khz} kHz did not converge: {e}") from e
    model: np.ndarray = _lorentzian(f, *popt)
    residual: float = float(np.linalg.norm(y - model) / np.linalg.norm(y))
    return LorentzianFit(
        center_khz=float(popt[0]),
        hwhm_khz=float(popt[1]),
        amplitude=float(popt[2]),
        floor=float(popt[3]),
        residual=residual,
    )


def peak_area(
    est: SpectrumEstimate,
    center_khz: float,
    hwhm_khz: float,
    background: float,
    n_linewidths: float = 3.0,
) -> float:
    """integrated PSD above `background` within +-`n_linewidths` HWHM (at least one bin) of the line"""
    half: float = max(n_linewidths * hwhm_khz, est.df)
    sel: np.ndarray = np.abs(est.freq_khz - center_khz) <= half
    return float(np.sum(est.psd[sel] - background) * est.df)


def summarize_spectrum(
    est: SpectrumEstimate,
    center_khz: float,
    offset_khz: float,
    halfwidth_khz: float,
) -> dict[str, Any]:
    """background at the fixed offset, Lorentzian line fit and narrow-peak area"""
    background: float = background_level(est, center_khz, offset_khz, halfwidth_khz)
    summary: dict[str, Any] = {
        "background_offset_khz": offset_khz,
        "background_linear": background,
    }
    if est.shot_reference is not None:
        summary["background_db"] = 10.0 * math.log10(background / est.shot_reference)
    try:
        fit: LorentzianFit = fit_lorentzian(est, center_khz, window_khz=max(offset_khz, 4 * est.df))
    except NumericalError as e:
        logger.warning(f"no Lorentzian fit at {center_khz} kHz: {e}")
        return summary
    summary.update(
        {
            "line_center_khz": fit.center_khz,
            "line_hwhm_khz": fit.hwhm_khz,
            "line_fit_residual": fit.residual,
            "peak_area": peak_area(est, center_khz, fit.hwhm_khz, background),
        }
    )
    return summary
