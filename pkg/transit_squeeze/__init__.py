from transit_squeeze.config import RunConfig, load_config, load_profile, parse_config
from transit_squeeze.dynamics import MeasurementRecord, MeasurementSetup, run_measurement
from transit_squeeze.spectra import SpectrumEstimate, demodulate, estimate_psd
from transit_squeeze.squeezing import SqueezingResult, estimate_conditional, squeezing_db

__all__ = [
    "RunConfig",
    "load_config",
    "load_profile",
    "parse_config",
    "MeasurementRecord",
    "MeasurementSetup",
    "run_measurement",
    "SpectrumEstimate",
    "demodulate",
    "estimate_psd",
    "SqueezingResult",
    "estimate_conditional",
    "squeezing_db",
]
