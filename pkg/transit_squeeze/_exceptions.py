class TransitSqueezeError(Exception):
    """Base class for all errors raised by transit-squeeze."""

    pass


class InvalidParameterError(TransitSqueezeError, ValueError):
    """Raised when a domain object is constructed with out-of-range values."""

    pass


# configuration
# ==============================


class ConfigError(TransitSqueezeError):
    """Raised for any problem with a run configuration. CLI exit code 2."""

    pass


class ConfigParseError(ConfigError):
    """Raised when the config text cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line: int | None = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigValidationError(ConfigError):
    """Raised when a parsed config is missing keys, has unknown keys, or has bad values."""

    def __init__(self, key: str, message: str):
        self.key: str = key
        super().__init__(f"{key}: {message}")


# numerics
# ==============================


class NumericalError(TransitSqueezeError):
    """Raised when a simulation or analysis step cannot be carried out. CLI exit code 3."""

    pass


class StepSizeError(NumericalError):
    """Raised when the integration step under-resolves the dynamics."""

    pass


class SingularDetuningError(NumericalError):
    """Raised when the probe detuning sits on a hyperfine pole of the vector coefficient."""

    pass


class CouplingDomainError(NumericalError):
    """Raised when coupling parameters make the effective coupling undefined."""

    pass


class AliasingError(NumericalError):
    """Raised when a demodulation setup would alias the band of interest."""

    pass


class SpectrumGridError(NumericalError):
    """Raised when records with different sampling grids are averaged together."""

    pass


class CalibrationError(NumericalError):
    """Raised when the wall-reset calibration cannot bracket its target."""

    pass


class MissingCalibrationError(NumericalError):
    """Raised when a PNL reference is requested without the calibration run it needs."""

    pass


class NotOnBoundaryError(NumericalError):
    """Raised when a wall reflection is requested for an atom that is not on the wall."""

    pass


class OutputMismatchError(TransitSqueezeError):
    """Raised when a stored output was produced by a different configuration."""

    pass
