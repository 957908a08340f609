"""run configuration: parsing, validation, hashing, overrides and sweeps

The config format is the dotted-key subset of TOML, one `key = value` per line:

    cell.temperature_c = 58.0
    cell.side_mm = 3.0
    beam.diameter_mm = 0.6
    dynamics.larmor_khz = 500.0
    sweep.beam_diameter = [0.6, 1.0, 2.0]

Unknown keys, missing required keys and out-of-range values are errors that
name the offending dotted key. Repeated keys, `[table]` headers and inline
tables are parse errors carrying the line number.
"""

import dataclasses
import hashlib
import itertools
import json
import math
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from transit_squeeze._constants import (
    AREA_REFERENCE,
    ATOM_NUMBER_REFERENCE,
    CSS_VARIANCE,
    DUTY_CYCLE_REFERENCE,
    KAPPA2_T2_REFERENCE,
    THERMAL_VARIANCE_RATIO,
    ZERO_CELSIUS,
)
from transit_squeeze._exceptions import ConfigError, ConfigParseError, ConfigValidationError
from transit_squeeze._paths import get_profile_path

SweepAxis = Literal["beam_diameter", "larmor", "kappa", "beam_shape", "n_averages"]

SWEEP_KEYS: dict[str, str] = {
    "beam_diameter": "beam.diameter_mm",
    "larmor": "dynamics.larmor_khz",
    "kappa": "coupling.kappa_target",
    "beam_shape": "beam.shape",
    "n_averages": "dynamics.n_repeats",
}

# left out of the config hash: they do not change what is simulated
_UNHASHED_KEYS: tuple[str, ...] = ("seed", "output", "sweep")

_TOML_LINE: re.Pattern[str] = re.compile(r"at line (\d+)")
_TABLE_HEADER: re.Pattern[str] = re.compile(r"^\s*\[+\s*[A-Za-z_\"'][^\]]*\]+\s*(#.*)?$")
_INLINE_TABLE: re.Pattern[str] = re.compile(r"=\s*\{")


def _check(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigValidationError(key, message)


# sections
# ==============================


@dataclass(frozen=True)
class CellConfig:
    temperature_c: float
    radius_mm: float | None = None
    side_mm: float | None = None
    wall_reset_probability: float = 0.0

    def __post_init__(self) -> None:
        _check(self.temperature_c > -ZERO_CELSIUS, "cell.temperature_c", "must be above absolute zero")
        _check(
            (self.radius_mm is None) != (self.side_mm is None),
            "cell.radius_mm",
            "set exactly one of cell.radius_mm and cell.side_mm",
        )
        if self.radius_mm is not None:
            _check(self.radius_mm > 0, "cell.radius_mm", "must be positive")
        if self.side_mm is not None:
            _check(self.side_mm > 0, "cell.side_mm", "must be positive")
        _check(
            0.0 <= self.wall_reset_probability <= 1.0,
            "cell.wall_reset_probability",
            "must lie in [0, 1]",
        )

    @property
    def radius(self) -> float:
        """circular radius in mm; a square side is mapped to the circle of equal area"""
        if self.radius_mm is not None:
            return self.radius_mm
        assert self.side_mm is not None
        return self.side_mm / math.sqrt(math.pi)


@dataclass(frozen=True)
class BeamConfig:
    diameter_mm: float
    shape: Literal["gaussian", "tophat"] = "gaussian"
    center_x_mm: float = 0.0
    center_y_mm: float = 0.0

    def __post_init__(self) -> None:
        _check(self.diameter_mm > 0, "beam.diameter_mm", "must be positive")


@dataclass(frozen=True)
class ProbeConfig:
    peak_power_mw: float = 5.0
    duty_cycle: float = DUTY_CYCLE_REFERENCE
    detuning_ghz: float = -2.5
    area_mm2: float = AREA_REFERENCE * 1e6
    atom_number: float = ATOM_NUMBER_REFERENCE
    stroboscopic: bool = True

    def __post_init__(self) -> None:
        _check(self.peak_power_mw >= 0, "probe.peak_power_mw", "must be nonnegative")
        _check(0 < self.duty_cycle <= 1, "probe.duty_cycle", "must lie in (0, 1]")
        _check(self.detuning_ghz != 0, "probe.detuning_ghz", "must be nonzero")
        _check(self.area_mm2 > 0, "probe.area_mm2", "must be positive")
        _check(self.atom_number > 0, "probe.atom_number", "must be positive")


@dataclass(frozen=True)
class CouplingConfig:
    kappa_target: float | None = None
    normalization: Literal["mean", "variance"] = "mean"

    def __post_init__(self) -> None:
        if self.kappa_target is not None:
            _check(self.kappa_target >= 0, "coupling.kappa_target", "must be nonnegative")


@dataclass(frozen=True)
class DynamicsConfig:
    larmor_khz: float
    dt_us: float | None = None
    duration_ms: float = 1.0
    n_sim: int = 1000
    n_repeats: int = 2500
    gamma_background: float = 0.0  # ms^-1
    gamma_probe: float = 0.0  # ms^-1, averaged over the cell and the strobe
    langevin_variance: float = CSS_VARIANCE
    stationary_atoms: bool = False
    initial_state: Literal["css", "thermal"] = "css"
    thermal_variance_ratio: float = THERMAL_VARIANCE_RATIO

    def __post_init__(self) -> None:
        _check(self.larmor_khz >= 0, "dynamics.larmor_khz", "must be nonnegative")
        if self.dt_us is not None:
            _check(self.dt_us > 0, "dynamics.dt_us", "must be positive")
        _check(self.duration_ms > 0, "dynamics.duration_ms", "must be positive")
        _check(self.n_sim >= 1, "dynamics.n_sim", "must be at least 1")
        _check(self.n_repeats >= 2, "dynamics.n_repeats", "must be at least 2")
        _check(self.gamma_background >= 0, "dynamics.gamma_background", "must be nonnegative")
        _check(self.gamma_probe >= 0, "dynamics.gamma_probe", "must be nonnegative")
        _check(self.langevin_variance >= 0, "dynamics.langevin_variance", "must be nonnegative")
        _check(self.thermal_variance_ratio > 0, "dynamics.thermal_variance_ratio", "must be positive")


@dataclass(frozen=True)
class AnalysisConfig:
    bins: int = 100
    estimator: Literal["prediction", "retrodiction"] = "retrodiction"
    target: Literal["midpoint", "final"] = "midpoint"
    pnl_mode: Literal["theory_stationary", "experiment_45"] = "theory_stationary"
    dof_correction: bool = True
    n_batches: int = 5
    spectrum_span_khz: float = 200.0
    segment_ms: float | None = None
    background_offset_khz: float = 20.0
    background_halfwidth_khz: float = 2.0
    kappa2_t2_target: float = KAPPA2_T2_REFERENCE
    # relative, tighter than the absolute held-out tolerance at the reference target
    calibration_tolerance: float = 0.005
    calibration_max_iter: int = 30
    calibration_upper: float = 1.0
    calibration_held_out_tolerance: float = 0.02
    calibrate_wall_reset: bool = False

    def __post_init__(self) -> None:
        _check(self.bins >= 2, "analysis.bins", "must be at least 2")
        _check(self.n_batches >= 1, "analysis.n_batches", "must be at least 1")
        _check(self.spectrum_span_khz > 0, "analysis.spectrum_span_khz", "must be positive")
        if self.segment_ms is not None:
            _check(self.segment_ms > 0, "analysis.segment_ms", "must be positive")
        _check(self.background_halfwidth_khz > 0, "analysis.background_halfwidth_khz", "must be positive")
        _check(self.kappa2_t2_target > 0, "analysis.kappa2_t2_target", "must be positive")
        _check(0 < self.calibration_tolerance < 1, "analysis.calibration_tolerance", "must lie in (0, 1)")
        _check(self.calibration_max_iter >= 1, "analysis.calibration_max_iter", "must be at least 1")
        _check(0 < self.calibration_upper <= 1, "analysis.calibration_upper", "must lie in (0, 1]")
        _check(
            self.calibration_held_out_tolerance > 0, "analysis.calibration_held_out_tolerance", "must be positive"
        )


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "results"
    dump_records: bool = False
    trajectories: int = 0

    def __post_init__(self) -> None:
        _check(self.trajectories >= 0, "output.trajectories", "must be nonnegative")


_SECTIONS: dict[str, type] = {
    "cell": CellConfig,
    "beam": BeamConfig,
    "probe": ProbeConfig,
    "coupling": CouplingConfig,
    "dynamics": DynamicsConfig,
    "analysis": AnalysisConfig,
    "output": OutputConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """validated configuration of one run; `sweep` holds (axis, values) pairs in file order"""

    cell: CellConfig
    beam: BeamConfig
    dynamics: DynamicsConfig
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    sweep: tuple[tuple[str, tuple[Any, ...]], ...] = ()


@dataclass(frozen=True)
class SweepSpec:
    """one sweep axis over a base config"""

    axis: SweepAxis
    values: tuple[Any, ...]
    base: RunConfig

    def __post_init__(self) -> None:
        _check(self.axis in SWEEP_KEYS, "sweep", f"unknown axis {self.axis!r}, expected one of {tuple(SWEEP_KEYS)}")
        _check(len(self.values) > 0, f"sweep.{self.axis}", "needs at least one value")

    @property
    def key(self) -> str:
        return SWEEP_KEYS[self.axis]

    def configs(self) -> list[tuple[Any, RunConfig]]:
        return [(value, apply_overrides(self.base, {self.key: value})) for value in self.values]


# value coercion
# ==============================


def _coerce(key: str, value: Any, expected: Any) -> Any:
    origin: Any = typing.get_origin(expected)
    if origin in (typing.Union, types.UnionType):
        args: tuple[Any, ...] = typing.get_args(expected)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner)
    if origin is Literal:
        allowed: tuple[Any, ...] = typing.get_args(expected)
        _check(value in allowed, key, f"expected one of {allowed}, got {value!r}")
        return value
    if expected is bool:
        _check(isinstance(value, bool), key, f"expected true or false, got {value!r}")
        return value
    if expected is int:
        _check(isinstance(value, int) and not isinstance(value, bool), key, f"expected an integer, got {value!r}")
        return value
    if expected is float:
        _check(
            isinstance(value, (int, float)) and not isinstance(value, bool),
            key,
            f"expected a number, got {value!r}",
        )
        return float(value)
    if expected is str:
        _check(isinstance(value, str), key, f"expected a string, got {value!r}")
        return value
    raise ConfigValidationError(key, f"unsupported type {expected!r}")


def _build_section(name: str, cls: type, values: dict[str, Any]) -> Any:
    hints: dict[str, Any] = typing.get_type_hints(cls)
    known: dict[str, dataclasses.Field[Any]] = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        _check(key in known, f"{name}.{key}", "unknown key")
    kwargs: dict[str, Any] = {}
    for f in known.values():
        dotted: str = f"{name}.{f.name}"
        if f.name in values:
            kwargs[f.name] = _coerce(dotted, values[f.name], hints[f.name])
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigValidationError(dotted, "required key is missing")
    return cls(**kwargs)


def _sweep_values(axis: str, raw: Any) -> tuple[Any, ...]:
    key: str = f"sweep.{axis}"
    _check(axis in SWEEP_KEYS, key, f"unknown sweep axis, expected one of {tuple(SWEEP_KEYS)}")
    _check(isinstance(raw, (list, tuple)) and len(raw) > 0, key, "expected a nonempty list")
    section, field_name = SWEEP_KEYS[axis].split(".")
    expected: Any = typing.get_type_hints(_SECTIONS[section])[field_name]
    return tuple(_coerce(key, v, expected) for v in raw)


def build_config(tree: dict[str, Any]) -> RunConfig:
    """validated `RunConfig` from a nested dict such as the one `tomllib` produces"""
    for key, value in tree.items():
        if key in ("seed", "sweep"):
            continue
        _check(key in _SECTIONS, key, "unknown key")
        _check(isinstance(value, dict), key, "expected a section of dotted keys")

    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in tree or cls in (CellConfig, BeamConfig, DynamicsConfig):
            sections[name] = _build_section(name, cls, tree.get(name, {}))

    seed: int = _coerce("seed", tree.get("seed", 0), int)
    raw_sweep: Any = tree.get("sweep", {})
    _check(isinstance(raw_sweep, dict), "sweep", "expected a section of dotted keys")
    sweep: tuple[tuple[str, tuple[Any, ...]], ...] = tuple(
        (axis, _sweep_values(axis, raw)) for axis, raw in raw_sweep.items()
    )
    return RunConfig(**sections, seed=seed, sweep=sweep)


def parse_config(text: str) -> RunConfig:
    """parse and validate config text

    # Raises:
    - `ConfigParseError` : malformed text, a repeated key, a `[table]` header or an
      inline table, with its line number
    - `ConfigValidationError` : unknown, missing or out-of-range keys, naming the key
    """
    try:
        tree: dict[str, Any] = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match: re.Match[str] | None = _TOML_LINE.search(str(e))
        raise ConfigParseError(str(e), line=int(match.group(1)) if match else None) from e
    for number, line in enumerate(text.splitlines(), start=1):
        if _TABLE_HEADER.match(line):
            raise ConfigParseError("table headers are not supported, use dotted keys", line=number)
        if _INLINE_TABLE.search(line.split("#", 1)[0]):
            raise ConfigParseError("inline tables are not supported, use dotted keys", line=number)
    return build_config(tree)


def load_config(path: Path | str) -> RunConfig:
    try:
        text: str = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def load_profile(name: str) -> RunConfig:
    """load one of the reproduction profiles shipped with the package, e.g. `"fig5"`"""
    return load_config(get_profile_path(name))


# writing, hashing, overrides
# ==============================


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return repr(value)


def config_tree(cfg: RunConfig) -> dict[str, Any]:
    """nested plain-dict view of a config (None values dropped)"""
    tree: dict[str, Any] = {}
    for name in _SECTIONS:
        section: dict[str, Any] = {
            k: v for k, v in dataclasses.asdict(getattr(cfg, name)).items() if v is not None
        }
        tree[name] = section
    tree["seed"] = cfg.seed
    if cfg.sweep:
        tree["sweep"] = {axis: list(values) for axis, values in cfg.sweep}
    return tree


def format_config(cfg: RunConfig) -> str:
    """write a config back out in the dotted-key format `parse_config` reads"""
    tree: dict[str, Any] = config_tree(cfg)
    lines: list[str] = [f"seed = {cfg.seed}"]
    for name in (*_SECTIONS, "sweep"):
        for key, value in tree.get(name, {}).items():
            lines.append(f"{name}.{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """first 12 hex digits of the SHA-1 of the physical and analysis keys, key order independent"""
    tree: dict[str, Any] = {k: v for k, v in config_tree(cfg).items() if k not in _UNHASHED_KEYS}
    payload: str = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """new config with dotted keys replaced, re-validated"""
    tree: dict[str, Any] = config_tree(cfg)
    for dotted, value in overrides.items():
        if dotted == "seed":
            tree["seed"] = value
            continue
        section, _, key = dotted.partition(".")
        _check(section in _SECTIONS and bool(key), dotted, "unknown key")
        # a cell is either round or square, never both
        if dotted == "cell.side_mm":
            tree["cell"].pop("radius_mm", None)
        elif dotted == "cell.radius_mm":
            tree["cell"].pop("side_mm", None)
        tree[section][key] = value
    return build_config(tree)


def parse_sweep(text: str, base: RunConfig) -> SweepSpec:
    """`axis=v1,v2,...` from the command line"""
    axis, sep, raw = text.partition("=")
    axis = axis.strip()
    _check(bool(sep) and bool(raw.strip()), "sweep", f"expected axis=v1,v2,..., got {text!r}")
    items: list[Any] = []
    for item in raw.split(","):
        item = item.strip()
        if axis == "beam_shape":
            items.append(item)
        elif axis == "n_averages":
            try:
                items.append(int(item))
            except ValueError as e:
                raise ConfigValidationError(f"sweep.{axis}", f"expected integers, got {item!r}") from e
        else:
            try:
                items.append(float(item))
            except ValueError as e:
                raise ConfigValidationError(f"sweep.{axis}", f"expected numbers, got {item!r}") from e
    return SweepSpec(axis=axis, values=_sweep_values(axis, items), base=base)  # type: ignore[arg-type]


def sweep_specs(cfg: RunConfig) -> list[SweepSpec]:
    return [SweepSpec(axis=axis, values=values, base=cfg) for axis, values in cfg.sweep]  # type: ignore[arg-type]


def with_sweeps(cfg: RunConfig, specs: list[SweepSpec]) -> RunConfig:
    """replace or add sweep axes (command-line sweeps win over the file's)"""
    merged: dict[str, tuple[Any, ...]] = dict(cfg.sweep)
    for spec in specs:
        merged[spec.axis] = spec.values
    return dataclasses.replace(cfg, sweep=tuple(merged.items()))


def sweep_points(cfg: RunConfig) -> list[tuple[dict[str, Any], RunConfig]]:
    """every combination of the configured sweep axes, as ({axis: value}, config); one point if no sweep"""
    if not cfg.sweep:
        return [({}, cfg)]
    axes: list[str] = [axis for axis, _ in cfg.sweep]
    points: list[tuple[dict[str, Any], RunConfig]] = []
    for combo in itertools.product(*(values for _, values in cfg.sweep)):
        labels: dict[str, Any] = dict(zip(axes, combo))
        point_cfg: RunConfig = apply_overrides(
            cfg, {SWEEP_KEYS[axis]: value for axis, value in labels.items()}
        )
        points.append((labels, dataclasses.replace(point_cfg, sweep=())))
    return points
