"""CSV and JSON artifacts: spectra, squeezing results, records and trajectories

Nothing time- or host-dependent is written, so identical runs give
byte-identical files. Every file carries the hash of the config that made it.
"""

import json
import re
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from transit_squeeze._exceptions import OutputMismatchError
from transit_squeeze.dynamics import MeasurementRecord
from transit_squeeze.spectra import SpectrumEstimate


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__} to JSON")


def write_json(path: Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, indent=2, sort_keys=True, default=_to_builtin) + "\n",
        encoding="utf-8",
    )
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def point_slug(labels: dict[str, Any]) -> str:
    """file-name stem for one sweep point, e.g. `larmor=500.0_beam_diameter=0.6`"""
    if not labels:
        return "base"
    raw: str = "_".join(f"{axis}={value}" for axis, value in labels.items())
    return re.sub(r"[^A-Za-z0-9_.=+-]", "-", raw)


def check_hash(metadata: dict[str, Any], expected: str, source: Path) -> None:
    found: Any = metadata.get("config_hash")
    if found != expected:
        raise OutputMismatchError(
            f"{source} was produced by config {found!r}, the active config is {expected!r}"
        )


# spectra
# ==============================


def write_spectrum(
    est: SpectrumEstimate,
    directory: Path,
    labels: dict[str, Any],
    metadata: dict[str, Any],
) -> Path:
    """`spectrum_<point>.csv` (freq_khz, psd_linear, psd_db, one column per sweep axis) plus a JSON sidecar"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem: str = f"spectrum_{point_slug(labels)}"
    frame: pd.DataFrame = pd.DataFrame(
        {
            "freq_khz": est.freq_khz,
            "psd_linear": est.psd,
            "psd_db": est.psd_db if est.psd_db is not None else np.full(est.psd.shape, np.nan),
        }
    )
    for axis, value in labels.items():
        frame[axis] = value
    csv_path: Path = directory / f"{stem}.csv"
    frame.to_csv(csv_path, index=False)
    write_json(
        directory / f"{stem}.json",
        {
            **metadata,
            "labels": labels,
            "n_avg": est.n_averages,
            "rbw_khz": est.resolution_bandwidth,
            "shot_reference": est.shot_reference,
        },
    )
    return csv_path


def read_spectrum(
    directory: Path,
    labels: dict[str, Any],
    expected_hash: str,
) -> tuple[SpectrumEstimate, dict[str, Any]]:
    """load a spectrum written by `write_spectrum`, rejecting it if its config hash differs"""
    stem: str = f"spectrum_{point_slug(labels)}"
    csv_path: Path = Path(directory) / f"{stem}.csv"
    json_path: Path = Path(directory) / f"{stem}.json"
    if not csv_path.exists() or not json_path.exists():
        raise OutputMismatchError(f"no spectrum output {csv_path} for sweep point {labels}")
    metadata: dict[str, Any] = read_json(json_path)
    check_hash(metadata, expected_hash, json_path)
    frame: pd.DataFrame = pd.read_csv(csv_path)
    psd_db: np.ndarray = frame["psd_db"].to_numpy(dtype=float)
    est: SpectrumEstimate = SpectrumEstimate(
        freq_khz=frame["freq_khz"].to_numpy(dtype=float),
        psd=frame["psd_linear"].to_numpy(dtype=float),
        n_averages=int(metadata["n_avg"]),
        resolution_bandwidth=float(metadata["rbw_khz"]),
        psd_db=None if np.all(np.isnan(psd_db)) else psd_db,
        shot_reference=metadata.get("shot_reference"),
    )
    return est, metadata


# tables
# ==============================


def write_table(rows: list[dict[str, Any]], path: Path) -> Path:
    """one CSV row per sweep point"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


# raw records
# ==============================


def write_record(record: MeasurementRecord, directory: Path, stem: str = "record") -> list[Path]:
    """one CSV per repeat (t_ms, x_out) and a JSON sidecar with metadata and ground truth"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    times: np.ndarray = record.times
    paths: list[Path] = []
    for j in range(record.n_repeats):
        path: Path = directory / f"{stem}_{j:05d}.csv"
        pd.DataFrame({"t_ms": times, "x_out": record.samples[j]}).to_csv(path, index=False)
        paths.append(path)
    paths.append(
        write_json(
            directory / f"{stem}.json",
            {
                **record.metadata,
                "dt_ms": record.dt,
                "larmor_rad_per_ms": record.larmor,
                "n_repeats": record.n_repeats,
                "truth_times_ms": record.truth_times,
                "truth_x": record.truth_x,
                "truth_p": record.truth_p,
            },
        )
    )
    return paths
