"""The `simulate` command line: argument resolution and exit codes."""

from pathlib import Path

import pytest

from tests.conftest import SMALL_CONFIG
from transit_squeeze import commands
from transit_squeeze._exceptions import ConfigValidationError
from transit_squeeze.batch import STREAM_MAIN
from transit_squeeze.cli import (
    ENV_SEED,
    ENV_WORKERS,
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    build_parser,
    main,
    resolve_run,
)


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)
    monkeypatch.delenv(ENV_WORKERS, raising=False)


def _resolve(*argv: str):
    return resolve_run(build_parser().parse_args(list(argv)))


class TestResolveRun:
    """Test precedence of flags, environment and file."""

    def test_file_values(self, config_file, tmp_path):
        """Test that the file seed and defaults are used without flags."""
        cfg, opts = _resolve("spectrum", "--config", str(config_file), "--out", str(tmp_path))
        assert opts.seed == 11
        assert opts.workers == 1
        assert opts.out_dir == tmp_path

    def test_out_defaults_to_config(self, config_file):
        """Test that the output directory comes from output.dir."""
        _, opts = _resolve("spectrum", "--config", str(config_file))
        assert opts.out_dir == Path("results")

    def test_env_over_file(self, config_file, monkeypatch):
        """Test that the environment beats the file."""
        monkeypatch.setenv(ENV_SEED, "5")
        monkeypatch.setenv(ENV_WORKERS, "2")
        cfg, opts = _resolve("spectrum", "--config", str(config_file))
        assert cfg.seed == 5
        assert opts.seed == 5
        assert opts.workers == 2

    def test_flag_over_env(self, config_file, monkeypatch):
        """Test that flags beat the environment."""
        monkeypatch.setenv(ENV_SEED, "5")
        monkeypatch.setenv(ENV_WORKERS, "2")
        _, opts = _resolve("spectrum", "--config", str(config_file), "--seed", "9", "--workers", "3")
        assert opts.seed == 9
        assert opts.workers == 3

    def test_bad_env(self, config_file, monkeypatch):
        """Test that a non-integer environment value names the variable."""
        monkeypatch.setenv(ENV_WORKERS, "many")
        with pytest.raises(ConfigValidationError) as exc_info:
            _resolve("spectrum", "--config", str(config_file))
        assert exc_info.value.key == ENV_WORKERS

    def test_zero_workers(self, config_file, monkeypatch):
        """Test that zero workers from the environment is rejected."""
        monkeypatch.setenv(ENV_WORKERS, "0")
        with pytest.raises(ConfigValidationError):
            _resolve("spectrum", "--config", str(config_file))

    def test_sweep_flag(self, config_file):
        """Test that --sweep adds an axis."""
        cfg, _ = _resolve("squeezing", "--config", str(config_file), "--sweep", "larmor=30,100")
        assert cfg.sweep == (("larmor", (30.0, 100.0)),)

    def test_profile(self):
        """Test loading a bundled profile."""
        cfg, opts = _resolve("squeezing", "--profile", "fig5")
        assert cfg.seed == 5
        assert opts.out_dir == Path("results/fig5")

    def test_quiet_disables_progress(self, config_file):
        """Test that --quiet turns the progress bars off."""
        _, opts = _resolve("spectrum", "--config", str(config_file), "--quiet")
        assert not opts.progress

    def test_config_or_profile_required(self):
        """Test that a run needs a config source."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["spectrum"])


class TestExitCodes:
    """Test the process exit codes."""

    def test_success(self, config_file, tmp_path):
        """Test a small spectrum run."""
        out = tmp_path / "out"
        assert main(["spectrum", "--config", str(config_file), "--out", str(out), "--quiet"]) == EXIT_OK
        assert (out / "spectrum_base.csv").exists()

    def test_missing_config(self, tmp_path):
        """Test that an unreadable config exits with 2."""
        assert main(["spectrum", "--config", str(tmp_path / "none.cfg"), "--quiet"]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path, capsys):
        """Test that a validation error exits with 2 and names the key."""
        path = tmp_path / "bad.cfg"
        path.write_text(SMALL_CONFIG.replace("cell.temperature_c = 58.0\n", ""), encoding="utf-8")
        assert main(["spectrum", "--config", str(path), "--quiet"]) == EXIT_CONFIG
        assert "cell.temperature_c" in capsys.readouterr().err

    def test_bad_sweep(self, config_file):
        """Test that a malformed sweep exits with 2."""
        assert main(["spectrum", "--config", str(config_file), "--sweep", "width=1", "--quiet"]) == EXIT_CONFIG

    def test_invalid_parameter(self, tmp_path):
        """Test that bins outnumbering samples exit with 2."""
        path = tmp_path / "bins.cfg"
        path.write_text(SMALL_CONFIG.replace("analysis.bins = 4", "analysis.bins = 1000"), encoding="utf-8")
        assert main(["spectrum", "--config", str(path), "--out", str(tmp_path), "--quiet"]) == EXIT_CONFIG

    def test_step_too_coarse(self, tmp_path):
        """Test that an under-resolved Larmor period exits with 3."""
        path = tmp_path / "coarse.cfg"
        path.write_text(SMALL_CONFIG + "dynamics.dt_us = 5.0\n", encoding="utf-8")
        assert main(["spectrum", "--config", str(path), "--out", str(tmp_path), "--quiet"]) == EXIT_NUMERICAL

    def test_summarize_without_outputs(self, config_file, tmp_path):
        """Test that summarizing missing spectra exits with 3."""
        assert main(["summarize", "--config", str(config_file), "--out", str(tmp_path), "--quiet"]) == EXIT_NUMERICAL

    def test_calibrate(self, config_file, tmp_path, monkeypatch):
        """Test that a confirmed calibration exits with 0."""
        monkeypatch.setattr(
            commands, "measure_kappa2_t2", lambda cfg, opts, stream: 0.02 / (cfg.cell.wall_reset_probability + 0.005)
        )
        assert main(["calibrate", "--config", str(config_file), "--out", str(tmp_path), "--quiet"]) == EXIT_OK
        assert (tmp_path / "calibrated.cfg").exists()

    def test_calibrate_held_out_miss(self, config_file, tmp_path, monkeypatch, capsys):
        """Test that a held-out kappa^2 T2 off target exits with 3 after writing the report."""

        def kappa2_t2(cfg, opts, stream):
            if stream != STREAM_MAIN:
                return 3.0
            return 0.02 / (cfg.cell.wall_reset_probability + 0.005)

        monkeypatch.setattr(commands, "measure_kappa2_t2", kappa2_t2)
        assert main(["calibrate", "--config", str(config_file), "--out", str(tmp_path), "--quiet"]) == EXIT_NUMERICAL
        assert "CalibrationError" in capsys.readouterr().err
        assert (tmp_path / "calibration.json").exists()
