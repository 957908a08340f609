import pytest

from transit_squeeze.config import RunConfig, parse_config

# a few atoms, a few repeats and a 0.2 ms record: seconds per command
SMALL_CONFIG: str = """
seed = 11
cell.temperature_c = 58.0
cell.side_mm = 3.0
beam.diameter_mm = 1.0
coupling.kappa_target = 1.61
dynamics.larmor_khz = 100.0
dynamics.duration_ms = 0.2
dynamics.n_sim = 5
dynamics.n_repeats = 12
analysis.bins = 4
analysis.n_batches = 2
"""


@pytest.fixture
def small_config() -> RunConfig:
    return parse_config(SMALL_CONFIG)
