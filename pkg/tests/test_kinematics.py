"""Atomic motion: sampling laws, wall hits and equilibrium."""

import dataclasses
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from transit_squeeze._constants import TEMPERATURE_REFERENCE
from transit_squeeze._exceptions import InvalidParameterError, NotOnBoundaryError
from transit_squeeze.kinematics import (
    AtomState,
    CellGeometry,
    advance_free_flight,
    flux_weighted_cdf,
    mb2d_cdf,
    propagate_ensemble,
    reflect_at_wall,
    sample_initial_position,
    sample_initial_velocity,
    sample_reflection_angle,
    sample_speed_flux_weighted,
    sample_speed_mb2d,
    simulate_trajectory,
    wall_crossing_time,
    wall_reset_probability_for,
    write_trajectory_csv,
)


@pytest.fixture
def geom() -> CellGeometry:
    return CellGeometry.from_square_cell(3.0, TEMPERATURE_REFERENCE)


class TestCellGeometry:
    """Test geometry construction and derived quantities."""

    def test_rejects_nonpositive_radius(self):
        """Test that a zero radius is rejected."""
        with pytest.raises(InvalidParameterError):
            CellGeometry(radius_cell=0.0, temperature=300.0)

    def test_rejects_reset_probability_outside_unit_interval(self):
        """Test that a reset probability above 1 is rejected."""
        with pytest.raises(InvalidParameterError):
            CellGeometry(radius_cell=1.0, temperature=300.0, wall_reset_probability=1.5)

    def test_square_cell_has_equal_area(self, geom):
        """Test that the equivalent circle has the area of the square."""
        assert math.pi * geom.radius_cell**2 == pytest.approx(9.0)

    def test_thermal_speed_scale(self, geom):
        """Test sigma = sqrt(kT/m) for rubidium at 58 C, about 178 m/s."""
        assert geom.sigma_speed == pytest.approx(178.0, rel=5e-3)
        assert geom.mean_speed == pytest.approx(geom.sigma_speed * math.sqrt(math.pi / 2))

    def test_mean_free_time(self, geom):
        """Test the mean time between wall hits."""
        assert geom.mean_free_time == pytest.approx(
            math.pi * geom.radius_cell / (2 * geom.mean_speed)
        )

    def test_reset_probability_for_reference_t2(self, geom):
        """Test the reset probability giving kappa^2 T2 = 2.26 at kappa = 1.61."""
        t2 = 2.26 / 1.61**2
        p = wall_reset_probability_for(geom, t2)
        assert p == pytest.approx(0.0137, abs=2e-4)
        assert p / geom.mean_free_time == pytest.approx(1 / t2)

    def test_reset_probability_capped(self, geom):
        """Test that a T2 shorter than one flight needs a reset on every hit."""
        assert wall_reset_probability_for(geom, geom.mean_free_time / 10) == 1.0
        with pytest.raises(InvalidParameterError):
            wall_reset_probability_for(geom, 0.0)


class TestSampling:
    """Test the sampling laws against their distributions."""

    def test_positions_fill_disk_uniformly(self, geom):
        """Test E[r^2] = R^2/2 and E[r] = 2R/3 for uniform points on the disk."""
        rng = np.random.default_rng(1)
        pts = sample_initial_position(geom, rng, 200_000)
        r = np.linalg.norm(pts, axis=1) / geom.radius_cell
        assert pts.shape == (200_000, 2)
        assert np.all(r <= 1.0)
        assert np.mean(r**2) == pytest.approx(0.5, abs=5e-3)
        assert np.mean(r) == pytest.approx(2 / 3, abs=5e-3)

    def test_single_position_shape(self, geom):
        """Test that size=None gives one 2-vector."""
        assert sample_initial_position(geom, np.random.default_rng(0)).shape == (2,)

    def test_mb2d_speeds_ks(self, geom):
        """Test 2D Maxwell-Boltzmann speeds with a KS test."""
        v = sample_speed_mb2d(geom, np.random.default_rng(2), 20_000)
        result = stats.kstest(v, lambda x: mb2d_cdf(x, geom.sigma_speed))
        assert result.pvalue > 0.01

    def test_flux_weighted_speeds_ks(self, geom):
        """Test flux-weighted wall speeds with a KS test."""
        v = sample_speed_flux_weighted(geom, np.random.default_rng(3), 20_000)
        result = stats.kstest(v, lambda x: flux_weighted_cdf(x, geom.sigma_speed))
        assert result.pvalue > 0.01

    def test_flux_weighted_mean_speed(self, geom):
        """Test E[v] = 2 sqrt(2/pi) sigma for the flux-weighted law."""
        v = sample_speed_flux_weighted(geom, np.random.default_rng(4), 200_000)
        assert np.mean(v) == pytest.approx(2 * math.sqrt(2 / math.pi) * geom.sigma_speed, rel=5e-3)

    def test_initial_velocity_isotropic(self, geom):
        """Test that initial velocities average to zero and have MB speeds."""
        vel = sample_initial_velocity(geom, np.random.default_rng(5), 100_000)
        assert vel.shape == (100_000, 2)
        assert np.abs(vel.mean(axis=0)).max() < 0.02 * geom.sigma_speed
        assert np.all(np.linalg.norm(vel, axis=1) > 0)

    def test_reflection_angle_mean(self):
        """Test E|eps| = pi/2 - 1 for the cosine law."""
        eps = sample_reflection_angle(np.random.default_rng(6), 200_000)
        assert np.all(np.abs(eps) < math.pi / 2)
        assert np.mean(np.abs(eps)) == pytest.approx(math.pi / 2 - 1, abs=5e-3)

    def test_reflection_angle_chi_squared(self):
        """Test the cosine law with a chi-squared goodness-of-fit test."""
        eps = sample_reflection_angle(np.random.default_rng(7), 50_000)
        edges = np.linspace(-math.pi / 2, math.pi / 2, 11)
        observed, _ = np.histogram(eps, bins=edges)
        expected = 50_000 * np.diff((np.sin(edges) + 1) / 2)
        assert stats.chisquare(observed, expected).pvalue > 0.01


class TestWallCrossing:
    """Test exit times from the circle."""

    def test_from_center(self):
        """Test the exit time from the center."""
        assert wall_crossing_time(np.zeros(2), np.array([1.0, 0.0]), 2.0) == pytest.approx(2.0)

    def test_from_wall_inward(self):
        """Test a chord through the center starting on the wall."""
        t = wall_crossing_time(np.array([2.0, 0.0]), np.array([-4.0, 0.0]), 2.0)
        assert t == pytest.approx(1.0)

    def test_on_wall_outward_is_zero(self):
        """Test that an atom leaving the wall crosses immediately."""
        assert wall_crossing_time(np.array([2.0, 0.0]), np.array([1.0, 0.0]), 2.0) == pytest.approx(0.0)

    def test_zero_velocity_never_crosses(self):
        """Test that a parked atom never hits the wall."""
        assert np.isinf(wall_crossing_time(np.array([0.5, 0.0]), np.zeros(2), 2.0))

    def test_vectorized(self):
        """Test row-wise evaluation."""
        p = np.zeros((3, 2))
        v = np.array([[1.0, 0.0], [0.0, 2.0], [-4.0, 0.0]])
        np.testing.assert_allclose(wall_crossing_time(p, v, 2.0), [2.0, 1.0, 0.5])


class TestSingleAtom:
    """Test free flight and reflection of a single atom."""

    def test_free_flight_inside(self, geom):
        """Test a step that stays inside the cell."""
        state = AtomState(position=np.zeros(2), velocity=np.array([100.0, 0.0]))
        new, t_hit = advance_free_flight(state, 1e-3, geom)
        assert t_hit is None
        np.testing.assert_allclose(new.position, [0.1, 0.0])
        assert new.time == pytest.approx(1e-3)

    def test_free_flight_hits_wall(self, geom):
        """Test a step that reaches the wall stops on it at the crossing time."""
        state = AtomState(position=np.zeros(2), velocity=np.array([100.0, 0.0]))
        new, t_hit = advance_free_flight(state, 1.0, geom)
        assert t_hit == pytest.approx(geom.radius_cell / 100.0)
        assert np.linalg.norm(new.position) == pytest.approx(geom.radius_cell)

    def test_reflect_off_wall_raises(self, geom):
        """Test that reflecting an interior atom is an error."""
        state = AtomState(position=np.array([0.5, 0.0]), velocity=np.array([1.0, 0.0]))
        with pytest.raises(NotOnBoundaryError):
            reflect_at_wall(state, geom, np.random.default_rng(0))

    def test_reflection_points_inward(self, geom):
        """Test that re-emitted velocities point into the cell."""
        rng = np.random.default_rng(8)
        state = AtomState(position=np.array([geom.radius_cell, 0.0]), velocity=np.array([1.0, 0.0]))
        for _ in range(200):
            out = reflect_at_wall(state, geom, rng)
            assert np.dot(out.velocity, out.position) < 0
            assert not out.phase_reset_pending

    def test_reflection_always_resets_with_probability_one(self):
        """Test that wall_reset_probability = 1 flags every hit."""
        geom = CellGeometry(radius_cell=1.0, temperature=300.0, wall_reset_probability=1.0)
        state = AtomState(position=np.array([0.0, 1.0]), velocity=np.array([0.0, 1.0]))
        assert reflect_at_wall(state, geom, np.random.default_rng(0)).phase_reset_pending


class TestTrajectory:
    """Test single-atom trajectories."""

    def test_stays_inside(self, geom):
        """Test containment and sampling grid."""
        traj = simulate_trajectory(geom, 0.2, 1e-3, np.random.default_rng(9))
        assert len(traj) == 201
        assert traj.dt == pytest.approx(1e-3)
        assert np.all(np.linalg.norm(traj.positions, axis=1) <= geom.radius_cell * (1 + 1e-9))
        assert not traj.reset_flags.any()
        assert traj.reset_events.size == 0

    def test_resets_recorded(self):
        """Test that resets are flagged at the steps where they happen."""
        geom = CellGeometry(radius_cell=1.0, temperature=300.0, wall_reset_probability=1.0)
        traj = simulate_trajectory(geom, 0.5, 1e-3, np.random.default_rng(10))
        assert traj.reset_events.size > 0
        assert 0 < traj.reset_flags.sum() <= traj.reset_events.size
        assert np.all(np.diff(traj.reset_events) >= 0)

    def test_fields_are_sampled_arrays(self, geom):
        """Test that a trajectory holds only the sampled grid and its resets."""
        traj = simulate_trajectory(geom, 0.01, 1e-3, np.random.default_rng(15))
        assert [f.name for f in dataclasses.fields(traj)] == [
            "times",
            "positions",
            "velocities",
            "reset_flags",
            "reset_events",
        ]
        assert traj.positions.shape == traj.velocities.shape == (len(traj), 2)
        assert traj.reset_flags.shape == (len(traj),)

    def test_parked_atom_gets_velocity(self, geom):
        """Test that a zero-velocity initial state is given a thermal velocity."""
        initial = AtomState(position=np.zeros(2), velocity=np.zeros(2))
        traj = simulate_trajectory(geom, 0.01, 1e-3, np.random.default_rng(11), initial=initial)
        assert np.linalg.norm(traj.velocities[0]) > 0

    def test_csv_dump(self, geom, tmp_path):
        """Test the trajectory CSV columns."""
        traj = simulate_trajectory(geom, 0.01, 1e-3, np.random.default_rng(12))
        path = write_trajectory_csv(traj, tmp_path / "traj.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["t_ms", "x_mm", "y_mm", "vx", "vy", "reset_flag"]
        assert len(frame) == len(traj)


class TestEnsemble:
    """Test the vectorized propagation of many atoms."""

    def test_equilibrium_is_preserved(self, geom):
        """Test that positions stay uniform and speeds stay Maxwell-Boltzmann."""
        rng = np.random.default_rng(13)
        pos = sample_initial_position(geom, rng, 20_000)
        vel = sample_initial_velocity(geom, rng, 20_000)
        for _ in range(100):
            pos, vel, _ = propagate_ensemble(pos, vel, 1e-3, geom, rng)
        r2 = np.sum(pos**2, axis=1) / geom.radius_cell**2
        assert np.all(r2 <= 1 + 1e-9)
        assert np.mean(r2) == pytest.approx(0.5, abs=0.01)
        speeds = np.linalg.norm(vel, axis=1)
        assert stats.kstest(speeds, lambda x: mb2d_cdf(x, geom.sigma_speed)).pvalue > 0.01

    def test_wall_hit_rate(self):
        """Test that every atom hits the wall once per mean free time on average."""
        geom = CellGeometry.from_square_cell(3.0, TEMPERATURE_REFERENCE, wall_reset_probability=1.0)
        rng = np.random.default_rng(14)
        n, dt, steps = 20_000, 2e-4, 500
        pos = sample_initial_position(geom, rng, n)
        vel = sample_initial_velocity(geom, rng, n)
        hits = 0
        for _ in range(steps):
            pos, vel, reset = propagate_ensemble(pos, vel, dt, geom, rng)
            hits += int(reset.sum())
        expected = n * steps * dt / geom.mean_free_time
        assert hits == pytest.approx(expected, rel=0.03)

    def test_no_resets_without_probability(self, geom):
        """Test that wall_reset_probability = 0 never resets."""
        rng = np.random.default_rng(15)
        pos = sample_initial_position(geom, rng, 1000)
        vel = sample_initial_velocity(geom, rng, 1000)
        for _ in range(50):
            pos, vel, reset = propagate_ensemble(pos, vel, 1e-3, geom, rng)
            assert not reset.any()
