"""classical atomic motion inside a circular anti-relaxation coated cell

Atoms fly ballistically between wall hits. A wall hit re-emits the atom
diffusely (Knudsen cosine law) with a speed drawn from the flux-weighted
distribution, which keeps the gas in 2D Maxwell-Boltzmann equilibrium, and
flags a spin phase reset with probability `wall_reset_probability`.

Units: lengths in mm, times in ms, so velocities are in mm/ms (= m/s).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import stats

from transit_squeeze._constants import K_B, MASS_RB87
from transit_squeeze._exceptions import (
    InvalidParameterError,
    NotOnBoundaryError,
    NumericalError,
)

logger: logging.Logger = logging.getLogger(__name__)

# relative tolerance for "on the wall" and for containment
BOUNDARY_RTOL: float = 1e-9
# speeds below this fraction of sigma are redrawn (avoids atoms parked forever)
MIN_SPEED_FRACTION: float = 1e-6
MAX_WALL_HITS_PER_STEP: int = 10_000


@dataclass(frozen=True)
class CellGeometry:
    """circular cross-section of the cell and the thermal state of the gas"""

    radius_cell: float  # mm
    temperature: float  # K
    wall_reset_probability: float = 0.0
    mass_atom: float = MASS_RB87  # kg

    def __post_init__(self) -> None:
        if not self.radius_cell > 0:
            raise InvalidParameterError(
                f"radius_cell must be positive, got {self.radius_cell = }"
            )
        if not self.temperature > 0:
            raise InvalidParameterError(
                f"temperature must be positive, got {self.temperature = }"
            )
        if not 0.0 <= self.wall_reset_probability <= 1.0:
            raise InvalidParameterError(
                f"wall_reset_probability must lie in [0, 1], got {self.wall_reset_probability = }"
            )
        if not self.mass_atom > 0:
            raise InvalidParameterError(
                f"mass_atom must be positive, got {self.mass_atom = }"
            )

    @classmethod
    def from_square_cell(
        cls,
        side: float,
        temperature: float,
        wall_reset_probability: float = 0.0,
        mass_atom: float = MASS_RB87,
    ) -> "CellGeometry":
        """circle with the same cross-sectional area as a square cell of side `side` (mm)"""
        return cls(
            radius_cell=side / math.sqrt(math.pi),
            temperature=temperature,
            wall_reset_probability=wall_reset_probability,
            mass_atom=mass_atom,
        )

    @property
    def sigma_speed(self) -> float:
        """thermal speed scale sqrt(k_B T / m), in mm/ms"""
        return math.sqrt(K_B * self.temperature / self.mass_atom)

    @property
    def mean_speed(self) -> float:
        """mean of the 2D Maxwell-Boltzmann speed distribution"""
        return self.sigma_speed * math.sqrt(math.pi / 2)

    @property
    def mean_free_time(self) -> float:
        """mean time between wall hits of one atom in equilibrium, in ms"""
        return math.pi * self.radius_cell / (2 * self.mean_speed)


class AtomState(NamedTuple):
    """position/velocity of one atom, plus whether its spin is due for a reset"""

    position: np.ndarray  # (2,) mm
    velocity: np.ndarray  # (2,) mm/ms
    time: float = 0.0  # ms
    phase_reset_pending: bool = False


@dataclass(frozen=True)
class Trajectory:
    """one atom sampled on a uniform time grid

    `reset_flags[k]` is true when a phase reset happened during the step
    ending at sample `k`; `reset_events` holds the exact reset times.
    """

    times: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 2)
    velocities: np.ndarray  # (n, 2)
    reset_flags: np.ndarray  # (n,) bool
    reset_events: np.ndarray  # (m,)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


def wall_reset_probability_for(geom: CellGeometry, t2: float) -> float:
    """reset probability whose wall-hit decay rate p / mean_free_time equals 1 / `t2`

    capped at 1; a starting point for calibration, which also sees every
    other decay channel
    """
    if not t2 > 0:
        raise InvalidParameterError(f"t2 must be positive, got {t2 = }")
    return min(1.0, geom.mean_free_time / t2)


# sampling
# ==============================


def sample_initial_position(
    geom: CellGeometry,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """uniform point(s) on the disk: r^2 uniform on [0, R_c^2], angle uniform on [0, 2pi)

    returns shape (2,) when `size` is None, else (size, 2)
    """
    r: np.ndarray = geom.radius_cell * np.sqrt(rng.uniform(0.0, 1.0, size))
    theta: np.ndarray = rng.uniform(0.0, 2 * np.pi, size)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def sample_speed_mb2d(
    geom: CellGeometry,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray | float:
    """speeds from the 2D Maxwell-Boltzmann law f(v) = (v/s^2) exp(-v^2 / 2s^2), a Rayleigh distribution"""
    return rng.rayleigh(scale=geom.sigma_speed, size=size)


def sample_speed_flux_weighted(
    geom: CellGeometry,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray | float:
    """speeds from g(v) = sqrt(2/pi) (v^2/s^3) exp(-v^2 / 2s^2)

    g is the chi distribution with three degrees of freedom, so a draw is
    the norm of a 3D standard normal vector scaled by sigma.
    """
    return geom.sigma_speed * np.sqrt(rng.chisquare(3, size=size))


def mb2d_cdf(v: np.ndarray | float, sigma: float) -> np.ndarray | float:
    """CDF of the 2D Maxwell-Boltzmann speed law"""
    return stats.rayleigh.cdf(v, scale=sigma)


def flux_weighted_cdf(v: np.ndarray | float, sigma: float) -> np.ndarray | float:
    """CDF of the flux-weighted speed law"""
    return stats.maxwell.cdf(v, scale=sigma)


def sample_initial_velocity(
    geom: CellGeometry,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """uniform heading with a 2D Maxwell-Boltzmann speed; near-zero speeds are redrawn"""
    floor: float = MIN_SPEED_FRACTION * geom.sigma_speed
    speed: np.ndarray = np.atleast_1d(
        np.asarray(sample_speed_mb2d(geom, rng, 1 if size is None else size), dtype=float)
    )
    slow: np.ndarray = speed < floor
    while slow.any():
        logger.debug(f"redrawing {int(slow.sum())} near-zero initial speeds")
        speed[slow] = sample_speed_mb2d(geom, rng, int(slow.sum()))
        slow = speed < floor
    heading: np.ndarray = rng.uniform(0.0, 2 * np.pi, speed.shape)
    velocity: np.ndarray = np.stack(
        [speed * np.cos(heading), speed * np.sin(heading)], axis=-1
    )
    return velocity[0] if size is None else velocity


def sample_reflection_angle(
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray | float:
    """angle from the inward wall normal with density cos(e)/2 on (-pi/2, pi/2)"""
    u: np.ndarray = rng.uniform(-1.0, 1.0, size)
    # keep the angle strictly inside the open interval
    return np.arcsin(np.clip(u, -1.0 + 1e-15, 1.0 - 1e-15))


# wall geometry
# ==============================


def wall_crossing_time(
    position: np.ndarray,
    velocity: np.ndarray,
    radius: float,
) -> np.ndarray:
    """time until the straight path from `position` leaves the circle of `radius`

    Solves |p + v t|^2 = R^2 with the cancellation-free form of the quadratic
    formula and returns the larger root, which is the exit time for an atom
    inside or on the circle. Zero velocity gives inf. Works row-wise on
    (..., 2) arrays.
    """
    p: np.ndarray = np.asarray(position, dtype=float)
    v: np.ndarray = np.asarray(velocity, dtype=float)
    a: np.ndarray = np.sum(v * v, axis=-1)
    b: np.ndarray = 2.0 * np.sum(p * v, axis=-1)
    c: np.ndarray = np.sum(p * p, axis=-1) - radius * radius
    root: np.ndarray = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    q: np.ndarray = -0.5 * (b + np.copysign(root, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_exit: np.ndarray = np.fmax(q / a, c / q)
    return np.where(a > 0, t_exit, np.inf)


def _project_to_wall(position: np.ndarray, radius: float) -> np.ndarray:
    norm: np.ndarray = np.linalg.norm(position, axis=-1, keepdims=True)
    return position * (radius / norm)


def _diffuse_velocities(
    wall_points: np.ndarray,
    geom: CellGeometry,
    rng: np.random.Generator,
) -> np.ndarray:
    """cosine-law directions about the inward normal, flux-weighted speeds; (m, 2) in, (m, 2) out"""
    m: int = wall_points.shape[0]
    normal: np.ndarray = -wall_points / np.linalg.norm(wall_points, axis=-1, keepdims=True)
    tangent: np.ndarray = np.stack([-normal[:, 1], normal[:, 0]], axis=-1)
    eps: np.ndarray = np.asarray(sample_reflection_angle(rng, m))
    speed: np.ndarray = np.asarray(sample_speed_flux_weighted(geom, rng, m))
    direction: np.ndarray = np.cos(eps)[:, None] * normal + np.sin(eps)[:, None] * tangent
    return speed[:, None] * direction


# single-atom operations
# ==============================


def reflect_at_wall(
    state: AtomState,
    geom: CellGeometry,
    rng: np.random.Generator,
) -> AtomState:
    """diffuse re-emission of an atom sitting on the wall

    # Parameters:
    - `state : AtomState`
        must satisfy |position| = radius_cell to within `BOUNDARY_RTOL`
    - `geom : CellGeometry`
    - `rng : np.random.Generator`

    # Returns:
    - `AtomState`
        same time, position snapped onto the wall, new inward velocity, and
        `phase_reset_pending` set with probability `geom.wall_reset_probability`
        (an already pending reset stays pending)

    # Raises:
    - `NotOnBoundaryError` : the atom is not on the wall
    """
    position: np.ndarray = np.asarray(state.position, dtype=float)
    r: float = float(np.linalg.norm(position))
    if abs(r - geom.radius_cell) > BOUNDARY_RTOL * geom.radius_cell:
        raise NotOnBoundaryError(
            f"atom at |r| = {r!r} mm is not on the wall at R_c = {geom.radius_cell!r} mm"
        )
    on_wall: np.ndarray = _project_to_wall(position[None, :], geom.radius_cell)
    velocity: np.ndarray = _diffuse_velocities(on_wall, geom, rng)[0]
    reset: bool = bool(rng.random() < geom.wall_reset_probability)
    return AtomState(
        position=on_wall[0],
        velocity=velocity,
        time=state.time,
        phase_reset_pending=state.phase_reset_pending or reset,
    )


def advance_free_flight(
    state: AtomState,
    dt: float,
    geom: CellGeometry,
) -> tuple[AtomState, float | None]:
    """move the atom in a straight line for at most `dt`

    returns the advanced state and `None`, or, if the wall is reached first,
    the state on the wall at the crossing and the time offset of the crossing
    measured from the start of the step
    """
    position: np.ndarray = np.asarray(state.position, dtype=float)
    velocity: np.ndarray = np.asarray(state.velocity, dtype=float)
    t_hit: float = max(float(wall_crossing_time(position, velocity, geom.radius_cell)), 0.0)
    if t_hit <= dt:
        on_wall: np.ndarray = _project_to_wall(
            (position + velocity * t_hit)[None, :], geom.radius_cell
        )[0]
        return state._replace(position=on_wall, time=state.time + t_hit), t_hit
    return state._replace(position=position + velocity * dt, time=state.time + dt), None


def simulate_trajectory(
    geom: CellGeometry,
    duration: float,
    dt: float,
    rng: np.random.Generator,
    initial: AtomState | None = None,
) -> Trajectory:
    """track one atom for `duration` ms, sampled every `dt` ms

    wall hits are resolved exactly inside each step, as many as happen;
    an initial state with (near) zero velocity gets a fresh thermal velocity
    """
    if not duration > 0 or not dt > 0:
        raise InvalidParameterError(f"duration and dt must be positive, got {duration = }, {dt = }")

    if initial is None:
        state: AtomState = AtomState(
            position=sample_initial_position(geom, rng),
            velocity=sample_initial_velocity(geom, rng),
        )
    else:
        state = initial
        if float(np.linalg.norm(state.velocity)) < MIN_SPEED_FRACTION * geom.sigma_speed:
            logger.debug("initial atom has no velocity, drawing a thermal one")
            state = state._replace(velocity=sample_initial_velocity(geom, rng))

    n_steps: int = int(round(duration / dt))
    t0: float = state.time
    times: np.ndarray = t0 + dt * np.arange(n_steps + 1)
    positions: np.ndarray = np.empty((n_steps + 1, 2))
    velocities: np.ndarray = np.empty((n_steps + 1, 2))
    reset_flags: np.ndarray = np.zeros(n_steps + 1, dtype=bool)
    reset_events: list[float] = []

    positions[0] = state.position
    velocities[0] = state.velocity
    for k in range(1, n_steps + 1):
        remaining: float = dt
        hits: int = 0
        while True:
            state, t_hit = advance_free_flight(state, remaining, geom)
            if t_hit is None:
                break
            remaining -= t_hit
            state = reflect_at_wall(state, geom, rng)
            if state.phase_reset_pending:
                reset_events.append(state.time)
                reset_flags[k] = True
                state = state._replace(phase_reset_pending=False)
            hits += 1
            if hits > MAX_WALL_HITS_PER_STEP:
                raise NumericalError(f"more than {MAX_WALL_HITS_PER_STEP} wall hits in one step at t = {state.time} ms")
        # pin the clock to the grid so rounding never accumulates
        state = state._replace(time=float(times[k]))
        positions[k] = state.position
        velocities[k] = state.velocity

    return Trajectory(
        times=times,
        positions=positions,
        velocities=velocities,
        reset_flags=reset_flags,
        reset_events=np.asarray(reset_events, dtype=float),
    )


# many atoms at once
# ==============================


def propagate_ensemble(
    positions: np.ndarray,
    velocities: np.ndarray,
    dt: float,
    geom: CellGeometry,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """advance (n, 2) positions/velocities by `dt`, resolving every wall hit exactly

    same physics as `advance_free_flight` + `reflect_at_wall`, vectorized.
    returns new positions, new velocities and a boolean mask of atoms whose
    spin was reset during the step
    """
    radius: float = geom.radius_cell
    # accept round-off at the wall without counting it as a crossing
    limit: float = radius * radius * (1.0 + 1e-12)
    pos: np.ndarray = np.array(positions, dtype=float, copy=True)
    vel: np.ndarray = np.array(velocities, dtype=float, copy=True)
    reset: np.ndarray = np.zeros(pos.shape[0], dtype=bool)

    moved: np.ndarray = pos + vel * dt
    crossing: np.ndarray = np.einsum("ij,ij->i", moved, moved) > limit
    pos[~crossing] = moved[~crossing]

    idx: np.ndarray = np.flatnonzero(crossing)
    remaining: np.ndarray = np.full(idx.size, dt)
    rounds: int = 0
    while idx.size:
        p: np.ndarray = pos[idx]
        v: np.ndarray = vel[idx]
        t_hit: np.ndarray = np.clip(wall_crossing_time(p, v, radius), 0.0, remaining)
        at_wall: np.ndarray = _project_to_wall(p + v * t_hit[:, None], radius)
        v_new: np.ndarray = _diffuse_velocities(at_wall, geom, rng)
        reset[idx] |= rng.random(idx.size) < geom.wall_reset_probability
        remaining = remaining - t_hit

        moved = at_wall + v_new * remaining[:, None]
        crossing = np.einsum("ij,ij->i", moved, moved) > limit
        vel[idx] = v_new
        pos[idx[~crossing]] = moved[~crossing]
        pos[idx[crossing]] = at_wall[crossing]
        idx = idx[crossing]
        remaining = remaining[crossing]

        rounds += 1
        if rounds > MAX_WALL_HITS_PER_STEP:
            raise NumericalError(f"wall-hit resolution did not settle within {MAX_WALL_HITS_PER_STEP} rounds")

    return pos, vel, reset


def write_trajectory_csv(trajectory: Trajectory, path: Path) -> Path:
    """dump a trajectory as CSV with columns t_ms, x_mm, y_mm, vx, vy, reset_flag"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        {
            "t_ms": trajectory.times,
            "x_mm": trajectory.positions[:, 0],
            "y_mm": trajectory.positions[:, 1],
            "vx": trajectory.velocities[:, 0],
            "vy": trajectory.velocities[:, 1],
            "reset_flag": trajectory.reset_flags.astype(int),
        }
    ).to_csv(path, index=False)
    return path
