"""Terminal coasting envelope: gaps from which pure coasting stays safe.

For each ego velocity on a grid, the minimal initial bumper gap is found
such that a zero-input rollout (delivered force zero, deceleration from
road load alone) against a front vehicle holding a constant reference
speed keeps the gap at or above the safety floor until the ego has slowed
to the reference speed, or a step cap elapses.  Velocities at or below
the reference need exactly the floor gap, so the table is flat there and
then grows with the square of the excess speed, which makes it convex.

The controller uses the table through its secant lines: for a convex
table the pointwise maximum of all secants equals the piecewise-linear
interpolant, which over-approximates the true minimal gap on every
segment.  Requiring the terminal predicted gap to sit above every secant
is therefore a conservative, convex stand-in for membership in the safe
set, and because the boundary is (by construction) the manifold of pure
coast-down trajectories, riding the constraint needs no brake force.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .plant import PlantParams, resistive_force

if TYPE_CHECKING:
    from .mpc import MpcConfig

_BISECT_TOL = 1e-3  # gap resolution [m]


@dataclass(frozen=True)
class CoastingSet:
    """Velocity grid, minimal-gap table and its secant envelope."""

    velocities: np.ndarray  # strictly increasing grid over [v_min, v_max]
    gaps: np.ndarray  # minimal safe initial gap per grid velocity [m]
    slopes: np.ndarray  # secant slope per segment [m per m/s]
    intercepts: np.ndarray  # secant intercept per segment [m]
    d_min: float
    ref_speed: float
    steps: int
    dt: float

    def envelope(self, velocity: float) -> float:
        """Pointwise maximum of the secants == piecewise-linear interpolant."""
        v = float(np.clip(velocity, self.velocities[0], self.velocities[-1]))
        return float(np.interp(v, self.velocities, self.gaps))

    def coarse_secants(self, max_segments: int) -> tuple[np.ndarray, np.ndarray]:
        """Secants over a node subsequence, at most max_segments of them.

        Chords of a convex table over wider spans lie on or above the
        fine interpolant, so the coarse envelope is still conservative;
        it just demands a little more gap between the kept nodes.
        """
        n_seg = len(self.slopes)
        stride = max(1, -(-n_seg // max_segments))
        idx = list(range(0, n_seg + 1, stride))
        if idx[-1] != n_seg:
            idx.append(n_seg)
        v = self.velocities[idx]
        g = self.gaps[idx]
        slopes = np.diff(g) / np.diff(v)
        intercepts = g[:-1] - slopes * v[:-1]
        return slopes, intercepts


def coast_rollout_safe(
    gap: float,
    velocity: float,
    model: PlantParams,
    d_min: float,
    ref_speed: float,
    steps: int,
    dt: float,
) -> bool:
    """Simulate a pure coast against a constant-speed front.

    Returns True when the bumper gap stays >= d_min at every step edge
    until the ego is no faster than the front (gap can no longer shrink)
    or the step cap elapses.
    """
    d = gap
    v = velocity
    for _ in range(steps):
        if d < d_min:
            return False
        if v <= ref_speed:
            return True
        d = d + dt * (ref_speed - v)
        v = max(0.0, v - dt * resistive_force(v, model) / model.mass)
    return d >= d_min


def compute_coasting_set(config: "MpcConfig") -> CoastingSet:
    """Build the minimal-gap table and its secant envelope for a config.

    Each table entry is found by bisection on the initial gap (resolution
    1 mm, rounded to the safe side) and padded by config.coast_margin.
    Raises ValueError when the resulting table is not nondecreasing or
    not convex, since the secant envelope is only conservative for a
    convex table.
    """
    n_points = config.coast_grid + 1
    grid = np.linspace(config.v_min, config.v_max, n_points)
    ref = config.coast_ref_speed
    gaps = np.empty(n_points)

    for i, v in enumerate(grid):
        if v <= ref:
            gaps[i] = config.d_min + config.coast_margin
            continue
        lo = config.d_min
        hi = config.d_min + (v - ref) * config.coast_steps * config.dt + 1.0
        if not coast_rollout_safe(hi, v, config.model, config.d_min, ref, config.coast_steps, config.dt):
            raise ValueError(f"no safe coasting gap found at v={v:.2f}")
        while hi - lo > _BISECT_TOL:
            mid = 0.5 * (lo + hi)
            if coast_rollout_safe(mid, v, config.model, config.d_min, ref, config.coast_steps, config.dt):
                hi = mid
            else:
                lo = mid
        gaps[i] = hi + config.coast_margin  # safe endpoint, padded

    if np.any(np.diff(gaps) < -1e-9):
        raise ValueError("coasting-gap table must be nondecreasing in velocity")
    dv = np.diff(grid)
    # The step cap truncates long coast-downs near v_max, which can dent
    # convexity there.  Lifting a dented point onto the extended previous
    # chord only increases the stored gap, so it stays conservative and
    # restores the convexity the secant envelope relies on.
    for j in range(1, len(gaps) - 1):
        prev_slope = (gaps[j] - gaps[j - 1]) / dv[j - 1]
        floor = gaps[j] + prev_slope * dv[j]
        if gaps[j + 1] < floor:
            gaps[j + 1] = floor
    slopes = np.diff(gaps) / dv
    if np.any(np.diff(slopes) < -1e-9):
        raise ValueError("coasting-gap table must be convex for a secant envelope")
    intercepts = gaps[:-1] - slopes * grid[:-1]

    return CoastingSet(
        velocities=grid,
        gaps=gaps,
        slopes=slopes,
        intercepts=intercepts,
        d_min=config.d_min,
        ref_speed=ref,
        steps=config.coast_steps,
        dt=config.dt,
    )
