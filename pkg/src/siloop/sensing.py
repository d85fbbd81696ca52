"""Idealized sensing: forward radar, front-velocity prediction, signal snapshot.

The radar is exact inside its range and saturates exactly at max_range:
``target_present`` is False if and only if the reported distance equals
max_range, so downstream code can treat the saturated reading as "clear
road ahead" without a separate flag convention.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .signals import Corridor, Phase, green_window, phase_at
from .traffic import TargetVehicle

DEFAULT_MAX_RANGE = 150.0  # [m]
DEFAULT_BRAKE_ASSUMPTION = 6.0  # worst-case front deceleration [m/s^2]


@dataclass(frozen=True)
class RadarReading:
    distance: float  # bumper gap to the nearest target ahead, == max_range when clear [m]
    relative_velocity: float  # target velocity minus ego velocity, 0 when clear [m/s]
    target_present: bool


@dataclass(frozen=True)
class FrontPrediction:
    """Predicted front-vehicle velocity over the horizon, one entry per step edge."""

    velocities: tuple[float, ...]  # length horizon + 1, [m/s]


@dataclass(frozen=True)
class SpatSnapshot:
    """Next signal ahead: stop-line distance, phase schedule, green timing.

    The phase schedule covers the receding horizon for the stop-line
    constraint rows; the green window carries the longer-range timing a
    real SPaT broadcast provides (time to change), which the controller
    uses to shape its approach speed long before the horizon can see the
    phase itself.
    """

    signal_index: int
    distance_to_stop_line: float  # [m]
    phases: tuple[Phase, ...]  # phase at t + k*dt for k = 0..horizon
    green_start: float = 0.0  # current-or-next green opens, relative [s] (< 0: already open)
    green_end: float = float("inf")  # that green closes, relative [s]
    cycle: float = float("inf")  # window repeat period [s]


@dataclass(frozen=True)
class LeadPlan:
    """Piecewise-constant velocity profile a cooperating lead broadcasts.

    breakpoints are absolute times; velocity holds from each breakpoint
    until the next, and the last value holds forever.
    """

    times: tuple[float, ...]
    velocities: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.times) != len(self.velocities) or not self.times:
            raise ValueError("plan needs matching, nonempty times and velocities")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("plan breakpoints must be strictly increasing")

    def velocity_at(self, time: float) -> float:
        idx = bisect.bisect_right(self.times, time) - 1
        return self.velocities[max(idx, 0)]


def radar_measure(
    ego_position: float,
    ego_velocity: float,
    vehicles: tuple[TargetVehicle, ...],
    max_range: float = DEFAULT_MAX_RANGE,
    ego_id: int | None = None,
) -> RadarReading:
    """Measure the nearest rear bumper ahead of the ego position.

    Detection requires a strictly positive gap strictly below max_range;
    anything else reads as a clear road: (max_range, 0, False).
    """
    best_gap = None
    best_vel = 0.0
    for veh in vehicles:
        if ego_id is not None and veh.vehicle_id == ego_id:
            continue
        gap = veh.position - veh.length - ego_position
        if gap <= 0.0:
            continue
        if best_gap is None or gap < best_gap:
            best_gap = gap
            best_vel = veh.velocity
    if best_gap is None or best_gap >= max_range:
        return RadarReading(distance=max_range, relative_velocity=0.0, target_present=False)
    return RadarReading(distance=best_gap, relative_velocity=best_vel - ego_velocity, target_present=True)


def predict_front_exact(
    plan: LeadPlan, now: float, horizon: int, dt: float
) -> FrontPrediction:
    """Sample a communicated velocity plan at the horizon's step edges."""
    velocities = tuple(plan.velocity_at(now + k * dt) for k in range(horizon + 1))
    return FrontPrediction(velocities=velocities)


def predict_front_worst_case(
    velocity_now: float,
    horizon: int,
    dt: float,
    brake_assumption: float = DEFAULT_BRAKE_ASSUMPTION,
) -> FrontPrediction:
    """Assume the front vehicle brakes hard from now until standstill."""
    velocities = tuple(
        max(0.0, velocity_now - brake_assumption * k * dt) for k in range(horizon + 1)
    )
    return FrontPrediction(velocities=velocities)


def constant_prediction(velocity: float, horizon: int) -> FrontPrediction:
    """Front holding a constant velocity; also the clear-road sentinel."""
    return FrontPrediction(velocities=(velocity,) * (horizon + 1))


def spat_snapshot(
    ego_position: float,
    corridor: Corridor,
    time: float,
    horizon: int,
    dt: float,
) -> SpatSnapshot | None:
    """Snapshot of the next signal at or ahead of the ego position.

    Returns None past the last stop line: no upcoming signal, no
    stop-line constraint.
    """
    for index, plan in enumerate(corridor.signals):
        if plan.stop_line >= ego_position:
            phases = tuple(phase_at(plan, time + k * dt) for k in range(horizon + 1))
            start, end = green_window(plan, time)
            return SpatSnapshot(
                signal_index=index,
                distance_to_stop_line=plan.stop_line - ego_position,
                phases=phases,
                green_start=start,
                green_end=end,
                cycle=plan.cycle,
            )
    return None
