"""Longitudinal point-mass vehicle with a first-order force actuator."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of the simulated vehicle."""

    mass: float = 1800.0  # kg
    tau: float = 0.3  # actuator time constant [s]
    c0: float = 120.0  # road load, constant term [N]
    c1: float = 2.5  # road load, linear term [N s/m]
    c2: float = 0.4  # road load, quadratic term [N s^2/m^2]
    force_rate_limit: float | None = None  # max |dF/dt| [N/s], None = unlimited

    def __post_init__(self) -> None:
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.c0 < 0.0 or self.c1 < 0.0 or self.c2 < 0.0:
            raise ValueError("road-load coefficients must be nonnegative")
        if self.force_rate_limit is not None and self.force_rate_limit <= 0.0:
            raise ValueError("force_rate_limit must be positive when set")


@dataclass(frozen=True)
class PlantState:
    """Ego state: position [m], velocity [m/s], delivered wheel force [N], time [s]."""

    position: float = 0.0
    velocity: float = 0.0
    force: float = 0.0
    time: float = 0.0


@dataclass(frozen=True)
class ControlInput:
    """Commanded wheel forces: traction >= 0, braking <= 0 [N]."""

    traction: float = 0.0
    braking: float = 0.0


def resistive_force(velocity: float, params: PlantParams) -> float:
    """Quadratic road load c0 + c1*v + c2*v^2 [N]."""
    return params.c0 + params.c1 * velocity + params.c2 * velocity * velocity


def plant_step(state: PlantState, control: ControlInput, dt: float, params: PlantParams) -> PlantState:
    """Advance the plant one forward-Euler step of length dt.

    All next-state values are computed from the current state (simultaneous
    update).  The delivered force lags the command through a first-order
    filter; velocity is clamped at zero so road load never reverses motion.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    values = (state.position, state.velocity, state.force, control.traction, control.braking)
    if not all(math.isfinite(x) for x in values):
        raise ValueError("non-finite plant state or control input")
    if control.traction < 0.0:
        raise ValueError("traction command must be >= 0")
    if control.braking > 0.0:
        raise ValueError("braking command must be <= 0")

    commanded = control.traction + control.braking
    force_next = state.force + (dt / params.tau) * (commanded - state.force)
    if params.force_rate_limit is not None:
        max_delta = params.force_rate_limit * dt
        delta = force_next - state.force
        if delta > max_delta:
            force_next = state.force + max_delta
        elif delta < -max_delta:
            force_next = state.force - max_delta

    accel = (state.force - resistive_force(state.velocity, params)) / params.mass
    velocity_next = max(0.0, state.velocity + dt * accel)
    position_next = state.position + dt * state.velocity

    return PlantState(
        position=position_next,
        velocity=velocity_next,
        force=force_next,
        time=state.time + dt,
    )
