"""Background traffic: IDM car-following along the signalized corridor.

Vehicles follow the intelligent-driver model against the nearest of (a) the
vehicle ahead and (b) a stationary virtual leader at the next stop line
whose signal requires stopping.  Yellow is stop-if-able: a vehicle ignores
the line when stopping would require more than ``hard_braking``.  Arrivals
are Poisson at the corridor entry and optionally at side streets behind
each intersection; vehicles crossing an intersection exit with that
intersection's turn probability.  All randomness flows through the supplied
generator in a fixed documented order, so a seed fixes the episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .signals import Corridor, Phase, phase_at

_IDM_DELTA = 4.0  # free-flow exponent


class CollisionError(RuntimeError):
    """Two vehicles overlapped; the episode is no longer meaningful."""


@dataclass(frozen=True)
class IdmParams:
    max_accel: float = 1.5  # [m/s^2]
    comfort_decel: float = 2.0  # [m/s^2]
    headway: float = 1.2  # desired time gap [s]
    min_spacing: float = 2.0  # standstill gap [m]
    hard_braking: float = 4.0  # acceleration floor, also the yellow-rule bound [m/s^2]
    desired_speed: float = 13.9  # [m/s]


@dataclass(frozen=True)
class TargetVehicle:
    """position is the front bumper; the rear bumper sits at position - length."""

    vehicle_id: int
    position: float
    velocity: float
    length: float = 4.5


@dataclass(frozen=True)
class TrafficDemand:
    entry_rate: float = 0.0  # Poisson arrivals at the corridor entry [veh/s]
    entry_speed: float = 10.0  # [m/s]
    turn_probability: tuple[float, ...] = ()  # per intersection, in corridor order
    side_rates: tuple[float, ...] = ()  # per-intersection side-street inflow [veh/s]
    vehicle_length: float = 4.5  # [m]

    def __post_init__(self) -> None:
        if self.entry_rate < 0.0 or any(r < 0.0 for r in self.side_rates):
            raise ValueError("arrival rates must be nonnegative")
        if any(not 0.0 <= p <= 1.0 for p in self.turn_probability):
            raise ValueError("turn probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class TrafficState:
    vehicles: tuple[TargetVehicle, ...] = field(default_factory=tuple)
    next_id: int = 0


def idm_accel(velocity: float, gap: float, lead_velocity: float, params: IdmParams) -> float:
    """IDM acceleration of a follower, clipped to [-hard_braking, max_accel].

    gap is bumper-to-bumper [m] and must be positive: a nonpositive gap
    means the vehicles already overlap.
    """
    if gap <= 0.0:
        raise CollisionError(f"nonpositive gap {gap:.3f} m in car-following")
    v0 = max(params.desired_speed, 1e-6)
    closing = velocity - lead_velocity
    s_star = params.min_spacing + max(
        0.0,
        velocity * params.headway
        + velocity * closing / (2.0 * math.sqrt(params.max_accel * params.comfort_decel)),
    )
    accel = params.max_accel * (1.0 - (velocity / v0) ** _IDM_DELTA - (s_star / gap) ** 2)
    return max(-params.hard_braking, min(params.max_accel, accel))


def _free_accel(velocity: float, params: IdmParams) -> float:
    v0 = max(params.desired_speed, 1e-6)
    accel = params.max_accel * (1.0 - (velocity / v0) ** _IDM_DELTA)
    return max(-params.hard_braking, min(params.max_accel, accel))


def _stop_line_gap(vehicle: TargetVehicle, corridor: Corridor, time: float, params: IdmParams) -> float | None:
    """Distance to the nearest stop line the vehicle must treat as blocking."""
    for plan in corridor.signals:
        dist = plan.stop_line - vehicle.position
        if dist <= 0.0:
            continue
        phase = phase_at(plan, time)
        if phase is Phase.GREEN:
            return None  # only the nearest line ahead can block
        if phase is Phase.YELLOW:
            # stop-if-able: run the yellow when stopping needs more than hard_braking
            needed = vehicle.velocity**2 / (2.0 * max(dist, 1e-9))
            if needed > params.hard_braking:
                return None
        return dist
    return None


def traffic_step(
    state: TrafficState,
    corridor: Corridor,
    demand: TrafficDemand,
    params: IdmParams,
    time: float,
    dt: float,
    rng: np.random.Generator,
    frozen_ids: frozenset[int] = frozenset(),
) -> TrafficState:
    """Advance background traffic by one step of length dt.

    Vehicles whose id is in frozen_ids are externally controlled: they are
    seen by followers and by the exit/collision logic but not moved here.
    Update order per step: kinematics, turn exits, end-of-corridor exits,
    entry injection, side-street injections.  Raises CollisionError when
    any pair overlaps after the update.
    """
    ordered = sorted(state.vehicles, key=lambda veh: veh.position, reverse=True)

    moved: list[TargetVehicle] = []
    for idx, veh in enumerate(ordered):
        if veh.vehicle_id in frozen_ids:
            moved.append(veh)
            continue
        candidates = [_free_accel(veh.velocity, params)]
        if idx > 0:
            lead = ordered[idx - 1]
            gap = lead.position - lead.length - veh.position
            candidates.append(idm_accel(veh.velocity, gap, lead.velocity, params))
        line_gap = _stop_line_gap(veh, corridor, time, params)
        if line_gap is not None:
            candidates.append(idm_accel(veh.velocity, line_gap, 0.0, params))
        accel = min(candidates)
        velocity = max(0.0, veh.velocity + dt * accel)
        position = veh.position + dt * veh.velocity
        moved.append(replace(veh, position=position, velocity=velocity))

    survivors: list[TargetVehicle] = []
    for old, veh in zip(ordered, moved):
        if veh.vehicle_id not in frozen_ids:
            exited = False
            for sig_idx, plan in enumerate(corridor.signals):
                if old.position <= plan.stop_line < veh.position:
                    p_turn = demand.turn_probability[sig_idx] if sig_idx < len(demand.turn_probability) else 0.0
                    if p_turn > 0.0 and rng.random() < p_turn:
                        exited = True
                    break
            if exited or veh.position - veh.length > corridor.length:
                continue
        survivors.append(veh)

    next_id = state.next_id
    injected: list[TargetVehicle] = []

    n_entry = rng.poisson(demand.entry_rate * dt) if demand.entry_rate > 0.0 else 0
    for _ in range(n_entry):
        # new front bumper sits at vehicle_length; the rear bumper ahead must
        # leave at least a standstill-plus-headway gap
        required = demand.vehicle_length + params.min_spacing + params.headway * demand.entry_speed
        rearmost = min((v.position - v.length for v in survivors + injected), default=math.inf)
        if rearmost >= required:
            injected.append(
                TargetVehicle(next_id, demand.vehicle_length, demand.entry_speed, demand.vehicle_length)
            )
            next_id += 1

    for sig_idx, rate in enumerate(demand.side_rates):
        if sig_idx >= len(corridor.signals) or rate <= 0.0:
            continue
        n_side = rng.poisson(rate * dt)
        entry_point = corridor.signals[sig_idx].stop_line + demand.vehicle_length + params.min_spacing
        for _ in range(n_side):
            clearance = params.min_spacing + params.headway * demand.entry_speed
            pool = survivors + injected
            ahead_ok = all(
                v.position - v.length - entry_point >= clearance
                for v in pool
                if v.position >= entry_point
            )
            behind_ok = all(
                entry_point - demand.vehicle_length - v.position >= clearance
                for v in pool
                if v.position < entry_point
            )
            if ahead_ok and behind_ok:
                injected.append(
                    TargetVehicle(next_id, entry_point, demand.entry_speed, demand.vehicle_length)
                )
                next_id += 1

    result = sorted(survivors + injected, key=lambda veh: veh.position, reverse=True)
    for lead, follower in zip(result, result[1:]):
        gap = lead.position - lead.length - follower.position
        if gap <= 0.0:
            raise CollisionError(
                f"t={time:.2f}s: vehicle {follower.vehicle_id} overlaps {lead.vehicle_id} "
                f"(gap {gap:.3f} m at x={follower.position:.1f})"
            )
    return TrafficState(vehicles=tuple(result), next_id=next_id)
