"""Closed-loop executor: scenario in, per-step trace out.

One tick advances the world simultaneously (background traffic, the
scripted lead, and the ego plant all move from the previous tick's
positions), publishes the plant state and sensor snapshots, and lets the
controller compute the next command.  The command issued against the
state published at tick n is applied by the plant during [t_n, t_n+dt],
exactly the interval the plan's first input covers, so the bus-mediated
one-sample hold introduces no measurement-to-actuation misalignment in
lockstep.

Two wirings exist on purpose: "bus" routes every exchange through the
virtual bus, "direct" hands the freshly computed values straight to the
controller.  With an ideal bus (zero latency, zero drop) the two must
produce bit-identical traces; that equivalence is an acceptance check,
so both paths share all computation and differ only in transport.

Lockstep mode is strictly single-threaded and a pure function of
(scenario, seed).  Soft-real-time mode runs the environment actor on the
wall clock and the controller in a second thread; a controller that
misses its deadline simply leaves the previous command held (zero-order
hold) and the miss is counted.
"""

from __future__ import annotations

import math
import threading
import time as _time
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .mpc import EcoAccController, MpcConfig
from .plant import ControlInput, PlantState, plant_step
from .scenario import Scenario
from .sensing import LeadPlan, RadarReading, SpatSnapshot, radar_measure, spat_snapshot
from .signals import Phase, phase_at
from .traffic import CollisionError, TargetVehicle, TrafficState, traffic_step
from .vbus import (
    BusMode,
    DiagnosticRecord,
    FrameKind,
    FrameLogWriter,
    VirtualBus,
)

EGO_ID = -1
LEAD_ID = -2

# a frame counts as stale once it is older than its period plus the bus
# latency plus half a tick of slack
_STALE_SLACK = 0.5


@dataclass(frozen=True)
class TraceRecord:
    """One plant step of the closed loop."""

    time: float  # [s], exactly step * dt
    position: float  # ego front bumper [m]
    velocity: float  # [m/s]
    force: float  # delivered wheel force [N]
    traction: float  # commanded F_t this tick [N]
    braking: float  # commanded F_b this tick [N]
    radar_distance: float  # [m], == max range when clear
    stop_line_distance: float  # [m], nan past the last signal
    phase: str  # next signal's phase, "" when none ahead
    status: str  # solver status, "held" on stale inputs, "panic:..." on errors
    objective: float  # tracking+braking cost, nan when unsolved
    solve_time: float  # full controller step wall time [s]
    traction_work: float  # cumulative sum F_t * v * dt [J]
    braking_work: float  # cumulative sum -F_b * v * dt [J]


class EpisodeResult(Sequence[TraceRecord]):
    """Trace plus episode-level counters; indexes like a list of records."""

    def __init__(
        self,
        records: list[TraceRecord],
        deadline_misses: int,
        wall_time: float,
        mode: str,
        wiring: str,
    ):
        self.records = records
        self.deadline_misses = deadline_misses
        self.wall_time = wall_time
        self.mode = mode
        self.wiring = wiring

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)


# sentinel published when no signal lies ahead, so the Spat broadcast
# keeps its cadence and staleness stays meaningful end to end
_NO_SIGNAL = SpatSnapshot(
    signal_index=-1,
    distance_to_stop_line=math.inf,
    phases=(),
    green_start=0.0,
    green_end=math.inf,
    cycle=math.inf,
)


@dataclass
class _World:
    """Mutable simulation state shared by the wirings."""

    scenario: Scenario
    mismatch: bool
    rng: np.random.Generator
    ego: PlantState
    traffic: TrafficState
    lead_present: bool
    held: ControlInput = field(default_factory=ControlInput)

    @staticmethod
    def create(scenario: Scenario, mismatch: bool | None, seed: int | None) -> "_World":
        use_seed = scenario.seed if seed is None else seed
        ego = PlantState(position=scenario.ego.position, velocity=scenario.ego.velocity)
        vehicles = [
            TargetVehicle(EGO_ID, scenario.ego.position, scenario.ego.velocity, length=4.5)
        ]
        lead_present = scenario.lead is not None
        if scenario.lead is not None:
            vehicles.append(
                TargetVehicle(
                    LEAD_ID,
                    scenario.ego.position + scenario.lead.initial_gap + scenario.lead.length,
                    scenario.lead.plan.velocity_at(0.0),
                    length=scenario.lead.length,
                )
            )
        return _World(
            scenario=scenario,
            mismatch=scenario.model_mismatch if mismatch is None else mismatch,
            rng=np.random.default_rng(use_seed),
            ego=ego,
            traffic=TrafficState(vehicles=tuple(vehicles), next_id=0),
            lead_present=lead_present,
        )

    def advance(self, t_prev: float, t_now: float) -> None:
        """Move everything from t_prev to t_now off the previous positions."""
        sc = self.scenario
        dt = sc.mpc.dt
        self.traffic = traffic_step(
            self.traffic,
            sc.corridor,
            sc.demand,
            sc.idm,
            t_prev,
            dt,
            self.rng,
            frozen_ids=frozenset({EGO_ID, LEAD_ID}),
        )
        self.ego = replace(
            plant_step(self.ego, self.held, dt, sc.plant_params(self.mismatch)),
            time=t_now,
        )
        updated = []
        for veh in self.traffic.vehicles:
            if veh.vehicle_id == EGO_ID:
                updated.append(replace(veh, position=self.ego.position, velocity=self.ego.velocity))
            elif veh.vehicle_id == LEAD_ID:
                if sc.lead is not None and sc.lead.remove_at is not None and t_now >= sc.lead.remove_at:
                    self.lead_present = False
                    continue
                updated.append(
                    replace(
                        veh,
                        position=veh.position + dt * veh.velocity,
                        velocity=sc.lead.plan.velocity_at(t_now),
                    )
                )
            else:
                updated.append(veh)
        self.traffic = replace(self.traffic, vehicles=tuple(updated))
        self._check_overlaps(t_now)

    def _check_overlaps(self, t_now: float) -> None:
        ordered = sorted(self.traffic.vehicles, key=lambda veh: veh.position, reverse=True)
        for lead, follower in zip(ordered, ordered[1:]):
            gap = lead.position - lead.length - follower.position
            if gap <= 0.0:
                raise CollisionError(
                    f"t={t_now:.2f}s: vehicle {follower.vehicle_id} overlaps "
                    f"{lead.vehicle_id} (gap {gap:.3f} m)"
                )

    def measure(self, t_now: float) -> tuple[RadarReading, SpatSnapshot | None]:
        sc = self.scenario
        radar = radar_measure(
            self.ego.position,
            self.ego.velocity,
            self.traffic.vehicles,
            max_range=sc.mpc.radar_max_range,
            ego_id=EGO_ID,
        )
        spat = spat_snapshot(self.ego.position, sc.corridor, t_now, sc.mpc.horizon, sc.mpc.dt)
        return radar, spat

    def next_phase_name(self, t_now: float) -> tuple[float, str]:
        """Distance to the next stop line and its current phase, for the trace."""
        for plan in self.scenario.corridor.signals:
            if plan.stop_line >= self.ego.position:
                return plan.stop_line - self.ego.position, phase_at(plan, t_now).value
        return math.nan, ""


def _period_steps(period: float, dt: float) -> int:
    return max(1, int(round(period / dt)))


def run_episode(
    scenario: Scenario,
    *,
    mode: str | None = None,
    wiring: str = "bus",
    seed: int | None = None,
    mismatch: bool | None = None,
    frame_log: str | None = None,
) -> EpisodeResult:
    """Run one closed-loop episode and return its trace.

    mode None follows the scenario's bus mode (Lockstep -> "lockstep",
    Async -> "realtime"); pass "lockstep" or "realtime" to override.
    wiring "bus" exchanges everything over the virtual bus, "direct"
    bypasses it; with an ideal bus both produce identical traces.
    seed and mismatch override the scenario's values when given.
    frame_log writes the binary frame log to that path (bus wiring only).
    """
    if wiring not in ("bus", "direct"):
        raise ValueError("wiring must be 'bus' or 'direct'")
    if mode is None:
        mode = "lockstep" if scenario.bus.mode is BusMode.LOCKSTEP else "realtime"
    if mode not in ("lockstep", "realtime"):
        raise ValueError("mode must be 'lockstep' or 'realtime'")
    if frame_log is not None and wiring != "bus":
        raise ValueError("frame_log requires bus wiring")

    if mode == "realtime":
        return _run_realtime(scenario, seed=seed, mismatch=mismatch, frame_log=frame_log)
    return _run_lockstep(
        scenario, wiring=wiring, seed=seed, mismatch=mismatch, frame_log=frame_log
    )


def _controller_inputs_from_bus(
    bus: VirtualBus, config: MpcConfig, t: float, scenario: Scenario
) -> tuple[PlantState, RadarReading, SpatSnapshot | None, LeadPlan | None] | None:
    """Poll the freshest frames; None when a critical kind is stale or missing."""
    latency = scenario.bus.latency
    periods = scenario.bus.periods

    def fresh(kind: FrameKind):
        polled = bus.poll_latest(kind, t)
        if polled is None:
            return None
        limit = periods[kind] + latency + _STALE_SLACK * config.dt
        if polled.staleness > limit:
            return None
        return polled.frame.payload

    state = fresh(FrameKind.VEHICLE_STATE)
    radar = fresh(FrameKind.RADAR)
    spat = fresh(FrameKind.SPAT)
    if state is None or radar is None or spat is None:
        return None
    if spat.signal_index < 0:
        spat = None
    plan = fresh(FrameKind.LEAD_PLAN)
    return state, radar, spat, plan


def _run_lockstep(
    scenario: Scenario,
    *,
    wiring: str,
    seed: int | None,
    mismatch: bool | None,
    frame_log: str | None,
) -> EpisodeResult:
    start = _time.perf_counter()
    sc = scenario
    dt = sc.mpc.dt
    steps = sc.steps
    world = _World.create(sc, mismatch, seed)
    controller = EcoAccController(sc.mpc)

    log = FrameLogWriter(frame_log) if frame_log is not None else None
    bus = VirtualBus(sc.bus, log=log) if wiring == "bus" else None
    plan_every = _period_steps(sc.bus.periods[FrameKind.LEAD_PLAN], dt)

    records: list[TraceRecord] = []
    traction_work = 0.0
    braking_work = 0.0
    try:
        for n in range(steps):
            t = n * dt
            if n > 0:
                world.advance((n - 1) * dt, t)

            radar, spat = world.measure(t)
            if bus is not None:
                bus.publish(FrameKind.VEHICLE_STATE, world.ego, t)
                bus.publish(FrameKind.RADAR, radar, t)
                bus.publish(FrameKind.SPAT, spat if spat is not None else _NO_SIGNAL, t)
                if world.lead_present and sc.lead is not None and n % plan_every == 0:
                    bus.publish(FrameKind.LEAD_PLAN, sc.lead.plan, t)
                inputs = _controller_inputs_from_bus(bus, sc.mpc, t, sc)
            else:
                plan = sc.lead.plan if (sc.lead is not None and world.lead_present) else None
                inputs = (world.ego, radar, spat, plan)

            if inputs is None:
                status = "held"
                objective = math.nan
                step_time = 0.0
                control = world.held
            else:
                state_in, radar_in, spat_in, plan_in = inputs
                if sc.predictor != "exact":
                    plan_in = None
                try:
                    control, diag = controller.controller_step(
                        state_in, radar_in, spat_in, plan_in, t
                    )
                    status = diag.status.value if diag.fallback is None else diag.fallback
                    objective = diag.objective
                    step_time = diag.step_time
                    if bus is not None:
                        bus.publish(FrameKind.CONTROL, control, t)
                        bus.publish(FrameKind.DIAGNOSTIC, DiagnosticRecord.from_step(diag), t)
                except CollisionError:
                    raise
                except Exception as err:  # controller panic: hold and keep running
                    control = world.held
                    status = f"panic:{type(err).__name__}"
                    objective = math.nan
                    step_time = 0.0

            traction_work += control.traction * world.ego.velocity * dt
            braking_work += -control.braking * world.ego.velocity * dt
            line_dist, phase_name = world.next_phase_name(t)
            records.append(
                TraceRecord(
                    time=t,
                    position=world.ego.position,
                    velocity=world.ego.velocity,
                    force=world.ego.force,
                    traction=control.traction,
                    braking=control.braking,
                    radar_distance=radar.distance,
                    stop_line_distance=line_dist,
                    phase=phase_name,
                    status=status,
                    objective=objective,
                    solve_time=step_time,
                    traction_work=traction_work,
                    braking_work=braking_work,
                )
            )
            world.held = control
    finally:
        if log is not None:
            log.close()

    return EpisodeResult(
        records=records,
        deadline_misses=0,
        wall_time=_time.perf_counter() - start,
        mode="lockstep",
        wiring=wiring,
    )


def _run_realtime(
    scenario: Scenario,
    *,
    seed: int | None,
    mismatch: bool | None,
    frame_log: str | None,
) -> EpisodeResult:
    """Two actors on the wall clock, exchanging frames only over the bus.

    The environment actor steps the world every dt of wall time and
    applies whatever ControlFrame is freshest (zero-order hold).  The
    controller actor reacts to each new VehicleState frame; if its step
    overruns dt it misses that tick's deadline, the hold covers it, and
    the miss is counted.
    """
    start = _time.perf_counter()
    sc = scenario
    dt = sc.mpc.dt
    steps = sc.steps
    world = _World.create(sc, mismatch, seed)
    controller = EcoAccController(sc.mpc)

    log = FrameLogWriter(frame_log) if frame_log is not None else None
    bus = VirtualBus(sc.bus, log=log)
    plan_every = _period_steps(sc.bus.periods[FrameKind.LEAD_PLAN], dt)

    stop = threading.Event()
    misses = 0
    records: list[TraceRecord] = []
    failure: list[BaseException] = []

    def controller_actor() -> None:
        nonlocal misses
        last_seq = -1
        while not stop.is_set():
            polled = bus.poll_latest(FrameKind.VEHICLE_STATE, _time.perf_counter() - start)
            if polled is None or polled.frame.sequence == last_seq:
                _time.sleep(dt / 20.0)
                continue
            last_seq = polled.frame.sequence
            t = polled.frame.publish_time
            inputs = _controller_inputs_from_bus(bus, sc.mpc, t, sc)
            if inputs is None:
                continue
            state_in, radar_in, spat_in, plan_in = inputs
            if sc.predictor != "exact":
                plan_in = None
            tic = _time.perf_counter()
            try:
                control, diag = controller.controller_step(state_in, radar_in, spat_in, plan_in, t)
            except Exception:
                continue  # hold covers it
            took = _time.perf_counter() - tic
            if took > dt:
                misses += 1
            bus.publish(FrameKind.CONTROL, control, t + min(took, 10.0 * dt))
            bus.publish(FrameKind.DIAGNOSTIC, DiagnosticRecord.from_step(diag), t)

    worker = threading.Thread(target=controller_actor, name="controller", daemon=True)
    worker.start()

    traction_work = 0.0
    braking_work = 0.0
    next_wall = _time.perf_counter()
    try:
        for n in range(steps):
            t = n * dt
            if n > 0:
                polled = bus.poll_latest(FrameKind.CONTROL, _time.perf_counter() - start)
                if polled is not None:
                    world.held = polled.frame.payload
                world.advance((n - 1) * dt, t)
            radar, spat = world.measure(t)
            bus.publish(FrameKind.VEHICLE_STATE, world.ego, t)
            bus.publish(FrameKind.RADAR, radar, t)
            bus.publish(FrameKind.SPAT, spat if spat is not None else _NO_SIGNAL, t)
            if world.lead_present and sc.lead is not None and n % plan_every == 0:
                bus.publish(FrameKind.LEAD_PLAN, sc.lead.plan, t)

            control = world.held
            traction_work += control.traction * world.ego.velocity * dt
            braking_work += -control.braking * world.ego.velocity * dt
            line_dist, phase_name = world.next_phase_name(t)
            records.append(
                TraceRecord(
                    time=t,
                    position=world.ego.position,
                    velocity=world.ego.velocity,
                    force=world.ego.force,
                    traction=control.traction,
                    braking=control.braking,
                    radar_distance=radar.distance,
                    stop_line_distance=line_dist,
                    phase=phase_name,
                    status="realtime",
                    objective=math.nan,
                    solve_time=math.nan,
                    traction_work=traction_work,
                    braking_work=braking_work,
                )
            )
            next_wall += dt
            delay = next_wall - _time.perf_counter()
            if delay > 0:
                _time.sleep(delay)
    finally:
        stop.set()
        worker.join(timeout=5.0)
        if log is not None:
            log.close()

    if failure:
        raise failure[0]
    return EpisodeResult(
        records=records,
        deadline_misses=misses,
        wall_time=_time.perf_counter() - start,
        mode="realtime",
        wiring="bus",
    )


# Trace persistence: CSV with a fixed column order, full float precision
# (repr round trip), one row per record.  Timing is deliberately not a
# column: two runs of the same scenario and seed must serialize to
# byte-identical files, and wall-clock measurements never repeat.  The
# in-memory records and the diagnostic frames in the binary log keep
# per-step timing for reporting.

_COLUMNS = (
    "time",
    "position",
    "velocity",
    "force",
    "traction",
    "braking",
    "radar_distance",
    "stop_line_distance",
    "phase",
    "status",
    "objective",
    "traction_work",
    "braking_work",
)
_FLOAT_COLUMNS = frozenset(_COLUMNS) - {"phase", "status"}


def trace_csv(records: Sequence[TraceRecord]) -> str:
    """Render the trace as CSV text; floats keep full round-trip precision."""
    lines = [",".join(_COLUMNS)]
    for rec in records:
        cells = []
        for col in _COLUMNS:
            value = getattr(rec, col)
            cells.append(repr(float(value)) if col in _FLOAT_COLUMNS else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_trace(records: Sequence[TraceRecord], path: str) -> None:
    """Write the trace as CSV; floats keep full round-trip precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(trace_csv(records))


def read_trace(path: str) -> list[TraceRecord]:
    """Read a trace CSV back; the unpersisted timing field reads as nan."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != ",".join(_COLUMNS):
        raise ValueError(f"{path}: not a trace file (bad or missing header)")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(_COLUMNS)} columns, got {len(cells)}")
        values: dict[str, object] = {"solve_time": math.nan}
        for col, cell in zip(_COLUMNS, cells):
            values[col] = float(cell) if col in _FLOAT_COLUMNS else cell
        records.append(TraceRecord(**values))
    return records
