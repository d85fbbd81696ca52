"""Virtual message bus standing in for the CAN/DSRC links of a HIL rig.

Typed frames with latest-value semantics: consumers always poll the
freshest delivered sample of a kind, mirroring periodic state broadcast
on a CAN bus rather than a queued message stream.  Latency delays
visibility, drops are a seeded per-kind Bernoulli process, and both
default to off so the ideal bus is semantically transparent.

The bus is safe to use from two concurrently running actors (plant side
and controller side): one lock guards all mutation and every frame is an
immutable value.  An optional binary log records one length-prefixed
record per published message for replay (layout documented at
FrameLogWriter).
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .mpc import StepDiagnostics
from .plant import ControlInput, PlantState
from .sensing import LeadPlan, RadarReading, SpatSnapshot
from .signals import Phase


class FrameKind(enum.Enum):
    VEHICLE_STATE = "vehicle_state"
    RADAR = "radar"
    SPAT = "spat"
    LEAD_PLAN = "lead_plan"
    CONTROL = "control"
    DIAGNOSTIC = "diagnostic"


class BusMode(enum.Enum):
    LOCKSTEP = "lockstep"
    ASYNC = "async"


# stable integers for rng stream derivation and the binary log
_KIND_CODE = {
    FrameKind.VEHICLE_STATE: 0,
    FrameKind.RADAR: 1,
    FrameKind.SPAT: 2,
    FrameKind.LEAD_PLAN: 3,
    FrameKind.CONTROL: 4,
    FrameKind.DIAGNOSTIC: 5,
}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


@dataclass(frozen=True)
class DiagnosticRecord:
    """Serializable summary of one controller step for the Diagnostic frame."""

    status: str
    objective: float
    penalty: float
    iterations: int
    solve_time: float  # QP time [s]
    step_time: float  # full controller step [s]
    predictor: str
    fallback: str  # "" when the solve succeeded

    @staticmethod
    def from_step(diag: StepDiagnostics) -> "DiagnosticRecord":
        return DiagnosticRecord(
            status=diag.status.value,
            objective=diag.objective,
            penalty=diag.penalty,
            iterations=diag.iterations,
            solve_time=diag.solve_time,
            step_time=diag.step_time,
            predictor=diag.predictor,
            fallback=diag.fallback or "",
        )


Payload = PlantState | RadarReading | SpatSnapshot | LeadPlan | ControlInput | DiagnosticRecord

_PAYLOAD_TYPE = {
    FrameKind.VEHICLE_STATE: PlantState,
    FrameKind.RADAR: RadarReading,
    FrameKind.SPAT: SpatSnapshot,
    FrameKind.LEAD_PLAN: LeadPlan,
    FrameKind.CONTROL: ControlInput,
    FrameKind.DIAGNOSTIC: DiagnosticRecord,
}


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    payload: Payload
    publish_time: float  # [s]
    sequence: int
    delivery_time: float  # publish_time + latency [s]


@dataclass(frozen=True)
class PollResult:
    frame: Frame
    staleness: float  # poll time minus publish time [s]


def default_periods(dt: float = 0.1) -> dict[FrameKind, float]:
    """Broadcast periods: state/sensor/control kinds at dt, plans at 10 dt."""
    return {
        FrameKind.VEHICLE_STATE: dt,
        FrameKind.RADAR: dt,
        FrameKind.SPAT: dt,
        FrameKind.LEAD_PLAN: 10.0 * dt,
        FrameKind.CONTROL: dt,
        FrameKind.DIAGNOSTIC: dt,
    }


@dataclass(frozen=True)
class BusConfig:
    mode: BusMode = BusMode.LOCKSTEP
    periods: dict[FrameKind, float] = field(default_factory=default_periods)
    latency: float = 0.0  # [s]
    drop_probability: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for kind in FrameKind:
            if kind not in self.periods:
                raise ValueError(f"missing period for {kind.value}")
            if self.periods[kind] <= 0.0:
                raise ValueError(f"period for {kind.value} must be positive")
        if self.latency < 0.0:
            raise ValueError("latency must be nonnegative")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")

    def validate_consumer_rate(self, consumer_period: float) -> None:
        """Check that the per-tick measurement broadcasts keep up with their consumer.

        A measurement published slower than the consumer's own period would
        leave it acting on stale data every step by construction.  Intent
        broadcasts (lead plans) are allowed to be slower: they change
        slowly and staleness there degrades gracefully.
        """
        critical = (FrameKind.VEHICLE_STATE, FrameKind.RADAR, FrameKind.SPAT)
        slow = [k.value for k in critical if self.periods[k] > consumer_period + 1e-12]
        if slow:
            raise ValueError(
                f"bus periods exceed the consumer period {consumer_period}: {', '.join(slow)}"
            )


class VirtualBus:
    """Latest-value frame exchange between the plant side and the controller.

    publish() assigns the per-kind sequence number, draws the drop fate
    from that kind's own seeded stream (one draw per publish, so the
    delivered set is reproducible independently of interleaving across
    kinds), stamps delivery_time = publish_time + latency, and stores the
    frame.  poll_latest() returns the highest-sequence frame of a kind
    whose delivery_time has passed, with its staleness.
    """

    def __init__(self, config: BusConfig | None = None, log: "FrameLogWriter | None" = None):
        self.config = config if config is not None else BusConfig()
        self._lock = threading.Lock()
        self._sequences: dict[FrameKind, int] = {k: 0 for k in FrameKind}
        self._last_publish_time: dict[FrameKind, float] = {k: -np.inf for k in FrameKind}
        self._pending: dict[FrameKind, list[Frame]] = {k: [] for k in FrameKind}
        self._rng = {
            k: np.random.default_rng([self.config.rng_seed, _KIND_CODE[k]]) for k in FrameKind
        }
        self._log = log

    def publish(self, kind: FrameKind, payload: Payload, publish_time: float) -> Frame:
        """Broadcast one frame; returns it as stamped (even when dropped)."""
        if not isinstance(payload, _PAYLOAD_TYPE[kind]):
            raise TypeError(
                f"{kind.value} frame requires {_PAYLOAD_TYPE[kind].__name__}, "
                f"got {type(payload).__name__}"
            )
        with self._lock:
            if publish_time < self._last_publish_time[kind]:
                raise ValueError(
                    f"publish_time regressed for {kind.value}: "
                    f"{publish_time} after {self._last_publish_time[kind]}"
                )
            self._last_publish_time[kind] = publish_time
            sequence = self._sequences[kind]
            self._sequences[kind] = sequence + 1
            frame = Frame(
                kind=kind,
                payload=payload,
                publish_time=publish_time,
                sequence=sequence,
                delivery_time=publish_time + self.config.latency,
            )
            dropped = self._rng[kind].random() < self.config.drop_probability
            if not dropped:
                self._pending[kind].append(frame)
            if self._log is not None:
                self._log.write(frame, delivered=not dropped)
        return frame

    def poll_latest(self, kind: FrameKind, now: float) -> PollResult | None:
        """Freshest delivered frame of a kind, or None while nothing arrived."""
        with self._lock:
            frames = self._pending[kind]
            best = None
            for idx in range(len(frames) - 1, -1, -1):
                if frames[idx].delivery_time <= now:
                    best = idx
                    break
            if best is None:
                return None
            # frames older than the winner can never be polled again
            if best > 0:
                del frames[:best]
            frame = frames[0]
        return PollResult(frame=frame, staleness=now - frame.publish_time)


# Binary frame log.
#
# All fields little-endian.  File header: magic b"SILB", u16 version (== 1),
# u16 reserved (0).  Each record:
#
#   u32  length of the rest of the record in bytes
#   u8   kind code (0 vehicle_state, 1 radar, 2 spat, 3 lead_plan,
#        4 control, 5 diagnostic)
#   u8   delivered flag (0 = dropped by the bus, 1 = delivered)
#   u64  sequence
#   f64  publish_time
#   f64  delivery_time
#   ...  payload, per kind:
#        vehicle_state: f64 position, f64 velocity, f64 force, f64 time
#        radar:         f64 distance, f64 relative_velocity, u8 target_present
#        spat:          i32 signal_index, f64 distance_to_stop_line,
#                       f64 green_start, f64 green_end, f64 cycle,
#                       u16 n, n x u8 phase (0 green, 1 yellow, 2 red)
#        lead_plan:     u16 n, n x f64 times, n x f64 velocities
#        control:       f64 traction, f64 braking
#        diagnostic:    f64 objective, f64 penalty, u32 iterations,
#                       f64 solve_time, f64 step_time, then status,
#                       predictor, fallback each as u8 length + utf-8 bytes

_MAGIC = b"SILB"
_VERSION = 1
_PHASE_CODE = {Phase.GREEN: 0, Phase.YELLOW: 1, Phase.RED: 2}
_CODE_PHASE = {v: k for k, v in _PHASE_CODE.items()}


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 255:
        raise ValueError("string field longer than 255 bytes")
    return struct.pack("<B", len(raw)) + raw


def _pack_payload(payload: Payload) -> bytes:
    if isinstance(payload, PlantState):
        return struct.pack(
            "<dddd", payload.position, payload.velocity, payload.force, payload.time
        )
    if isinstance(payload, RadarReading):
        return struct.pack(
            "<ddB", payload.distance, payload.relative_velocity, int(payload.target_present)
        )
    if isinstance(payload, SpatSnapshot):
        head = struct.pack(
            "<iddddH",
            payload.signal_index,
            payload.distance_to_stop_line,
            payload.green_start,
            payload.green_end,
            payload.cycle,
            len(payload.phases),
        )
        return head + bytes(_PHASE_CODE[p] for p in payload.phases)
    if isinstance(payload, LeadPlan):
        n = len(payload.times)
        return struct.pack(f"<H{n}d{n}d", n, *payload.times, *payload.velocities)
    if isinstance(payload, ControlInput):
        return struct.pack("<dd", payload.traction, payload.braking)
    if isinstance(payload, DiagnosticRecord):
        head = struct.pack(
            "<ddIdd",
            payload.objective,
            payload.penalty,
            payload.iterations,
            payload.solve_time,
            payload.step_time,
        )
        return head + _pack_str(payload.status) + _pack_str(payload.predictor) + _pack_str(
            payload.fallback
        )
    raise TypeError(f"unsupported payload type {type(payload).__name__}")


def _unpack_str(raw: bytes, at: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<B", raw, at)
    at += 1
    return raw[at : at + n].decode("utf-8"), at + n


def _unpack_payload(kind: FrameKind, raw: bytes) -> Payload:
    if kind is FrameKind.VEHICLE_STATE:
        position, velocity, force, time = struct.unpack("<dddd", raw)
        return PlantState(position=position, velocity=velocity, force=force, time=time)
    if kind is FrameKind.RADAR:
        distance, relative_velocity, present = struct.unpack("<ddB", raw)
        return RadarReading(
            distance=distance, relative_velocity=relative_velocity, target_present=bool(present)
        )
    if kind is FrameKind.SPAT:
        signal_index, distance, green_start, green_end, cycle, n = struct.unpack_from(
            "<iddddH", raw, 0
        )
        codes = raw[struct.calcsize("<iddddH") :]
        if len(codes) != n:
            raise ValueError("spat record phase count mismatch")
        return SpatSnapshot(
            signal_index=signal_index,
            distance_to_stop_line=distance,
            phases=tuple(_CODE_PHASE[c] for c in codes),
            green_start=green_start,
            green_end=green_end,
            cycle=cycle,
        )
    if kind is FrameKind.LEAD_PLAN:
        (n,) = struct.unpack_from("<H", raw, 0)
        values = struct.unpack_from(f"<{n}d{n}d", raw, struct.calcsize("<H"))
        return LeadPlan(times=values[:n], velocities=values[n:])
    if kind is FrameKind.CONTROL:
        traction, braking = struct.unpack("<dd", raw)
        return ControlInput(traction=traction, braking=braking)
    if kind is FrameKind.DIAGNOSTIC:
        objective, penalty, iterations, solve_time, step_time = struct.unpack_from(
            "<ddIdd", raw, 0
        )
        at = struct.calcsize("<ddIdd")
        status, at = _unpack_str(raw, at)
        predictor, at = _unpack_str(raw, at)
        fallback, at = _unpack_str(raw, at)
        return DiagnosticRecord(
            status=status,
            objective=objective,
            penalty=penalty,
            iterations=iterations,
            solve_time=solve_time,
            step_time=step_time,
            predictor=predictor,
            fallback=fallback,
        )
    raise ValueError(f"unknown frame kind {kind}")


@dataclass(frozen=True)
class LoggedFrame:
    frame: Frame
    delivered: bool


class FrameLogWriter:
    """Append-only binary log of published frames (layout documented above)."""

    def __init__(self, path: str):
        self._file: BinaryIO = open(path, "wb")
        self._file.write(_MAGIC + struct.pack("<HH", _VERSION, 0))

    def write(self, frame: Frame, delivered: bool) -> None:
        body = (
            struct.pack(
                "<BBQdd",
                _KIND_CODE[frame.kind],
                int(delivered),
                frame.sequence,
                frame.publish_time,
                frame.delivery_time,
            )
            + _pack_payload(frame.payload)
        )
        self._file.write(struct.pack("<I", len(body)) + body)

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "FrameLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_frame_log(path: str) -> list[LoggedFrame]:
    """Parse a binary frame log back into frames with their delivery fate."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a frame log (bad magic)")
    version, _ = struct.unpack_from("<HH", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported frame log version {version}")
    frames: list[LoggedFrame] = []
    at = 8
    while at < len(raw):
        if at + 4 > len(raw):
            raise ValueError(f"{path}: truncated record length at byte {at}")
        (length,) = struct.unpack_from("<I", raw, at)
        at += 4
        if at + length > len(raw):
            raise ValueError(f"{path}: truncated record at byte {at}")
        body = raw[at : at + length]
        at += length
        kind_code, delivered, sequence, publish_time, delivery_time = struct.unpack_from(
            "<BBQdd", body, 0
        )
        if kind_code not in _CODE_KIND:
            raise ValueError(f"{path}: unknown kind code {kind_code}")
        kind = _CODE_KIND[kind_code]
        payload = _unpack_payload(kind, body[struct.calcsize("<BBQdd") :])
        frames.append(
            LoggedFrame(
                frame=Frame(
                    kind=kind,
                    payload=payload,
                    publish_time=publish_time,
                    sequence=sequence,
                    delivery_time=delivery_time,
                ),
                delivered=bool(delivered),
            )
        )
    return frames
