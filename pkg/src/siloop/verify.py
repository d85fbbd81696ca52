"""Post-episode invariant auditing.

verify() takes a scenario and a recorded trace and checks the
guarantees the closed loop is supposed to keep: an exact time grid,
the hard safety gap, red-light compliance, the coast-only braking
budget, self-consistent work bookkeeping, lockstep determinism, and
the controller's soft-real-time budget.  Nothing raises on a bad
trace; every check lands in the report as pass or fail with its
margin spelled out.

The determinism and timing checks replay the scenario, so they need
the scenario to be runnable, not just parseable.  Both can be
switched off for quick audits of the static row invariants.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

from .harness import TraceRecord, run_episode, trace_csv
from .scenario import Scenario
from .signals import Phase, phase_at
from .vbus import BusMode

# the nose may protrude this far past a red stop line without counting
# as a violation; matches the stop-line constraint's slack resolution
RED_TOLERANCE = 0.1  # [m]

MEAN_STEP_BUDGET = 0.050  # [s] mean controller step wall time
P99_STEP_BUDGET = 0.100  # [s] 99th percentile controller step wall time

_WORK_RTOL = 1e-9


@dataclass(frozen=True)
class CheckResult:
    """One audited invariant: its name, verdict, and a margin summary."""

    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class VerifyReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def format(self) -> str:
        lines = [
            f"{'PASS' if check.passed else 'FAIL'}  {check.name}: {check.detail}"
            for check in self.checks
        ]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}  overall")
        return "\n".join(lines)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _WORK_RTOL * max(1.0, abs(a), abs(b))


def _check_time_grid(scenario: Scenario, trace: Sequence[TraceRecord]) -> CheckResult:
    dt = scenario.mpc.dt
    expected = scenario.steps
    if len(trace) != expected:
        return CheckResult(
            "time_grid", False,
            f"{len(trace)} records, scenario duration defines {expected}",
        )
    for i, rec in enumerate(trace):
        if rec.time != i * dt:
            return CheckResult(
                "time_grid", False,
                f"record {i} carries t={rec.time!r}, the grid expects {i * dt!r}",
            )
    return CheckResult("time_grid", True, f"{len(trace)} records on an exact {dt:g} s grid")


def _check_safety_gap(scenario: Scenario, trace: Sequence[TraceRecord]) -> CheckResult:
    d_min = scenario.mpc.d_min
    worst: TraceRecord | None = None
    for rec in trace:
        if worst is None or rec.radar_distance < worst.radar_distance:
            worst = rec
    if worst is None:
        return CheckResult("safety_gap", True, "no records")
    if worst.radar_distance < d_min:
        return CheckResult(
            "safety_gap", False,
            f"gap {worst.radar_distance:.3f} m < d_min {d_min:g} m at t={worst.time:.1f} s",
        )
    return CheckResult(
        "safety_gap", True,
        f"min gap {worst.radar_distance:.3f} m at t={worst.time:.1f} s, floor {d_min:g} m",
    )


def _crossing_time(
    times: Sequence[float], positions: Sequence[float], boundary: float
) -> float | None:
    """First time the position sequence reaches boundary, linearly interpolated."""
    if not times:
        return None
    if positions[0] >= boundary:
        return times[0]
    for i in range(1, len(times)):
        if positions[i] >= boundary:
            x0, x1 = positions[i - 1], positions[i]
            if x1 == x0:
                return times[i]
            frac = (boundary - x0) / (x1 - x0)
            return times[i - 1] + frac * (times[i] - times[i - 1])
    return None


def _check_red_light(scenario: Scenario, trace: Sequence[TraceRecord]) -> CheckResult:
    signals = scenario.corridor.signals
    if not signals:
        return CheckResult("red_light", True, "no signals in scenario")
    # row screen: an upcoming red must never see the line overshot
    for rec in trace:
        if rec.phase == Phase.RED.value and math.isfinite(rec.stop_line_distance):
            if rec.stop_line_distance < -RED_TOLERANCE:
                return CheckResult(
                    "red_light", False,
                    f"red stop line overshot by {-rec.stop_line_distance:.2f} m "
                    f"at t={rec.time:.1f} s",
                )
    # event screen: reconstruct each crossing instant between samples and
    # look the phase up there, so a crossing cannot hide inside one tick
    times = [rec.time for rec in trace]
    positions = [rec.position for rec in trace]
    crossed = 0
    for idx, plan in enumerate(signals):
        t_cross = _crossing_time(times, positions, plan.stop_line + RED_TOLERANCE)
        if t_cross is None:
            continue
        crossed += 1
        if phase_at(plan, t_cross) is Phase.RED:
            return CheckResult(
                "red_light", False,
                f"signal {idx} at {plan.stop_line:g} m crossed at t={t_cross:.2f} s during red",
            )
    return CheckResult(
        "red_light", True,
        f"{crossed} of {len(signals)} stop lines crossed, none during red",
    )


def _check_braking_budget(scenario: Scenario, trace: Sequence[TraceRecord]) -> CheckResult:
    if not trace:
        return CheckResult("braking_budget", True, "no records")
    traction = trace[-1].traction_work
    braking = trace[-1].braking_work
    if scenario.model_mismatch:
        # plant/model mismatch makes some corrective braking expected
        passed = braking > 0.0
        return CheckResult(
            "braking_budget", passed,
            f"mismatch on: braking work {braking:.1f} J "
            f"({'nonzero as expected' if passed else 'expected nonzero'})",
        )
    if traction > 0.0:
        share = braking / traction
    else:
        share = math.inf if braking > 0.0 else 0.0
    passed = braking <= 0.01 * traction
    return CheckResult(
        "braking_budget", passed,
        f"braking {braking:.1f} J is {100.0 * share:.4f}% of traction "
        f"{traction:.1f} J, budget 1%",
    )


def _check_bookkeeping(scenario: Scenario, trace: Sequence[TraceRecord]) -> CheckResult:
    dt = scenario.mpc.dt
    traction = 0.0
    braking = 0.0
    for rec in trace:
        traction += rec.traction * rec.velocity * dt
        braking += -rec.braking * rec.velocity * dt
        if not _close(traction, rec.traction_work) or not _close(braking, rec.braking_work):
            return CheckResult(
                "work_bookkeeping", False,
                f"cumulative work columns diverge from the row sums at t={rec.time:.1f} s",
            )
    return CheckResult(
        "work_bookkeeping", True,
        "cumulative work columns match the row-by-row sums within 1e-9 relative",
    )


def _replayable(scenario: Scenario) -> bool:
    return scenario.bus.mode is BusMode.LOCKSTEP


def _digest(csv_text: str) -> str:
    return hashlib.sha256(csv_text.encode("utf-8")).hexdigest()[:12]


def _check_timing(episode: Sequence[TraceRecord]) -> CheckResult:
    samples = sorted(
        rec.solve_time
        for rec in episode
        if rec.status != "held" and not rec.status.startswith("panic")
    )
    if not samples:
        return CheckResult("timing", False, "no controller steps to time")
    mean = sum(samples) / len(samples)
    p99 = samples[min(len(samples) - 1, max(0, math.ceil(0.99 * len(samples)) - 1))]
    passed = mean < MEAN_STEP_BUDGET and p99 < P99_STEP_BUDGET
    return CheckResult(
        "timing", passed,
        f"controller step mean {1000.0 * mean:.2f} ms (budget "
        f"{1000.0 * MEAN_STEP_BUDGET:.0f}), p99 {1000.0 * p99:.2f} ms (budget "
        f"{1000.0 * P99_STEP_BUDGET:.0f}), {len(samples)} steps",
    )


def _check_controller_health(trace: Sequence[TraceRecord]) -> CheckResult:
    panic = sum(1 for rec in trace if rec.status.startswith("panic"))
    held = sum(1 for rec in trace if rec.status == "held")
    off_optimal = sum(
        1
        for rec in trace
        if rec.status not in ("optimal", "held") and not rec.status.startswith("panic")
    )
    if panic:
        return CheckResult("controller_health", False, f"{panic} panic fallbacks")
    return CheckResult(
        "controller_health", True,
        f"0 panics, {held} held ticks, {off_optimal} steps off the optimal status",
    )


def verify(
    scenario: Scenario,
    trace: Sequence[TraceRecord],
    *,
    determinism: bool = True,
    timing: bool = True,
) -> VerifyReport:
    """Audit a trace against the scenario's closed-loop invariants.

    determinism replays the scenario twice and demands byte-identical
    CSV serializations that also match the supplied trace; it is
    skipped (reported as such) when the bus schedule is asynchronous.
    timing replays once in lockstep and audits the controller's step
    wall times.  The replay is shared between the two checks.
    """
    records = list(trace)
    checks = [
        _check_time_grid(scenario, records),
        _check_safety_gap(scenario, records),
        _check_red_light(scenario, records),
        _check_braking_budget(scenario, records),
        _check_bookkeeping(scenario, records),
        _check_controller_health(records),
    ]

    fresh = None
    if timing or (determinism and _replayable(scenario)):
        fresh = run_episode(scenario, mode="lockstep")

    if determinism:
        if not _replayable(scenario):
            checks.append(
                CheckResult(
                    "determinism", True,
                    "skipped: asynchronous bus scheduling is not replayable",
                )
            )
        else:
            again = run_episode(scenario, mode="lockstep")
            first_csv = trace_csv(fresh.records)
            again_csv = trace_csv(again.records)
            given_csv = trace_csv(records)
            if first_csv != again_csv:
                checks.append(
                    CheckResult("determinism", False, "two fresh replays differ")
                )
            elif given_csv != first_csv:
                checks.append(
                    CheckResult(
                        "determinism", False,
                        "supplied trace differs from a fresh replay "
                        f"(replay sha256 {_digest(first_csv)}, "
                        f"trace sha256 {_digest(given_csv)})",
                    )
                )
            else:
                checks.append(
                    CheckResult(
                        "determinism", True,
                        f"two replays and the supplied trace share sha256 "
                        f"{_digest(first_csv)} ({len(first_csv)} CSV bytes)",
                    )
                )

    if timing:
        checks.append(_check_timing(fresh))

    return VerifyReport(tuple(checks))
