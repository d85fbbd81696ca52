"""Fixed-time signalized corridor: stop lines, cycles, phase lookup."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Phase(enum.Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


@dataclass(frozen=True)
class SignalPlan:
    """One fixed-time signal: stop-line position [m] and cycle split [s]."""

    stop_line: float
    cycle: float
    offset: float
    green: float
    yellow: float
    red: float

    def __post_init__(self) -> None:
        if self.cycle <= 0.0:
            raise ValueError("cycle must be positive")
        for name in ("green", "yellow", "red"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} duration must be nonnegative")
        # split must tile the cycle exactly
        if abs(self.green + self.yellow + self.red - self.cycle) > 1e-9:
            raise ValueError("green + yellow + red must equal cycle")


@dataclass(frozen=True)
class Corridor:
    """Single-lane road of given length with signals at increasing positions."""

    length: float
    speed_limit: float
    signals: tuple[SignalPlan, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.length <= 0.0:
            raise ValueError("corridor length must be positive")
        if self.speed_limit <= 0.0:
            raise ValueError("speed limit must be positive")
        positions = [s.stop_line for s in self.signals]
        if any(p <= 0.0 or p > self.length for p in positions):
            raise ValueError("stop lines must lie inside the corridor")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("stop lines must be strictly increasing")


def phase_at(plan: SignalPlan, time: float) -> Phase:
    """Phase shown at an absolute time.

    The cycle-local coordinate is (time - offset) mod cycle; the split is
    laid out green, yellow, red over half-open intervals, so boundaries
    belong to the later interval's predecessor exactly once.
    """
    u = (time - plan.offset) % plan.cycle
    if u < plan.green:
        return Phase.GREEN
    if u < plan.green + plan.yellow:
        return Phase.YELLOW
    return Phase.RED


def green_window(plan: SignalPlan, time: float) -> tuple[float, float]:
    """Start and end of the current-or-next green, relative to `time`.

    During green the start is negative (the window opened -start ago) and
    the end is the time remaining; during yellow or red both point at the
    upcoming green interval.  Later windows repeat at whole cycles, so
    (start + i*cycle, end + i*cycle) enumerates them.  A signal with no
    green phase never opens: (inf, inf).
    """
    if plan.green <= 0.0:
        return float("inf"), float("inf")
    u = (time - plan.offset) % plan.cycle
    if u < plan.green:
        return -u, plan.green - u
    return plan.cycle - u, plan.cycle - u + plan.green
