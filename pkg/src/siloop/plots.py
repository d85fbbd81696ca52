"""Figure emission from closed-loop traces.

Two vector-graphics files summarize an episode.  The first stacks
time-series panels: distance to the front vehicle, ego velocity, and
wheel force with the commanded traction and braking components.  The
second gives the corridor view: ego position against time with the
red intervals of every stop line the trace saw drawn as horizontal
bars, then velocity and wheel force against position.

Everything is computed from the trace alone, so plotting needs no
scenario file: stop-line heights are recovered as position plus the
logged distance-to-stop-line, and red intervals are the time spans
over which the upcoming signal reported the red phase.

The controller and plant exchange forces; the torque axis on the force
panel is a pure relabeling through a nominal wheel radius.
"""

from __future__ import annotations

import math
import os
from typing import Sequence

from matplotlib.figure import Figure

from .harness import TraceRecord

WHEEL_RADIUS = 0.3  # [m] label-only conversion between the force and torque axes

TIME_FIGURE = "time_panels.svg"
CORRIDOR_FIGURE = "corridor_panels.svg"

_RED = "#c62828"
_LINE = "#1565c0"
_TRACTION = "#2e7d32"
_BRAKING = "#c62828"

# grouping tolerance for recovered stop-line heights; consecutive red
# records farther apart than this start a new bar
_LINE_MERGE_TOL = 1.0  # [m]


def _marker_style(count: int) -> dict:
    # a single record cannot draw a line segment; fall back to markers
    if count == 1:
        return {"marker": "o", "linestyle": "none"}
    return {}


def red_intervals(trace: Sequence[TraceRecord]) -> list[tuple[float, float, float]]:
    """Recover (stop_line_position, t_start, t_end) red spans from a trace.

    A span covers consecutive records whose upcoming signal is red and
    whose recovered stop-line height agrees; crossing into the next
    signal's approach starts a new span even inside one red phase.
    """
    spans: list[tuple[float, float, float]] = []
    current: list[float] | None = None  # [line, t_start, t_end]
    for rec in trace:
        is_red = rec.phase == "red" and math.isfinite(rec.stop_line_distance)
        if is_red:
            line = rec.position + rec.stop_line_distance
            if current is not None and abs(line - current[0]) <= _LINE_MERGE_TOL:
                current[2] = rec.time
            else:
                if current is not None:
                    spans.append(tuple(current))
                current = [line, rec.time, rec.time]
        elif current is not None:
            spans.append(tuple(current))
            current = None
    if current is not None:
        spans.append(tuple(current))
    return spans


def _time_figure(trace: Sequence[TraceRecord]) -> Figure:
    times = [r.time for r in trace]
    style = _marker_style(len(trace))

    fig = Figure(figsize=(8.0, 9.0))
    ax_d, ax_v, ax_f = fig.subplots(3, 1, sharex=True)

    ax_d.plot(times, [r.radar_distance for r in trace], color=_LINE, **style)
    ax_d.set_ylabel("front distance [m]")
    ax_d.grid(True, alpha=0.3)

    ax_v.plot(times, [r.velocity for r in trace], color=_LINE, **style)
    ax_v.set_ylabel("velocity [m/s]")
    ax_v.grid(True, alpha=0.3)

    ax_f.plot(times, [r.force for r in trace], color=_LINE, label="wheel force", **style)
    ax_f.plot(
        times, [r.traction for r in trace],
        color=_TRACTION, alpha=0.7, linewidth=0.9, label="traction command", **style,
    )
    ax_f.plot(
        times, [r.braking for r in trace],
        color=_BRAKING, alpha=0.7, linewidth=0.9, label="braking command", **style,
    )
    ax_f.set_ylabel("wheel force [N]")
    ax_f.set_xlabel("time [s]")
    ax_f.grid(True, alpha=0.3)
    ax_f.legend(loc="best", fontsize="small")
    torque = ax_f.secondary_yaxis(
        "right",
        functions=(lambda f: f * WHEEL_RADIUS, lambda tq: tq / WHEEL_RADIUS),
    )
    torque.set_ylabel("wheel torque [Nm]")

    fig.align_ylabels([ax_d, ax_v, ax_f])
    fig.tight_layout()
    return fig


def _corridor_figure(trace: Sequence[TraceRecord]) -> Figure:
    times = [r.time for r in trace]
    positions = [r.position for r in trace]
    style = _marker_style(len(trace))

    fig = Figure(figsize=(8.0, 9.0))
    ax_x, ax_v, ax_f = fig.subplots(3, 1)

    ax_x.plot(times, positions, color=_LINE, label="ego position", **style)
    spans = red_intervals(trace)
    for idx, (line, t0, t1) in enumerate(spans):
        ax_x.plot(
            [t0, t1], [line, line],
            color=_RED, linewidth=3.0, solid_capstyle="butt",
            marker="o" if t0 == t1 else "", markersize=3.0,
            label="red signal" if idx == 0 else None,
        )
    ax_x.set_xlabel("time [s]")
    ax_x.set_ylabel("position [m]")
    ax_x.grid(True, alpha=0.3)
    ax_x.legend(loc="best", fontsize="small")

    ax_v.plot(positions, [r.velocity for r in trace], color=_LINE, **style)
    ax_v.set_xlabel("position [m]")
    ax_v.set_ylabel("velocity [m/s]")
    ax_v.grid(True, alpha=0.3)

    ax_f.plot(positions, [r.force for r in trace], color=_LINE, **style)
    ax_f.set_xlabel("position [m]")
    ax_f.set_ylabel("wheel force [N]")
    ax_f.grid(True, alpha=0.3)

    fig.align_ylabels([ax_x, ax_v, ax_f])
    fig.tight_layout()
    return fig


def emit_plots(trace: Sequence[TraceRecord], out_dir: str) -> None:
    """Write the time-panel and corridor figures as SVG into out_dir."""
    if not trace:
        raise ValueError("cannot plot an empty trace")
    os.makedirs(out_dir, exist_ok=True)
    _time_figure(trace).savefig(os.path.join(out_dir, TIME_FIGURE), format="svg")
    _corridor_figure(trace).savefig(os.path.join(out_dir, CORRIDOR_FIGURE), format="svg")
