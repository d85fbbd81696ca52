"""Scenario files: a sectioned key-value format and its loader.

Grammar (documented here and in the README):

  - ``#`` starts a comment, full-line or after a value; blank lines are
    ignored.
  - ``[section]`` opens a section; ``key = value`` lines belong to the
    open section.
  - Sections: ``[scenario]`` ``[corridor]`` ``[signal]`` (repeatable, in
    stop-line order) ``[demand]`` ``[idm]`` ``[plant]`` ``[mpc]``
    ``[bus]`` ``[ego]`` ``[lead]``.  All except ``[signal]`` may appear
    at most once.
  - Values: floats (``1.5``, ``1e-4``), integers, ``on``/``off``,
    enum words, ``none``, and comma-separated float lists.

Every parse error carries the source name and line number, and every
violated invariant of a built sub-config is rephrased with the section
and line it came from, so a bad file points at itself.
"""

from __future__ import annotations

import os.path
from dataclasses import dataclass, field
from importlib import resources

from .mpc import MpcConfig
from .plant import PlantParams
from .sensing import LeadPlan
from .signals import Corridor, SignalPlan
from .traffic import IdmParams, TrafficDemand
from .vbus import BusConfig, BusMode, FrameKind, default_periods


class ScenarioError(ValueError):
    """Parse or validation failure, message includes source:line."""


@dataclass(frozen=True)
class EgoStart:
    position: float = 0.0
    velocity: float = 0.0


@dataclass(frozen=True)
class LeadSpec:
    """A scripted lead vehicle driving a piecewise-constant velocity plan.

    The plan both moves the lead and is broadcast on the bus; whether the
    controller trusts it is the scenario's predictor flag.  remove_at
    despawns the lead mid-episode (the radar then saturates at max
    range), reproducing a lost-target test.
    """

    initial_gap: float
    plan: LeadPlan
    length: float = 4.5
    remove_at: float | None = None


@dataclass(frozen=True)
class Scenario:
    corridor: Corridor
    demand: TrafficDemand
    idm: IdmParams
    plant: PlantParams  # nominal plant == the controller's prediction model
    mismatch_tau: float  # actuator lag the true plant has when mismatch is on
    mpc: MpcConfig
    bus: BusConfig
    ego: EgoStart
    lead: LeadSpec | None
    duration: float
    seed: int
    model_mismatch: bool
    predictor: str  # "exact" | "worst_case"
    name: str = "scenario"

    def plant_params(self, mismatch: bool | None = None) -> PlantParams:
        """Parameters the true plant runs with.

        Under mismatch the actuator lag differs from what the controller's
        prediction model believes; everything else stays shared.
        """
        on = self.model_mismatch if mismatch is None else mismatch
        if not on:
            return self.plant
        return PlantParams(
            mass=self.plant.mass,
            tau=self.mismatch_tau,
            c0=self.plant.c0,
            c1=self.plant.c1,
            c2=self.plant.c2,
            force_rate_limit=self.plant.force_rate_limit,
        )

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.mpc.dt))


def _to_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"expected a number, got {raw!r}") from None


def _to_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"expected an integer, got {raw!r}") from None


def _to_bool(raw: str) -> bool:
    if raw == "on":
        return True
    if raw == "off":
        return False
    raise ValueError(f"expected on or off, got {raw!r}")


def _to_float_or_none(raw: str) -> float | None:
    if raw == "none":
        return None
    return _to_float(raw)


def _to_float_list(raw: str) -> tuple[float, ...]:
    if not raw.strip():
        return ()
    return tuple(_to_float(part.strip()) for part in raw.split(","))


_SECTION_KEYS: dict[str, dict[str, object]] = {
    "scenario": {
        "duration": _to_float,
        "seed": _to_int,
        "model_mismatch": _to_bool,
        "predictor": str,
    },
    "corridor": {"length": _to_float, "speed_limit": _to_float},
    "signal": {
        "stop_line": _to_float,
        "cycle": _to_float,
        "offset": _to_float,
        "green": _to_float,
        "yellow": _to_float,
        "red": _to_float,
    },
    "demand": {
        "entry_rate": _to_float,
        "entry_speed": _to_float,
        "turn_probability": _to_float_list,
        "side_rates": _to_float_list,
        "vehicle_length": _to_float,
    },
    "idm": {
        "max_accel": _to_float,
        "comfort_decel": _to_float,
        "headway": _to_float,
        "min_spacing": _to_float,
        "hard_braking": _to_float,
        "desired_speed": _to_float,
    },
    "plant": {
        "mass": _to_float,
        "tau": _to_float,
        "mismatch_tau": _to_float,
        "c0": _to_float,
        "c1": _to_float,
        "c2": _to_float,
        "force_rate_limit": _to_float_or_none,
    },
    "mpc": {
        "horizon": _to_int,
        "dt": _to_float,
        "q_weight": _to_float,
        "b_weight": _to_float,
        "v_des": _to_float,
        "d_min": _to_float,
        "v_min": _to_float,
        "v_max": _to_float,
        "f_max": _to_float,
        "f_min": _to_float,
        "brake_assumption": _to_float,
        "radar_max_range": _to_float,
        "coast_ref_speed": _to_float,
        "coast_steps": _to_int,
        "coast_grid": _to_int,
        "coast_margin": _to_float,
        "slack_penalty": _to_float,
        "slack_penalty_quad": _to_float,
        "envelope_penalty": _to_float,
        "envelope_penalty_quad": _to_float,
        "envelope_segments": _to_int,
        "green_entry_margin": _to_float,
        "green_pace_floor": _to_float,
        "qp_eps": _to_float,
        "qp_max_iter": _to_int,
    },
    "bus": {
        "mode": str,
        "latency": _to_float,
        "drop_probability": _to_float,
        "rng_seed": _to_int,
        **{f"period_{kind.value}": _to_float for kind in FrameKind},
    },
    "ego": {"position": _to_float, "velocity": _to_float},
    "lead": {
        "initial_gap": _to_float,
        "plan_times": _to_float_list,
        "plan_velocities": _to_float_list,
        "length": _to_float,
        "remove_at": _to_float_or_none,
    },
}


@dataclass
class _Section:
    name: str
    line: int
    values: dict[str, object] = field(default_factory=dict)
    key_lines: dict[str, int] = field(default_factory=dict)


def _tokenize(text: str, source: str) -> list[_Section]:
    sections: list[_Section] = []
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            name = line[1:-1].strip()
            if name not in _SECTION_KEYS:
                raise ScenarioError(f"{source}:{lineno}: unknown section [{name}]")
            if name != "signal" and any(s.name == name for s in sections):
                raise ScenarioError(f"{source}:{lineno}: duplicate section [{name}]")
            current = _Section(name=name, line=lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise ScenarioError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        if current is None:
            raise ScenarioError(f"{source}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        table = _SECTION_KEYS[current.name]
        if key not in table:
            raise ScenarioError(f"{source}:{lineno}: unknown key {key!r} in [{current.name}]")
        if key in current.values:
            raise ScenarioError(f"{source}:{lineno}: duplicate key {key!r} in [{current.name}]")
        convert = table[key]
        try:
            current.values[key] = convert(value)
        except ValueError as err:
            raise ScenarioError(f"{source}:{lineno}: {key}: {err}") from None
        current.key_lines[key] = lineno
    return sections


def _build(factory, values: dict, source: str, line: int, what: str):
    try:
        return factory(**values)
    except (ValueError, TypeError) as err:
        raise ScenarioError(f"{source}:{line}: {what}: {err}") from None


def parse_scenario(text: str, source: str = "scenario") -> Scenario:
    """Parse and fully validate one scenario file."""
    sections = _tokenize(text, source)
    by_name = {s.name: s for s in sections if s.name != "signal"}
    signals = [s for s in sections if s.name == "signal"]

    for required in ("scenario", "corridor", "ego"):
        if required not in by_name:
            raise ScenarioError(f"{source}: missing required section [{required}]")

    def section_values(name: str) -> dict:
        return dict(by_name[name].values) if name in by_name else {}

    def section_line(name: str) -> int:
        return by_name[name].line if name in by_name else 0

    top = section_values("scenario")
    if "duration" not in top:
        raise ScenarioError(f"{source}:{section_line('scenario')}: [scenario] needs duration")
    duration = top["duration"]
    if duration < 0.0:
        raise ScenarioError(f"{source}:{section_line('scenario')}: duration must be >= 0")
    seed = top.get("seed", 0)
    model_mismatch = top.get("model_mismatch", False)
    predictor = top.get("predictor", "worst_case")
    if predictor not in ("exact", "worst_case"):
        raise ScenarioError(
            f"{source}:{by_name['scenario'].key_lines.get('predictor', section_line('scenario'))}: "
            f"predictor must be exact or worst_case, got {predictor!r}"
        )

    plans = []
    for index, sec in enumerate(signals):
        plan = _build(SignalPlan, dict(sec.values), source, sec.line, f"signal {index + 1}")
        plans.append(plan)
    corridor = _build(
        Corridor,
        {**section_values("corridor"), "signals": tuple(plans)},
        source,
        section_line("corridor"),
        "corridor",
    )

    demand = _build(TrafficDemand, section_values("demand"), source, section_line("demand"), "demand")
    n_signals = len(corridor.signals)
    for key in ("turn_probability", "side_rates"):
        values = getattr(demand, key)
        if len(values) > n_signals:
            raise ScenarioError(
                f"{source}:{section_line('demand')}: {key} has {len(values)} entries "
                f"but the corridor has {n_signals} signals"
            )
    idm = _build(IdmParams, section_values("idm"), source, section_line("idm"), "idm")

    plant_values = section_values("plant")
    mismatch_tau = plant_values.pop("mismatch_tau", None)
    plant = _build(PlantParams, plant_values, source, section_line("plant"), "plant")
    if mismatch_tau is None:
        mismatch_tau = plant.tau
    if mismatch_tau <= 0.0:
        raise ScenarioError(f"{source}:{section_line('plant')}: mismatch_tau must be positive")

    mpc = _build(
        MpcConfig,
        {**section_values("mpc"), "model": plant},
        source,
        section_line("mpc"),
        "mpc",
    )

    bus_values = section_values("bus")
    if "mode" in bus_values:
        raw_mode = bus_values.pop("mode")
        try:
            bus_values["mode"] = BusMode(raw_mode)
        except ValueError:
            raise ScenarioError(
                f"{source}:{by_name['bus'].key_lines['mode']}: "
                f"mode must be lockstep or async, got {raw_mode!r}"
            ) from None
    periods = default_periods(mpc.dt)
    for kind in FrameKind:
        key = f"period_{kind.value}"
        if key in bus_values:
            periods[kind] = bus_values.pop(key)
    bus = _build(
        BusConfig, {**bus_values, "periods": periods}, source, section_line("bus"), "bus"
    )
    try:
        bus.validate_consumer_rate(mpc.dt)
    except ValueError as err:
        raise ScenarioError(f"{source}:{section_line('bus')}: {err}") from None

    ego = _build(EgoStart, section_values("ego"), source, section_line("ego"), "ego")
    if not 0.0 <= ego.position < corridor.length:
        raise ScenarioError(
            f"{source}:{section_line('ego')}: ego position {ego.position} outside "
            f"the corridor [0, {corridor.length})"
        )
    if ego.velocity < 0.0:
        raise ScenarioError(f"{source}:{section_line('ego')}: ego velocity must be >= 0")

    lead = None
    if "lead" in by_name:
        lv = section_values("lead")
        line = section_line("lead")
        times = lv.pop("plan_times", (0.0,))
        velocities = lv.pop("plan_velocities", None)
        if velocities is None:
            raise ScenarioError(f"{source}:{line}: [lead] needs plan_velocities")
        plan = _build(
            LeadPlan, {"times": times, "velocities": velocities}, source, line, "lead plan"
        )
        if any(v < 0.0 for v in plan.velocities):
            raise ScenarioError(f"{source}:{line}: lead velocities must be >= 0")
        lead = _build(LeadSpec, {**lv, "plan": plan}, source, line, "lead")
        if lead.initial_gap <= 0.0:
            raise ScenarioError(f"{source}:{line}: lead initial_gap must be positive")
        if lead.remove_at is not None and lead.remove_at < 0.0:
            raise ScenarioError(f"{source}:{line}: lead remove_at must be >= 0")

    return Scenario(
        corridor=corridor,
        demand=demand,
        idm=idm,
        plant=plant,
        mismatch_tau=mismatch_tau,
        mpc=mpc,
        bus=bus,
        ego=ego,
        lead=lead,
        duration=duration,
        seed=seed,
        model_mismatch=model_mismatch,
        predictor=predictor,
        name=os.path.splitext(os.path.basename(source))[0],
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    return parse_scenario(text, source=path)


def bundled_scenario(name: str) -> Scenario:
    """Load a scenario shipped with the package ("catchup" or "urban")."""
    filename = name if name.endswith(".scn") else f"{name}.scn"
    ref = resources.files("siloop").joinpath("scenarios").joinpath(filename)
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ScenarioError(f"no bundled scenario named {name!r}") from None
    return parse_scenario(text, source=filename)
