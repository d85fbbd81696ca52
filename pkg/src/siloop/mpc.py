"""Eco-driving adaptive cruise MPC over a condensed convex QP.

Per solve, the nonlinear road load is linearized about the measured ego
velocity, the resulting affine dynamics are condensed (states eliminated
by forward substitution, decision variables are the stacked wheel-force
inputs plus constraint slacks), and the QP is handed to the in-package
operator-splitting solver.  The applied command is the first input of
the receding horizon; the shifted solution warm-starts the next solve.

Safety gap and stop-line rows are softened with a large linear penalty
so a measurement that starts inside the constraint set cannot make the
problem unsolvable; input boxes, velocity bounds and the terminal
coasting envelope stay hard.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .coasting import CoastingSet, compute_coasting_set
from .plant import ControlInput, PlantParams, PlantState
from .qp import QpProblem, QpResult, SolverStatus, solve_qp
from .sensing import (
    FrontPrediction,
    LeadPlan,
    RadarReading,
    SpatSnapshot,
    constant_prediction,
    predict_front_exact,
    predict_front_worst_case,
)
from .signals import Phase

_ACTIVE_DUAL_TOL = 1e-6

# Inputs enter the QP in kilonewtons.  In newtons the traction direction has
# cost curvature ~1e-7 against box bounds thousands wide, and the splitting
# solver creeps along that valley for ~1e9 iterations; equilibration cannot
# see it because the bounds, not the matrix columns, carry the bad scale.
_INPUT_SCALE = 1e3


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20  # prediction steps
    dt: float = 0.1  # [s]
    q_weight: float = 1.0  # velocity tracking weight
    b_weight: float = 1e-4  # braking effort weight
    v_des: float = 13.9  # [m/s]
    d_min: float = 5.0  # minimum bumper gap [m]
    v_min: float = 0.0  # [m/s]
    v_max: float = 20.0  # [m/s]
    f_max: float = 4000.0  # traction bound [N]
    f_min: float = -8000.0  # braking bound [N]
    model: PlantParams = field(default_factory=PlantParams)  # prediction model
    brake_assumption: float = 6.0  # assumed worst-case front deceleration [m/s^2]
    radar_max_range: float = 150.0  # [m]
    # Front speed the coasting envelope certifies against.  Riding the
    # envelope down toward a front at speed w demands deceleration
    # a_coast * (v - w) / (v - ref); keeping ref strictly below the speeds
    # the ego settles behind keeps that ratio < 1, so the ride needs no
    # brake at all.  At ref == w it is exactly marginal and every model
    # imperfection tips into trim braking.
    coast_ref_speed: float = 9.0
    coast_steps: int = 600  # coasting rollout cap
    coast_grid: int = 32  # envelope segments
    coast_margin: float = 0.5  # padding on the gap table [m]
    slack_penalty: float = 1e6  # linear penalty per meter of softened violation
    # quadratic companion to the linear penalty (per meter^2).  The linear
    # term alone leaves the slack directions with zero curvature, which
    # makes the QP a partial LP and destabilizes both the splitting solver
    # and the active-set polish; the quadratic term adds strict convexity
    # without weakening the exact-penalty property of the linear term.
    slack_penalty_quad: float = 1e6
    # Per-step coasting-envelope rows get their own, much gentler slack.
    # The early stages carry almost no input authority (the commanded
    # force reaches velocity two stages later), so a safety-grade penalty
    # there turns millimeter boundary jitter into full-scale brake/throttle
    # slams.  The envelope spring only has to beat the tracking pressure
    # pushing into the boundary, about 2*q_weight*(v_des - v)/slope, a
    # single-digit number here; 100 binds it firmly in the nominal optimum
    # while shedding transient penetrations for a negligible price.
    envelope_penalty: float = 100.0
    envelope_penalty_quad: float = 100.0
    # chord count for the per-step envelope rows; the terminal row keeps
    # the full-resolution table, the per-step copies use coarse chords
    # (still conservative for a convex table) to keep the row count down
    envelope_segments: int = 8
    # Green-window pacing.  The phase schedule only reaches horizon*dt
    # ahead, far less than the braking distance from cruise, so by the
    # time a red enters the schedule the stop already costs a hard brake.
    # The published green window reaches arbitrarily far: when free-flow
    # arrival at the stop line would beat the green opening, the approach
    # speed is capped at distance / (opening + margin) so the vehicle
    # glides in just as the light turns.  The margin must exceed
    # horizon*dt: the stop-line rows forbid crossing at EVERY predicted
    # step while any red is in view, so a crossing planned sooner than
    # one horizon after the opening gets braked during the final
    # approach.  The excess over horizon*dt absorbs the pacing error of
    # realizing the cap through the force lag.
    green_entry_margin: float = 3.0  # [s] arrive this long after the green opens
    green_pace_floor: float = 2.0  # [m/s] never pace below this; stop rows take over
    qp_eps: float = 1e-4
    qp_max_iter: int = 4000

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if not self.v_min <= self.v_des <= self.v_max:
            raise ValueError("need v_min <= v_des <= v_max")
        if self.f_max < 0.0 or self.f_min > 0.0:
            raise ValueError("need f_max >= 0 and f_min <= 0")
        if self.d_min <= 0.0:
            raise ValueError("d_min must be positive")


@dataclass(frozen=True)
class PredictionState:
    """Stage state of the prediction model."""

    gap: float  # bumper gap to the (possibly virtual) front vehicle [m]
    velocity: float  # [m/s]
    force: float  # delivered wheel force [N]
    stop_line: float | None = None  # distance to the next stop line [m]


def prediction_model_f(
    state: PredictionState,
    control: ControlInput,
    front_velocity: float,
    vbar: float,
    config: MpcConfig,
) -> PredictionState:
    """One step of the affine prediction dynamics.

    The quadratic road-load term is replaced by its tangent at vbar, so
    the map is affine in (state, control) and exact at velocity == vbar.
    """
    m = config.model
    r0 = m.c0 - m.c2 * vbar * vbar
    r1 = m.c1 + 2.0 * m.c2 * vbar
    dt = config.dt
    gap = state.gap + dt * (front_velocity - state.velocity)
    velocity = state.velocity + (dt / m.mass) * (state.force - (r0 + r1 * state.velocity))
    force = state.force + (dt / m.tau) * (control.traction + control.braking - state.force)
    stop_line = None if state.stop_line is None else state.stop_line - dt * state.velocity
    return PredictionState(gap=gap, velocity=velocity, force=force, stop_line=stop_line)


def eval_cost(velocities: np.ndarray, inputs: np.ndarray, config: MpcConfig) -> float:
    """Tracking-plus-braking cost of a trajectory.

    velocities has horizon+1 entries (every stage), inputs has horizon
    rows of (traction, braking); only braking is penalized.
    """
    dev = np.asarray(velocities, dtype=float) - config.v_des
    braking = np.asarray(inputs, dtype=float)[:, 1]
    return float(config.q_weight * dev @ dev + config.b_weight * braking @ braking)


@dataclass
class CondensedQp:
    """QP data plus the affine maps needed to reconstruct trajectories."""

    problem: QpProblem
    n_inputs: int  # 2 * horizon
    n_slack_gap: int
    n_slack_env: int
    n_slack_red: int
    v_map: np.ndarray  # (horizon+1, n_vars): stage velocity rows
    v_const: np.ndarray
    d_map: np.ndarray
    d_const: np.ndarray
    f_map: np.ndarray
    f_const: np.ndarray
    t_map: np.ndarray | None  # stop-line distance, when a signal is ahead
    t_const: np.ndarray | None
    cost_const: float  # constant term of the tracking cost
    census: dict[str, tuple[int, int]]  # row family -> (first row, count)
    red_armed: bool

    @property
    def n_vars(self) -> int:
        return self.problem.n


def build_qp(
    x0: PredictionState,
    prediction: FrontPrediction,
    schedule: tuple[Phase, ...] | None,
    coasting: CoastingSet,
    config: MpcConfig,
    vbar: float,
    v_cap: float | None = None,
) -> CondensedQp:
    """Condense one horizon into a box-and-rows QP.

    Decision vector:
      [u_0..u_{N-1} | s_gap_1..s_gap_N | s_env_1..s_env_{N-1} | s_red_0..s_red_N]
    where each u_k is (traction, braking) in kilonewtons (see _INPUT_SCALE)
    and the slack blocks soften the minimum-gap, per-step-envelope and
    stop-line rows (the red block exists only when armed).  Extraction
    converts back to newtons.

    Row census, in order (K = per-step chords, T = terminal secants):
      input_box      2N rows       0 <= traction <= f_max, f_min <= braking <= 0
      slack_gap      N rows        s_gap >= 0
      slack_env      N-1 rows      s_env >= 0
      slack_red      N+1 rows      s_red >= 0 (armed only)
      velocity       N rows        v_min <= v_k <= min(v_max, v_cap),  k = 1..N
      min_gap        N rows        d_k + s_gap_k >= d_min,             k = 1..N
      envelope       (N-1)*K rows  d_k - slope_j*v_k + s_env_k >= b_j, k = 1..N-1
      terminal       T rows        d_N - slope_j * v_N >= b_j
      stop_line      N+1 rows      dtl_k + s_red_k >= 0,               k = 0..N (armed only)

    The coasting envelope is applied at every predicted step, not only
    the last one: the safe set is invariant under coasting, so keeping
    the whole plan inside costs nothing in the nominal case, and it
    removes the incentive to ride above the boundary early in the
    horizon and pay the trim back (with brake work) step after step.
    The per-step rows use coarse chords and a gentle spring slack (the
    early stages carry little to no input authority, so a safety-grade
    penalty there would slam the pedals over millimeters); the terminal
    row keeps the full-resolution table, the full horizon of authority,
    and stays hard.

    Every velocity row is widened just enough to admit the zero-input
    rollout (the v_const column): the early stages carry no input
    authority at all (u_0 first reaches velocity at stage 2), so a bound
    the passive trajectory violates is not a constraint but an instant
    infeasibility.  Widening keeps u = 0 feasible in these rows under
    any cap, any overspeed, and through the standstill regime where the
    linearized drag pulls the passive velocity slightly negative.

    Stage 0 is the measurement: it appears in the cost constant and in
    the k = 0 stop-line row but is not otherwise constrained, since no
    decision variable can change it.
    """
    n = config.horizon
    model = config.model
    dt = config.dt
    if len(prediction.velocities) != n + 1:
        raise ValueError("prediction length must be horizon + 1")
    if schedule is not None and len(schedule) != n + 1:
        raise ValueError("phase schedule length must be horizon + 1")

    has_tl = x0.stop_line is not None
    red_armed = (
        has_tl and schedule is not None and any(p is Phase.RED for p in schedule)
    )

    n_u = 2 * n
    n_sg = n
    n_se = n - 1
    n_sr = (n + 1) if red_armed else 0
    n_vars = n_u + n_sg + n_se + n_sr
    sg0 = n_u
    se0 = n_u + n_sg
    sr0 = n_u + n_sg + n_se

    # forward substitution: each stage value as an affine function of the inputs
    r0 = model.c0 - model.c2 * vbar * vbar
    r1 = model.c1 + 2.0 * model.c2 * vbar
    alpha = 1.0 - (dt / model.mass) * r1
    gamma = dt / model.mass
    beta = dt / model.tau

    v_map = np.zeros((n + 1, n_vars))
    d_map = np.zeros((n + 1, n_vars))
    f_map = np.zeros((n + 1, n_vars))
    v_const = np.empty(n + 1)
    d_const = np.empty(n + 1)
    f_const = np.empty(n + 1)
    t_map = np.zeros((n + 1, n_vars)) if has_tl else None
    t_const = np.empty(n + 1) if has_tl else None

    v_row = np.zeros(n_vars)
    d_row = np.zeros(n_vars)
    f_row = np.zeros(n_vars)
    v_c, d_c, f_c = x0.velocity, x0.gap, x0.force
    if has_tl:
        t_row = np.zeros(n_vars)
        t_c = float(x0.stop_line)

    for k in range(n + 1):
        v_map[k] = v_row
        d_map[k] = d_row
        f_map[k] = f_row
        v_const[k] = v_c
        d_const[k] = d_c
        f_const[k] = f_c
        if has_tl:
            t_map[k] = t_row
            t_const[k] = t_c
        if k == n:
            break
        d_row = d_row - dt * v_row
        d_c = d_c + dt * (prediction.velocities[k] - v_c)
        if has_tl:
            t_row = t_row - dt * v_row
            t_c = t_c - dt * v_c
        v_row, v_c = alpha * v_row + gamma * f_row, alpha * v_c + gamma * f_c - gamma * r0
        f_row = (1.0 - beta) * f_row
        f_row[2 * k] += beta * _INPUT_SCALE
        f_row[2 * k + 1] += beta * _INPUT_SCALE
        f_c = (1.0 - beta) * f_c

    # cost: Q * sum_k (v_k - v_des)^2 + B * sum_k braking_k^2 + penalty * slacks
    P = np.zeros((n_vars, n_vars))
    q = np.zeros(n_vars)
    cost_const = 0.0
    for k in range(n + 1):
        dev = v_const[k] - config.v_des
        P += 2.0 * config.q_weight * np.outer(v_map[k], v_map[k])
        q += 2.0 * config.q_weight * dev * v_map[k]
        cost_const += config.q_weight * dev * dev
    for k in range(n):
        P[2 * k + 1, 2 * k + 1] += 2.0 * config.b_weight * _INPUT_SCALE * _INPUT_SCALE
    # the last traction input moves only the post-horizon force state, so the
    # cost is exactly flat in it; a quadratic tie-break pins it to 0, which
    # lies inside the indifferent optimal set and so perturbs nothing
    P[2 * (n - 1), 2 * (n - 1)] += 2.0 * config.b_weight * _INPUT_SCALE * _INPUT_SCALE
    q[sg0 : sg0 + n_sg] += config.slack_penalty
    idx = np.arange(sg0, sg0 + n_sg)
    P[idx, idx] += 2.0 * config.slack_penalty_quad
    q[se0 : se0 + n_se] += config.envelope_penalty
    idx = np.arange(se0, se0 + n_se)
    P[idx, idx] += 2.0 * config.envelope_penalty_quad
    if red_armed:
        q[sr0 : sr0 + n_sr] += config.slack_penalty
        idx = np.arange(sr0, sr0 + n_sr)
        P[idx, idx] += 2.0 * config.slack_penalty_quad

    env_slopes, env_intercepts = coasting.coarse_secants(config.envelope_segments)
    n_chords = len(env_slopes)
    n_terminal = len(coasting.slopes)
    n_envelope = (n - 1) * n_chords
    n_rows = (
        n_u + n_sg + n_se + n_sr + n + n + n_envelope + n_terminal
        + (n + 1 if red_armed else 0)
    )
    A = np.zeros((n_rows, n_vars))
    lo = np.empty(n_rows)
    up = np.empty(n_rows)
    census: dict[str, tuple[int, int]] = {}
    r = 0

    census["input_box"] = (r, n_u)
    for k in range(n):
        A[r, 2 * k] = 1.0
        lo[r], up[r] = 0.0, config.f_max / _INPUT_SCALE
        r += 1
        A[r, 2 * k + 1] = 1.0
        lo[r], up[r] = config.f_min / _INPUT_SCALE, 0.0
        r += 1

    census["slack_gap"] = (r, n_sg)
    for j in range(n_sg):
        A[r, sg0 + j] = 1.0
        lo[r], up[r] = 0.0, np.inf
        r += 1

    census["slack_env"] = (r, n_se)
    for j in range(n_se):
        A[r, se0 + j] = 1.0
        lo[r], up[r] = 0.0, np.inf
        r += 1

    if red_armed:
        census["slack_red"] = (r, n_sr)
        for j in range(n_sr):
            A[r, sr0 + j] = 1.0
            lo[r], up[r] = 0.0, np.inf
            r += 1

    census["velocity"] = (r, n)
    top = config.v_max if v_cap is None else min(config.v_max, max(v_cap, config.v_min))
    for k in range(1, n + 1):
        A[r] = v_map[k]
        lo[r] = min(config.v_min, v_const[k]) - v_const[k]
        up[r] = max(top, v_const[k] + 1e-6) - v_const[k]
        r += 1

    census["min_gap"] = (r, n)
    for k in range(1, n + 1):
        A[r] = d_map[k]
        A[r, sg0 + k - 1] = 1.0
        lo[r], up[r] = config.d_min - d_const[k], np.inf
        r += 1

    census["envelope"] = (r, n_envelope)
    for k in range(1, n):
        for j in range(n_chords):
            A[r] = d_map[k] - env_slopes[j] * v_map[k]
            A[r, se0 + k - 1] += 1.0
            lo[r] = env_intercepts[j] - d_const[k] + env_slopes[j] * v_const[k]
            up[r] = np.inf
            r += 1

    census["terminal"] = (r, n_terminal)
    for j in range(n_terminal):
        A[r] = d_map[n] - coasting.slopes[j] * v_map[n]
        lo[r] = coasting.intercepts[j] - d_const[n] + coasting.slopes[j] * v_const[n]
        up[r] = np.inf
        r += 1

    if red_armed:
        census["stop_line"] = (r, n + 1)
        for k in range(n + 1):
            A[r] = t_map[k]
            A[r, sr0 + k] = 1.0
            lo[r], up[r] = -t_const[k], np.inf
            r += 1

    assert r == n_rows
    problem = QpProblem(P=P, q=q, A=A, l=lo, u=up)
    return CondensedQp(
        problem=problem,
        n_inputs=n_u,
        n_slack_gap=n_sg,
        n_slack_env=n_se,
        n_slack_red=n_sr,
        v_map=v_map,
        v_const=v_const,
        d_map=d_map,
        d_const=d_const,
        f_map=f_map,
        f_const=f_const,
        t_map=t_map,
        t_const=t_const,
        cost_const=cost_const,
        census=census,
        red_armed=red_armed,
    )


@dataclass
class MpcSolution:
    inputs: np.ndarray  # (horizon, 2): traction, braking [N]
    gaps: np.ndarray  # (horizon+1,)
    velocities: np.ndarray
    forces: np.ndarray
    stop_lines: np.ndarray | None
    objective: float  # tracking + braking cost, including the stage-0 constant
    penalty: float  # slack penalty actually paid
    slack_max: float  # largest softened violation [m]
    status: SolverStatus
    iterations: int
    solve_time: float  # QP time [s]
    polished: bool
    active_counts: dict[str, int]  # active rows per census family
    qp: CondensedQp


def _extract_solution(qp: CondensedQp, result: QpResult, config: MpcConfig) -> MpcSolution:
    z = result.x
    n = config.horizon
    inputs = z[: qp.n_inputs].reshape(n, 2) * _INPUT_SCALE
    sg0 = qp.n_inputs
    se0 = sg0 + qp.n_slack_gap
    sr0 = se0 + qp.n_slack_env
    slack_gap = z[sg0:se0]
    slack_env = z[se0:sr0]
    slack_red = z[sr0:]
    penalty = config.slack_penalty * float(np.sum(slack_gap) + np.sum(slack_red))
    penalty += config.slack_penalty_quad * float(
        np.sum(slack_gap**2) + np.sum(slack_red**2)
    )
    penalty += config.envelope_penalty * float(np.sum(slack_env))
    penalty += config.envelope_penalty_quad * float(np.sum(slack_env**2))
    # quadratic-form objective minus the slack part == tracking + braking cost
    objective = result.objective + qp.cost_const - penalty
    active = {
        name: int(np.sum(np.abs(result.y[start : start + count]) > _ACTIVE_DUAL_TOL))
        for name, (start, count) in qp.census.items()
    }
    slacks = np.concatenate([slack_gap, slack_env, slack_red])
    return MpcSolution(
        inputs=inputs,
        gaps=qp.d_map @ z + qp.d_const,
        velocities=qp.v_map @ z + qp.v_const,
        forces=qp.f_map @ z + qp.f_const,
        stop_lines=None if qp.t_map is None else qp.t_map @ z + qp.t_const,
        objective=objective,
        penalty=penalty,
        slack_max=float(np.max(slacks, initial=0.0)),
        status=result.status,
        iterations=result.iterations,
        solve_time=result.solve_time,
        polished=result.polished,
        active_counts=active,
        qp=qp,
    )


@dataclass
class StepDiagnostics:
    status: SolverStatus
    objective: float
    penalty: float
    iterations: int
    solve_time: float  # QP time [s]
    step_time: float  # full controller step [s]
    predictor: str  # "exact" | "worst_case" | "clear"
    fallback: str | None  # None, "hold", or "brake"
    active_counts: dict[str, int]
    solution: MpcSolution | None


class EcoAccController:
    """Receding-horizon wrapper: measurements in, one wheel-force command out."""

    def __init__(self, config: MpcConfig, coasting: CoastingSet | None = None):
        self.config = config
        self.coasting = coasting if coasting is not None else compute_coasting_set(config)
        self._warm_x: np.ndarray | None = None
        self._warm_y: np.ndarray | None = None
        self._warm_shape: tuple[int, int] | None = None
        self._held_plan: np.ndarray | None = None  # remaining inputs for the hold fallback

    def reset(self) -> None:
        self._warm_x = None
        self._warm_y = None
        self._warm_shape = None
        self._held_plan = None

    def _predict(
        self, state: PlantState, radar: RadarReading, plan: LeadPlan | None, now: float
    ) -> tuple[FrontPrediction, str]:
        cfg = self.config
        # the plan carries intent but no geometry; without a radar target
        # there is no gap to constrain against, so treat the road as clear
        if plan is not None and radar.target_present:
            return predict_front_exact(plan, now, cfg.horizon, cfg.dt), "exact"
        if radar.target_present:
            front_v = max(0.0, state.velocity + radar.relative_velocity)
            return (
                predict_front_worst_case(front_v, cfg.horizon, cfg.dt, cfg.brake_assumption),
                "worst_case",
            )
        return constant_prediction(cfg.v_max, cfg.horizon), "clear"

    def _shift_warm(self, z: np.ndarray, qp: CondensedQp) -> np.ndarray:
        n = self.config.horizon
        shifted = z.copy()
        u = z[: qp.n_inputs].reshape(n, 2)
        shifted[: qp.n_inputs] = np.vstack([u[1:], u[-1:]]).reshape(-1)
        start = qp.n_inputs
        for count in (qp.n_slack_gap, qp.n_slack_env, qp.n_slack_red):
            block = z[start : start + count]
            if block.size:
                shifted[start : start + count] = np.append(block[1:], block[-1])
            start += count
        return shifted

    def _pace_cap(self, spat: SpatSnapshot | None) -> float | None:
        """Approach-speed cap that lands arrival inside a green window.

        The phase schedule reaches only horizon*dt ahead, far less than
        the braking distance from cruise, so by the time a red enters
        the schedule a stop already costs a hard brake.  The published
        window timing covers that gap: free-flow arrival at the stop
        line is checked against successive windows (start + i*cycle,
        end + i*cycle), and the first window still open margin past
        arrival decides.  Arriving after its start needs no cap;
        arriving early gets capped to distance / (start + margin) so
        the vehicle glides in just as the light opens.  The margin
        absorbs the pacing error of realizing the cap through the force
        lag.  The floor keeps a missed window from capping into a
        crawl; the stop-line rows own the actual stop.
        """
        cfg = self.config
        if spat is None or not math.isfinite(spat.distance_to_stop_line):
            return None
        d = spat.distance_to_stop_line
        if d <= 0.0:
            return None
        arrival = d / cfg.v_des
        margin = cfg.green_entry_margin
        start, end = spat.green_start, spat.green_end
        if arrival + margin > end:
            # current window closes too soon; roll forward to the first that fits
            start += spat.cycle * math.ceil((arrival + margin - end) / spat.cycle)
        if arrival >= start + margin:
            return None
        cap = max(d / (start + margin), cfg.green_pace_floor)
        return cap if cap < cfg.v_des else None

    def _brake_fallback(self, state: PlantState, radar: RadarReading, stop_line: float | None) -> ControlInput:
        """Stop before the nearest of the radar gap and the stop line."""
        cfg = self.config
        room = radar.distance - cfg.d_min
        if stop_line is not None:
            room = min(room, stop_line)
        room = max(room, 0.1)
        needed = cfg.model.mass * state.velocity**2 / (2.0 * room)
        kappa = min(1.0, needed / abs(cfg.f_min)) if cfg.f_min < 0.0 else 0.0
        return ControlInput(traction=0.0, braking=cfg.f_min * kappa)

    def controller_step(
        self,
        state: PlantState,
        radar: RadarReading,
        spat: SpatSnapshot | None,
        plan: LeadPlan | None,
        now: float,
    ) -> tuple[ControlInput, StepDiagnostics]:
        """One receding-horizon update.

        Builds the condensed QP from the current measurements, solves it
        warm-started from the shifted previous solution, and returns the
        first input.  A failed solve falls back to the remaining plan of
        the last good solve while the measured state is still inside the
        constraint set, and to scaled maximum braking otherwise.
        """
        t_start = _time.perf_counter()
        cfg = self.config
        prediction, predictor = self._predict(state, radar, plan, now)
        x0 = PredictionState(
            gap=radar.distance,
            velocity=state.velocity,
            force=state.force,
            stop_line=spat.distance_to_stop_line if spat is not None else None,
        )
        schedule = spat.phases if spat is not None else None
        qp = build_qp(
            x0, prediction, schedule, self.coasting, cfg,
            vbar=state.velocity, v_cap=self._pace_cap(spat),
        )

        shape = (qp.problem.n, qp.problem.m)
        warm_x = self._warm_x if self._warm_shape == shape else None
        warm_y = self._warm_y if self._warm_shape == shape else None
        # eps_rel=0: the slack penalty puts a 1e6 entry in q, and a relative
        # dual tolerance keyed off ||q||inf would accept wildly suboptimal
        # iterates.  Force-scale gradients here are ~1e-2, so terminate on
        # the absolute criterion alone.
        result = solve_qp(
            qp.problem, x0=warm_x, y0=warm_y, eps=cfg.qp_eps, eps_rel=0.0,
            max_iter=cfg.qp_max_iter,
        )

        if result.status is SolverStatus.OPTIMAL:
            solution = _extract_solution(qp, result, cfg)
            u0 = solution.inputs[0]
            control = ControlInput(
                traction=float(np.clip(u0[0], 0.0, cfg.f_max)),
                braking=float(np.clip(u0[1], cfg.f_min, 0.0)),
            )
            self._warm_x = self._shift_warm(result.x, qp)
            self._warm_y = result.y.copy()
            self._warm_shape = shape
            self._held_plan = solution.inputs[1:].copy()
            diag = StepDiagnostics(
                status=result.status,
                objective=solution.objective,
                penalty=solution.penalty,
                iterations=result.iterations,
                solve_time=result.solve_time,
                step_time=_time.perf_counter() - t_start,
                predictor=predictor,
                fallback=None,
                active_counts=solution.active_counts,
                solution=solution,
            )
            return control, diag

        # failed solve: hold the previous plan while the measured state is
        # still inside the constraint set, otherwise brake
        inside = radar.distance >= cfg.d_min - 0.1 and (
            x0.stop_line is None or x0.stop_line >= -0.1
        )
        if inside and self._held_plan is not None and len(self._held_plan) > 0:
            u0 = self._held_plan[0]
            self._held_plan = self._held_plan[1:]
            control = ControlInput(
                traction=float(np.clip(u0[0], 0.0, cfg.f_max)),
                braking=float(np.clip(u0[1], cfg.f_min, 0.0)),
            )
            fallback = "hold"
        else:
            control = self._brake_fallback(state, radar, x0.stop_line)
            fallback = "brake"
        self._warm_x = None
        self._warm_y = None
        self._warm_shape = None
        diag = StepDiagnostics(
            status=result.status,
            objective=float("nan"),
            penalty=float("nan"),
            iterations=result.iterations,
            solve_time=result.solve_time,
            step_time=_time.perf_counter() - t_start,
            predictor=predictor,
            fallback=fallback,
            active_counts={},
            solution=None,
        )
        return control, diag
