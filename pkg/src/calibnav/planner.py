"""Uncertainty-aware MPC for a unicycle robot among replayed pedestrians.

The controller minimises control effort, an inverse-Mahalanobis repulsion from
each predicted pedestrian Gaussian and normalised distance-to-goal terms,
subject to a chance-style Mahalanobis constraint and a Euclidean clearance per
pedestrian and horizon step. Constraints are handled with an exact penalty and
the control sequence is found by deterministic direct shooting with a
multi-scale pattern search.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import Scenario
from .gaussian import validate_params
from .predictor import FRAME_DT, OBS_LEN, PRED_LEN, CVPredictor, Predictor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 12
    dt: float = 0.5
    q_u: tuple = ((1.0, 0.0), (0.0, 1.0))
    q_h: float = 1e3
    q_p: float = 1e3
    q_md: float = 1e3
    r_rob: float = 0.2
    r_ped: float = 0.2
    d_safe: float = 0.4
    p_col: float = 0.2
    v_min: float = 0.0
    v_max: float = 3.0
    w_min: float = -0.2
    w_max: float = 0.2
    v_init: float = 1.0
    # solver and simulator settings
    penalty: float = 1e6
    md_floor: float = 1e-3
    n_random: int = 64
    refine_rounds: int = 30
    improve_tol: float = 1e-6
    goal_radius: float = 0.3
    personal_space: float = 0.6
    timeout_factor: float = 4.0
    min_timeout_steps: int = 60
    cv_sigma0: float = 0.1
    cv_growth: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "q_u", tuple(tuple(float(v) for v in row) for row in self.q_u))
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon must be >= 1 and dt > 0")
        if min(self.q_h, self.q_p, self.q_md) < 0 or np.any(np.linalg.eigvalsh(np.array(self.q_u)) < -1e-12):
            raise ValueError("cost weights must be non-negative")
        if self.v_min > self.v_max or self.w_min > self.w_max:
            raise ValueError("control bounds are not ordered")
        if not 0 < self.p_col < 1:
            raise ValueError("p_col must lie in (0, 1)")

    @property
    def a_col(self) -> float:
        return math.pi * (self.r_rob + self.r_ped) ** 2

    @property
    def clearance_sq(self) -> float:
        return (self.r_rob + self.r_ped + self.d_safe) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_u"] = [list(r) for r in self.q_u]
        return d


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    v: float = 0.0
    w: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def unicycle_step(s: RobotState, u, dt: float, cfg: MpcConfig = MpcConfig()) -> RobotState:
    """Forward-Euler unicycle update with bound checking."""
    v, w = float(u[0]), float(u[1])
    eps = 1e-12
    if not (cfg.v_min - eps <= v <= cfg.v_max + eps and cfg.w_min - eps <= w <= cfg.w_max + eps):
        raise ValueError(f"control ({v}, {w}) outside bounds")
    return RobotState(
        s.x + v * math.cos(s.theta) * dt,
        s.y + v * math.sin(s.theta) * dt,
        wrap_angle(s.theta + w * dt),
        v,
        w,
    )


def rollout(state: RobotState, controls: np.ndarray, dt: float) -> np.ndarray:
    """Positions ``(C, H+1, 2)`` (index 0 is the current position) for controls ``(C, H, 2)``."""
    controls = np.asarray(controls, dtype=float)
    v, w = controls[..., 0], controls[..., 1]
    theta = state.theta + np.concatenate([np.zeros(v.shape[:-1] + (1,)), np.cumsum(w * dt, axis=-1)[..., :-1]], axis=-1)
    dx = np.cumsum(v * np.cos(theta) * dt, axis=-1)
    dy = np.cumsum(v * np.sin(theta) * dt, axis=-1)
    pos = np.empty(controls.shape[:-1][:-1] + (controls.shape[-2] + 1, 2))
    pos[..., 0, 0] = state.x
    pos[..., 0, 1] = state.y
    pos[..., 1:, 0] = state.x + dx
    pos[..., 1:, 1] = state.y + dy
    return pos


def collision_constraint_rhs(params, cfg: MpcConfig = MpcConfig()):
    """Lower bound on squared Mahalanobis distance: ``-2 ln(sqrt(det(2 pi Sigma)) p_col / A_col)``."""
    params = np.asarray(params, dtype=float)
    validate_params(params)
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    sqrt_det = 2.0 * math.pi * sx * sy * np.sqrt(1.0 - rho * rho)
    out = -2.0 * np.log(sqrt_det * cfg.p_col / cfg.a_col)
    return float(out) if out.ndim == 0 else out


class _Horizon:
    """Predictions for one solve, precomputed for fast batched evaluation."""

    def __init__(self, preds: np.ndarray, cfg: MpcConfig):
        preds = np.asarray(preds, dtype=float).reshape(cfg.horizon, -1, 5)
        if preds.shape[1]:
            validate_params(preds)
        self.preds = preds
        self.rhs = collision_constraint_rhs(preds, cfg) if preds.shape[1] else np.zeros((cfg.horizon, 0))
        self.mu = preds[..., :2]
        self.sx, self.sy, self.rho = preds[..., 2], preds[..., 3], preds[..., 4]
        self.omr = 1.0 - self.rho**2


def _evaluate(controls, state: RobotState, hz: _Horizon, goal, d0: float, cfg: MpcConfig, detail=False):
    controls = np.asarray(controls, dtype=float)
    pos = rollout(state, controls, cfg.dt)  # (C, H+1, 2)
    qu = np.array(cfg.q_u)
    effort = np.einsum("chi,ij,chj->c", controls, qu, controls)
    gdist = np.linalg.norm(pos - np.asarray(goal)[None, None, :], axis=-1) / d0
    cost = effort + cfg.q_p * np.sum(gdist[:, :-1] ** 2, axis=1) + cfg.q_h * gdist[:, -1] ** 2
    if hz.preds.shape[1] == 0:
        viol = np.zeros(controls.shape[0])
        if detail:
            return cost, viol, np.zeros((controls.shape[0], cfg.horizon, 0, 2))
        return cost, viol
    r = pos[:, 1:, None, :]  # robot at steps 1..H against predictions at the same times
    diff = r - hz.mu[None]
    zx = diff[..., 0] / hz.sx
    zy = diff[..., 1] / hz.sy
    d2 = np.maximum((zx * zx - 2.0 * hz.rho * zx * zy + zy * zy) / hz.omr, 0.0)
    cost = cost + cfg.q_md * np.sum(1.0 / np.maximum(np.sqrt(d2), cfg.md_floor), axis=(1, 2))
    ed2 = np.sum(diff * diff, axis=-1)
    v_md = np.maximum(0.0, hz.rhs[None] - d2)
    v_ed = np.maximum(0.0, cfg.clearance_sq - ed2)
    viol = np.sum(v_md + v_ed, axis=(1, 2))
    if detail:
        return cost, viol, np.stack([v_md, v_ed], axis=-1)
    return cost, viol


def mpc_objective(controls, state: RobotState, preds, goal, cfg: MpcConfig = MpcConfig()):
    """Cost and per-(step, pedestrian) violations ``(H, N, 2)`` for one control sequence.

    ``preds`` is ``(H, N, 5)``: the Gaussian for pedestrian ``i`` at the time of
    rolled-out robot position ``t + 1``. The last axis of the violations holds the
    Mahalanobis and the Euclidean constraint.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (cfg.horizon, 2):
        raise ValueError(f"expected controls of shape ({cfg.horizon}, 2)")
    if np.any(controls[:, 0] < cfg.v_min) or np.any(controls[:, 0] > cfg.v_max) or np.any(
        controls[:, 1] < cfg.w_min
    ) or np.any(controls[:, 1] > cfg.w_max):
        raise ValueError("controls outside bounds")
    d0 = float(np.linalg.norm(state.position - np.asarray(goal, dtype=float)))
    if d0 <= 0:
        raise ValueError("robot already at the goal; distance normalisation is undefined")
    cost, _, detail = _evaluate(controls[None], state, _Horizon(preds, cfg), goal, d0, cfg, detail=True)
    return float(cost[0]), detail[0]


@dataclass
class SolveResult:
    controls: np.ndarray
    objective: float
    cost: float
    violation: float
    fallback: bool = False


def straight_to_goal(state: RobotState, goal, cfg: MpcConfig) -> np.ndarray:
    """Greedy heading-correcting controls that stop at the goal."""
    out = np.zeros((cfg.horizon, 2))
    s = state
    for k in range(cfg.horizon):
        delta = np.asarray(goal) - s.position
        dist = float(np.linalg.norm(delta))
        err = wrap_angle(math.atan2(delta[1], delta[0]) - s.theta)
        w = float(np.clip(err / cfg.dt, cfg.w_min, cfg.w_max))
        v = float(np.clip(dist / cfg.dt, cfg.v_min, cfg.v_max)) if abs(err) < math.pi / 2 else cfg.v_min
        out[k] = (v, w)
        s = unicycle_step(s, (v, w), cfg.dt, cfg)
    return out


# relative step sizes tried for every coordinate in a pattern-search round
_SCALES = np.array([2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01, 0.003, 0.001])


def solve_mpc(
    state: RobotState,
    preds,
    goal,
    cfg: MpcConfig = MpcConfig(),
    warm_start=None,
    rng: np.random.Generator | None = None,
) -> SolveResult:
    """Minimise cost + penalty * violations over bound-feasible control sequences.

    Candidates are the warm start, a straight-to-goal sequence and ``n_random``
    seeded random sequences; the best one is refined by coordinate and
    tail-block moves at several scales until a full round brings no improvement
    larger than ``improve_tol`` (or ``refine_rounds`` is reached).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    goal = np.asarray(goal, dtype=float)
    d0 = float(np.linalg.norm(state.position - goal))
    if d0 <= 0:
        raise ValueError("robot already at the goal")
    hz = _Horizon(preds, cfg)
    lo = np.array([cfg.v_min, cfg.w_min])
    hi = np.array([cfg.v_max, cfg.w_max])
    H = cfg.horizon

    cands = []
    if warm_start is not None:
        cands.append(np.clip(np.asarray(warm_start, dtype=float).reshape(H, 2), lo, hi))
    cands.append(straight_to_goal(state, goal, cfg))
    half = cfg.n_random // 2
    const = lo + rng.random((half, 1, 2)) * (hi - lo)
    cands.extend(np.repeat(const, H, axis=1))
    cands.extend(lo + rng.random((cfg.n_random - half, H, 2)) * (hi - lo))
    cands = np.stack(cands)

    def objective(c):
        cost, viol = _evaluate(c, state, hz, goal, d0, cfg)
        return cost + cfg.penalty * viol, cost, viol

    obj, _, _ = objective(cands)
    best = int(np.argmin(obj))
    x = cands[best].copy()
    fx = float(obj[best])
    fallback = False
    try:
        span = hi - lo
        offsets = np.concatenate([_SCALES, -_SCALES])
        for _ in range(cfg.refine_rounds):
            improved = False
            for k in range(H):
                for dim in range(2):
                    step = offsets * span[dim]
                    single = np.repeat(x[None], step.size, axis=0)
                    single[:, k, dim] = x[k, dim] + step
                    block = np.repeat(x[None], step.size, axis=0)
                    block[:, k:, dim] = x[k:, dim] + step[:, None]
                    trial = np.clip(np.concatenate([single, block]), lo, hi)
                    f, _, _ = objective(trial)
                    j = int(np.argmin(f))
                    if f[j] < fx - cfg.improve_tol * max(1.0, abs(fx)):
                        x, fx = trial[j], float(f[j])
                        improved = True
            if not improved:
                break
    except (FloatingPointError, ValueError) as exc:  # pragma: no cover - defensive
        log.warning("MPC refinement failed (%s); using best sampled candidate", exc)
        x, fx, fallback = cands[best].copy(), float(obj[best]), True
    _, cost, viol = objective(x[None])
    return SolveResult(x, fx, float(cost[0]), float(viol[0]), fallback)


# -- closed-loop simulation --------------------------------------------------


class PedestrianReplay:
    """Open-loop replay of logged pedestrians at arbitrary times.

    Times are in frames relative to the scenario start; positions between two
    consecutive logged frames are linearly interpolated, and a pedestrian is
    absent outside its logged span or across gaps.
    """

    def __init__(self, peds: dict):
        self.tracks = {}
        for pid, rows in sorted(peds.items()):
            rows = np.asarray(rows, dtype=float)
            order = np.argsort(rows[:, 0])
            self.tracks[int(pid)] = rows[order]

    def position(self, pid: int, f: float):
        tr = self.tracks[pid]
        frames = tr[:, 0]
        i = int(np.searchsorted(frames, f, side="right")) - 1
        if i < 0:
            return None
        if frames[i] == f:
            return tr[i, 1:].copy()
        if i + 1 >= len(frames) or frames[i + 1] - frames[i] != 1:
            return None
        a = f - frames[i]
        return (1.0 - a) * tr[i, 1:] + a * tr[i + 1, 1:]

    def positions_at(self, f: float):
        ids, pts = [], []
        for pid in self.tracks:
            p = self.position(pid, f)
            if p is not None:
                ids.append(pid)
                pts.append(p)
        return ids, (np.array(pts) if pts else np.zeros((0, 2)))

    def history(self, pid: int, f: float, n: int = OBS_LEN) -> np.ndarray:
        """Up to ``n`` positions at ``f - n + 1, ..., f`` going back until data runs out."""
        pts = []
        for k in range(n):
            p = self.position(pid, f - k)
            if p is None:
                break
            pts.append(p)
        return np.array(pts[::-1])


def resample_predictions(preds: np.ndarray, current: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Re-time 0.4 s-step predictions ``(N, 12, 5)`` to ``times`` seconds ahead.

    Parameters are interpolated linearly between predicted steps; before the
    first step the mean moves linearly from the current position with the
    first step's covariance, and past the last step the mean is extrapolated
    with the last step's covariance held.
    """
    preds = np.asarray(preds, dtype=float)
    n = preds.shape[0]
    p = np.asarray(times, dtype=float) / FRAME_DT
    out = np.empty((len(p), n, 5))
    first = preds[:, 0, :]
    last, prev = preds[:, -1, :], preds[:, -2, :]
    for j, q in enumerate(p):
        if q <= 1.0:
            out[j] = first
            out[j, :, :2] = (1.0 - q) * current + q * first[:, :2]
        elif q >= PRED_LEN:
            out[j] = last
            out[j, :, :2] = last[:, :2] + (q - PRED_LEN) * (last[:, :2] - prev[:, :2])
        else:
            i = int(math.floor(q))
            a = q - i
            out[j] = (1.0 - a) * preds[:, i - 1, :] + a * preds[:, i, :]
    return out


@dataclass
class PlanResult:
    scenario_id: str
    outcome: str  # success | collision | timeout
    nav_time_steps: int
    path_length: float
    intrusion_ratio: float
    min_intrusion_distance: float | None
    min_intrusion_distance_scenario: float | None
    n_steps: int
    straight_line: float
    trace: list = field(default_factory=list)

    def row(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "outcome": self.outcome,
            "nav_time_steps": self.nav_time_steps,
            "path_length": self.path_length,
            "straight_line": self.straight_line,
            "intrusion_ratio": self.intrusion_ratio,
            "min_intrusion_distance": self.min_intrusion_distance,
            "min_intrusion_distance_scenario": self.min_intrusion_distance_scenario,
            "n_steps": self.n_steps,
        }

    def to_dict(self) -> dict:
        d = self.row()
        d["trace"] = self.trace
        return d


def timeout_steps(distance: float, cfg: MpcConfig) -> int:
    lower = math.ceil(distance / (cfg.v_max * cfg.dt))
    return max(cfg.min_timeout_steps, int(cfg.timeout_factor * lower))


def replay_digest(scn: Scenario, cfg: MpcConfig = MpcConfig()) -> str:
    """SHA-256 of pedestrian positions at every control step up to the timeout cap.

    The replay is open loop, so this is the same whatever the robot does.
    """
    replay = PedestrianReplay(scn.peds)
    cap = timeout_steps(float(np.linalg.norm(np.subtract(scn.goal, scn.start))), cfg)
    h = hashlib.sha256()
    for step in range(cap + 1):
        ids, pts = replay.positions_at(step * cfg.dt / FRAME_DT)
        h.update(np.asarray(ids, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(pts, dtype=np.float64).tobytes())
    return h.hexdigest()


Policy = Callable[[RobotState, np.ndarray, np.ndarray], tuple]


def predict_pedestrians(replay: PedestrianReplay, ids: Sequence[int], positions, f: float, predictor, fallback):
    """12-step Gaussians ``(N, 12, 5)`` for every present pedestrian.

    Pedestrians with a full observation window go through ``predictor``; the
    rest, and any the predictor fails on, get the constant-velocity fallback.
    """
    out = np.empty((len(ids), PRED_LEN, 5))
    full, partial = [], []
    hists = {}
    for n, pid in enumerate(ids):
        h = replay.history(pid, f)
        hists[pid] = h
        (full if len(h) == OBS_LEN else partial).append(n)
    if full:
        obs = np.stack([hists[ids[n]] for n in full])
        try:
            p = np.asarray(predictor.predict(obs))
            validate_params(p)
            out[full] = p
        except Exception as exc:  # noqa: BLE001 - any predictor failure falls back
            log.warning("predictor failed (%s); using constant velocity for %d pedestrians", exc, len(full))
            partial = partial + full
    for n in partial:
        h = hists[ids[n]]
        if len(h) < 2:
            h = np.vstack([positions[n], positions[n]])
        out[n] = fallback.predict(h[None])[0]
    return out


def run_scenario(
    scn: Scenario,
    predictor: Predictor,
    cfg: MpcConfig = MpcConfig(),
    seed: int = 0,
    policy: Policy | None = None,
    keep_trace: bool = True,
    keep_predictions: bool = False,
) -> PlanResult:
    """Closed-loop run: observe, predict, solve, apply the first control, advance."""
    start = np.asarray(scn.start, dtype=float)
    goal = np.asarray(scn.goal, dtype=float)
    replay = PedestrianReplay(scn.peds)
    fallback = CVPredictor(cfg.cv_sigma0, cfg.cv_growth)
    dist0 = float(np.linalg.norm(goal - start))
    cap = timeout_steps(dist0, cfg)
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    state = RobotState(float(start[0]), float(start[1]), heading, cfg.v_init, 0.0)
    warm = np.tile([cfg.v_init, 0.0], (cfg.horizon, 1))
    times = cfg.dt * np.arange(1, cfg.horizon + 1)
    contact = cfg.r_rob + cfg.r_ped

    trace = []
    intrusions = []  # per-state min distance when intruding, else None
    path = 0.0
    outcome = "timeout"
    step = 0
    while True:
        f = step * cfg.dt / FRAME_DT
        ids, peds = replay.positions_at(f)
        dmin = float(np.min(np.linalg.norm(peds - state.position, axis=1))) if len(ids) else math.inf
        intrusions.append(dmin if dmin < cfg.personal_space else None)
        rec = {
            "step": step,
            "x": state.x,
            "y": state.y,
            "theta": state.theta,
            "v": state.v,
            "w": state.w,
            "peds": {str(pid): [float(p[0]), float(p[1])] for pid, p in zip(ids, peds)},
        }
        if dmin < contact:
            outcome = "collision"
        elif np.linalg.norm(goal - state.position) < cfg.goal_radius:
            outcome = "success"
        elif step >= cap:
            outcome = "timeout"
        else:
            outcome = None
        if outcome is not None:
            if keep_trace:
                trace.append(rec)
            break

        if len(ids):
            raw = predict_pedestrians(replay, ids, peds, f, predictor, fallback)
            horizon_preds = resample_predictions(raw, peds, times)
        else:
            raw = np.zeros((0, PRED_LEN, 5))
            horizon_preds = np.zeros((cfg.horizon, 0, 5))
        if policy is not None:
            u = policy(state, horizon_preds, goal)
        else:
            sol = solve_mpc(state, horizon_preds, goal, cfg, warm, np.random.default_rng([seed, step]))
            u = sol.controls[0]
            warm = np.vstack([sol.controls[1:], sol.controls[-1:]])
            rec["objective"] = sol.objective
            rec["violation"] = sol.violation
        if keep_predictions:
            rec["predictions"] = raw.tolist()
        if keep_trace:
            trace.append(rec)
        nxt = unicycle_step(state, u, cfg.dt, cfg)
        path += float(np.hypot(nxt.x - state.x, nxt.y - state.y))
        state = nxt
        step += 1

    # intrusion events are maximal runs of consecutive intruding states
    events, run = [], []
    for d in intrusions:
        if d is not None:
            run.append(d)
        elif run:
            events.append(min(run))
            run = []
    if run:
        events.append(min(run))
    n_states = len(intrusions)
    return PlanResult(
        scn.scenario_id,
        outcome,
        step,
        path,
        sum(d is not None for d in intrusions) / n_states,
        float(np.mean(events)) if events else None,
        float(min(events)) if events else None,
        step,
        dist0,
        trace,
    )


def _mean_se(values):
    vals = np.asarray([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return None, None
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else None
    return float(vals.mean()), se


AGGREGATE_COLUMNS = [
    "n_scenarios",
    "sr",
    "cr",
    "tr",
    "nav_time_mean",
    "nav_time_se",
    "path_length_mean",
    "path_length_se",
    "intrusion_ratio_mean",
    "intrusion_ratio_se",
    "min_intrusion_distance_mean",
    "min_intrusion_distance_se",
    "min_intrusion_distance_scenario_mean",
]


def aggregate(results: Sequence[PlanResult]) -> dict:
    """Success/collision/timeout rates and mean +- standard error of the path statistics."""
    if not results:
        raise ValueError("no planning results to aggregate")
    n = len(results)
    ok = [r for r in results if r.outcome == "success"]
    out = {
        "n_scenarios": n,
        "sr": sum(r.outcome == "success" for r in results) / n,
        "cr": sum(r.outcome == "collision" for r in results) / n,
        "tr": sum(r.outcome == "timeout" for r in results) / n,
    }
    out["nav_time_mean"], out["nav_time_se"] = _mean_se([r.nav_time_steps for r in ok])
    out["path_length_mean"], out["path_length_se"] = _mean_se([r.path_length for r in ok])
    out["intrusion_ratio_mean"], out["intrusion_ratio_se"] = _mean_se([r.intrusion_ratio for r in results])
    out["min_intrusion_distance_mean"], out["min_intrusion_distance_se"] = _mean_se(
        [r.min_intrusion_distance for r in results]
    )
    out["min_intrusion_distance_scenario_mean"], _ = _mean_se([r.min_intrusion_distance_scenario for r in results])
    return out
