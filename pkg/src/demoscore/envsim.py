"""GapWorld: a 2D point mass that must cross a wall to reach a goal.

The wall at ``x = 0`` has two openings: a narrow gap around ``y = 0`` and a
wide opening near the top. Both lead to the goal; only the wide one is
forgiving of small tracking errors. Scripted demonstrators exist for both
routes and always succeed (failed attempts are retried).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .numcore import BatchRng, ContractError, RngStream, derive_seed


class ConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


class StrategyTag(str, enum.Enum):
    WIDE_A = "WideA"
    NARROW_B = "NarrowB"


@dataclass(frozen=True)
class EnvConfig:
    arena_half: float = 1.0
    gap_half_width: float = 0.0205
    open_y_min: float = 0.6
    agent_radius: float = 0.02
    goal_x: float = 0.8
    goal_y: float = 0.0
    goal_radius: float = 0.1
    start_x: float = -0.8
    start_y_range: float = 0.2
    max_steps: int = 150
    dyn_noise: float = 0.0001
    demo_noise: float = 0.00005
    action_cap: float = 0.05

    def violations(self, allow_closed_gap: bool = False) -> list[str]:
        bad = []
        if self.gap_half_width <= self.agent_radius and not allow_closed_gap:
            bad.append("gap_half_width must exceed agent_radius")
        if self.open_y_min + self.agent_radius >= self.arena_half:
            bad.append("open region too thin for the agent")
        if abs(self.goal_x) <= self.goal_radius + self.agent_radius:
            bad.append("goal intersects the wall")
        if self.start_x >= -self.agent_radius:
            bad.append("start must be left of the wall")
        if self.start_y_range < 0 or self.dyn_noise < 0 or self.demo_noise < 0:
            bad.append("ranges and noise levels must be non-negative")
        if self.action_cap <= 0:
            bad.append("action_cap must be positive")
        min_path = abs(self.goal_x - self.start_x) - self.goal_radius
        if self.max_steps < min_path / self.action_cap:
            bad.append("max_steps shorter than the minimal path")
        return bad

    def validate(self, allow_closed_gap: bool = False) -> "EnvConfig":
        bad = self.violations(allow_closed_gap)
        if bad:
            raise ConfigError("invalid EnvConfig: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown EnvConfig fields: {sorted(unknown)}")
        return cls(**d)

    def with_start_expansion(self, factor: float) -> "EnvConfig":
        """Start region widened by ``factor`` (0.5 = 50% larger) for OOD evaluation."""
        return replace(self, start_y_range=self.start_y_range * (1.0 + factor))


@dataclass
class EnvState:
    x: float
    y: float
    t: int = 0
    terminated: bool = False
    collided: bool = False
    reached: bool = False

    @property
    def timed_out(self) -> bool:
        return self.terminated and not (self.collided or self.reached)


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    return np.array([state.x, state.y, state.t / config.max_steps])


def reset(config: EnvConfig, seed: int) -> EnvState:
    config.validate()
    return _reset(config, seed)


def _reset(config: EnvConfig, seed: int) -> EnvState:
    u = RngStream(seed).substream("reset").uniform(1)[0]
    return EnvState(config.start_x, (2.0 * u - 1.0) * config.start_y_range)


def reset_batch(config: EnvConfig, seeds) -> np.ndarray:
    """Start positions ``(n, 2)``; row ``i`` equals ``reset(config, seeds[i])``."""
    config.validate()
    rng = BatchRng([derive_seed(s, "reset") for s in seeds])
    y0 = (2.0 * rng.uniform(1)[:, 0] - 1.0) * config.start_y_range
    return np.column_stack([np.full(len(y0), config.start_x), y0])


def wall_collision(p0: np.ndarray, p1: np.ndarray, config: EnvConfig) -> np.ndarray:
    """True where the swept disc from ``p0`` to ``p1`` hits the wall.

    The wall is inflated by the agent radius into the slab ``|x| <= r``; the
    centre may occupy the slab only at ``|y| <= gap - r`` or ``y >= open + r``.
    """
    r = config.agent_radius
    x0, y0 = p0[:, 0], p0[:, 1]
    dx = p1[:, 0] - x0
    dy = p1[:, 1] - y0
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = np.where(dx != 0, (-r - x0) / dx, -np.inf)
        tb = np.where(dx != 0, (r - x0) / dx, np.inf)
    lo = np.maximum(np.minimum(ta, tb), 0.0)
    hi = np.minimum(np.maximum(ta, tb), 1.0)
    # segments parallel to the wall are inside the slab iff |x0| <= r
    still = dx == 0
    inside_still = np.abs(x0) <= r
    lo = np.where(still, np.where(inside_still, 0.0, 1.0), lo)
    hi = np.where(still, np.where(inside_still, 1.0, 0.0), hi)
    touches = lo <= hi
    ya = y0 + lo * dy
    yb = y0 + hi * dy
    ymin = np.minimum(ya, yb)
    ymax = np.maximum(ya, yb)
    clear = config.gap_half_width - r
    in_gap = (ymax <= clear) & (ymin >= -clear)
    in_open = ymin >= config.open_y_min + r
    return touches & ~(in_gap | in_open)


def step_batch(pos, t, action, noise, config: EnvConfig):
    """Vectorized transition. ``noise`` is standard normal ``(n, 2)``.

    Returns ``(new_pos, new_t, collided, reached, timeout)``.
    """
    cap = config.action_cap
    a = np.clip(action, -cap, cap)
    proposed = pos + a + config.dyn_noise * noise
    new_pos = np.clip(proposed, -config.arena_half, config.arena_half)
    collided = wall_collision(pos, new_pos, config)
    goal = np.array([config.goal_x, config.goal_y])
    reached = ~collided & (np.hypot(*(new_pos - goal).T) <= config.goal_radius)
    new_t = t + 1
    timeout = ~collided & ~reached & (new_t >= config.max_steps)
    return new_pos, new_t, collided, reached, timeout


def env_step(state: EnvState, action, rng: RngStream, config: EnvConfig) -> EnvState:
    if state.terminated:
        raise ContractError("cannot step a terminated episode")
    noise = rng.gaussian(2)[None, :]
    pos, t, col, rea, tout = step_batch(
        np.array([[state.x, state.y]]), state.t, np.asarray(action, dtype=float)[None, :], noise, config
    )
    return EnvState(
        float(pos[0, 0]), float(pos[0, 1]), int(t),
        terminated=bool(col[0] or rea[0] or tout[0]),
        collided=bool(col[0]), reached=bool(rea[0]),
    )


def is_success(traj) -> float:
    """1.0 iff the episode ended in the goal without a collision.

    Accepts a Trajectory (reads its ``outcome``) or a terminal EnvState.
    """
    if isinstance(traj, EnvState):
        if not traj.terminated:
            raise ContractError("episode has not terminated")
        return 1.0 if (traj.reached and not traj.collided) else 0.0
    return float(traj.outcome)


# ---------------------------------------------------------------------------
# scripted demonstrators
# ---------------------------------------------------------------------------

WAYPOINTS = {
    StrategyTag.WIDE_A: [(-0.5, 0.8), (0.3, 0.8)],
    StrategyTag.NARROW_B: [(-0.3, 0.0), (0.3, 0.0)],
}
_ADVANCE_DIST = 0.05
_GAIN = 1.0
_MAX_ATTEMPTS = 100


@dataclass
class Rollout:
    states: np.ndarray  # (T, 3)
    actions: np.ndarray  # (T, 2)
    success: bool
    collided: bool


def run_script(tag: StrategyTag, config: EnvConfig, seed: int) -> Rollout:
    """Play one waypoint-following episode; failures are returned, not retried."""
    tag = StrategyTag(tag)
    state = _reset(config, seed)
    dyn = RngStream(seed).substream("dynamics")
    act_noise = RngStream(seed).substream("demo-action")
    route = [np.array(w) for w in WAYPOINTS[tag]] + [np.array([config.goal_x, config.goal_y])]
    k = 0
    states, actions = [], []
    while not state.terminated:
        pos = np.array([state.x, state.y])
        while k < len(route) - 1 and np.hypot(*(route[k] - pos)) < _ADVANCE_DIST:
            k += 1
        a = np.clip(_GAIN * (route[k] - pos), -config.action_cap, config.action_cap)
        a = np.clip(a + config.demo_noise * act_noise.gaussian(2), -config.action_cap, config.action_cap)
        states.append(observe(state, config))
        actions.append(a)
        state = env_step(state, a, dyn, config)
    return Rollout(np.array(states), np.array(actions), state.reached and not state.collided, state.collided)


def script_demo(tag: StrategyTag, config: EnvConfig, seed: int):
    """A successful scripted demonstration; retries with derived seeds on failure."""
    from .datamodel import DemoSource, Trajectory

    tag = StrategyTag(tag)
    config.validate()
    for attempt in range(_MAX_ATTEMPTS):
        s = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        ro = run_script(tag, config, s)
        if ro.success:
            return Trajectory(
                id=f"demo-{tag.value}-{seed:016x}",
                states=ro.states,
                actions=ro.actions,
                outcome=1.0,
                source=DemoSource(tag),
                seed=s,
            )
    raise CalibrationError(f"{tag.value} demonstrator failed {_MAX_ATTEMPTS} consecutive attempts")


@dataclass
class CalibrationReport:
    n_trials: int
    success_rate: dict[str, float]
    gap_clearance: float
    open_clearance: float
    mean_length: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate(config: EnvConfig, n_trials: int = 1000, seed: int = 0) -> CalibrationReport:
    """First-attempt success rates of both demonstrators."""
    if n_trials < 100:
        raise ContractError("calibration needs at least 100 trials")
    # a closed gap is a legitimate calibration probe: NarrowB should then fail
    config.validate(allow_closed_gap=True)
    rates, lengths = {}, {}
    for tag in StrategyTag:
        wins, total_len = 0, 0
        for i in range(n_trials):
            ro = run_script(tag, config, derive_seed(seed, "calibrate", tag.value, i))
            wins += ro.success
            total_len += len(ro.actions)
        rates[tag.value] = wins / n_trials
        lengths[tag.value] = total_len / n_trials
    return CalibrationReport(
        n_trials=n_trials,
        success_rate=rates,
        gap_clearance=config.gap_half_width - config.agent_radius,
        open_clearance=config.arena_half - config.open_y_min - 2 * config.agent_radius,
        mean_length=lengths,
    )
