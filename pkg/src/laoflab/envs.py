"""Synthetic pixel environments with an agent, a tiled background and moving distractors.

Two families share one implementation:

* DistractorGrid (``control_mode="discrete5"``): five discrete actions
  {noop, up, down, left, right}, the agent moves ``agent_step`` pixels.
* PointMass (``control_mode="continuous2d"``): continuous ``(dx, dy)`` moves
  bounded to [-3, 3] pixels.

Distractors are constant-velocity squares that bounce off the frame borders
and never react to the agent. Draw order is background < goal marker <
distractors (by index) < agent.
"""

from __future__ import annotations

import dataclasses
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from laoflab.errors import ConfigError, UsageError

SPRITE = 6
PATCH = 8
N_DISCRETE = 5
ACTION_NAMES = ("noop", "up", "down", "left", "right")
# (dx, dy) unit moves per discrete action; y grows downward
ACTION_DELTAS = np.array([(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)], dtype=np.int64)
CONTINUOUS_BOUND = 3.0

AGENT_OUTER = (255, 255, 255)
AGENT_INNER = (255, 40, 40)
GOAL_COLORS = ((255, 160, 0), (0, 200, 255), (160, 255, 0), (255, 0, 200))


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    height: int = 32
    width: int = 32
    n_distractors: int = 3
    distractor_speed: int = 1
    agent_step: int = 2
    control_mode: Literal["discrete5", "continuous2d"] = "discrete5"
    palette_seed: int = 0
    goal_enabled: bool = True
    n_tasks: int = 1

    @model_validator(mode="after")
    def _check(self):
        if self.height % PATCH or self.width % PATCH or self.height < PATCH or self.width < PATCH:
            raise ValueError(f"height and width must be positive multiples of {PATCH}")
        if self.agent_step < 1:
            raise ValueError("agent_step must be >= 1")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        if self.distractor_speed < 0 or self.distractor_speed > min(self.height, self.width) - SPRITE:
            raise ValueError("distractor_speed out of range")
        if not 1 <= self.n_tasks <= len(GOAL_COLORS):
            raise ValueError(f"n_tasks must be in [1, {len(GOAL_COLORS)}]")
        return self

    @property
    def family(self) -> str:
        return "DistractorGrid" if self.control_mode == "discrete5" else "PointMass"

    @property
    def discrete(self) -> bool:
        return self.control_mode == "discrete5"

    @property
    def max_x(self) -> int:
        return self.width - SPRITE

    @property
    def max_y(self) -> int:
        return self.height - SPRITE


@dataclasses.dataclass
class EnvState:
    config: EnvConfig
    agent: np.ndarray  # (2,) float64 x, y of the sprite's top-left corner
    distractor_pos: np.ndarray  # (n, 2) int64
    distractor_vel: np.ndarray  # (n, 2) int64
    background: np.ndarray  # (H, W, 3) uint8, static per episode
    goals: np.ndarray  # (n_tasks, 2) int64, empty when goals are disabled
    task_id: int = 0
    step_index: int = 0

    def copy(self) -> EnvState:
        return dataclasses.replace(
            self,
            agent=self.agent.copy(),
            distractor_pos=self.distractor_pos.copy(),
            distractor_vel=self.distractor_vel.copy(),
        )

    @property
    def goal(self) -> np.ndarray | None:
        return self.goals[self.task_id] if len(self.goals) else None


def _palette(palette_seed: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([palette_seed, 7919])
    hues = (np.arange(n) / max(n, 1) + rng.uniform()) % 1.0
    # saturated colours away from the reserved agent colours
    rgb = np.stack([
        0.5 + 0.5 * np.cos(2 * np.pi * (hues + k / 3.0)) for k in range(3)
    ], axis=-1)
    return (40 + 170 * rgb).astype(np.uint8)


def _background(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    tiles_y, tiles_x = config.height // PATCH, config.width // PATCH
    tiles = rng.integers(10, 90, size=(tiles_y, tiles_x, 3), dtype=np.int64).astype(np.uint8)
    return np.repeat(np.repeat(tiles, PATCH, axis=0), PATCH, axis=1)


def _overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(abs(a[0] - b[0]) < SPRITE and abs(a[1] - b[1]) < SPRITE)


def env_reset(config: EnvConfig, seed: int, task_id: int | None = None) -> EnvState:
    """Deterministic initial state for ``(config, seed)``; sprites never overlap."""
    n_goals = config.n_tasks if config.goal_enabled else 0
    n_sprites = 1 + config.n_distractors + n_goals
    if n_sprites * SPRITE * SPRITE > config.height * config.width:
        raise ConfigError(f"{n_sprites} sprites do not fit in a {config.height}x{config.width} frame")
    rng = np.random.default_rng([seed, 104729])
    step = config.agent_step
    lattice_x = np.arange(0, config.max_x + 1, step)
    lattice_y = np.arange(0, config.max_y + 1, step)

    placed: list[np.ndarray] = []

    def place(lattice: bool) -> np.ndarray:
        for _ in range(1000):
            if lattice:
                p = np.array([rng.choice(lattice_x), rng.choice(lattice_y)], dtype=np.int64)
            else:
                p = rng.integers(0, [config.max_x + 1, config.max_y + 1]).astype(np.int64)
            if not any(_overlaps(p, q) for q in placed):
                placed.append(p)
                return p
        raise ConfigError("could not place sprites without overlap; reduce n_distractors")

    agent = place(lattice=True).astype(np.float64)
    goals = np.array([place(lattice=True) for _ in range(n_goals)], dtype=np.int64).reshape(n_goals, 2)
    dpos = np.array([place(lattice=False) for _ in range(config.n_distractors)], dtype=np.int64)
    dpos = dpos.reshape(config.n_distractors, 2)
    speed = config.distractor_speed
    dirs = np.array([(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)])
    dvel = dirs[rng.integers(0, len(dirs), size=config.n_distractors)] * speed
    dvel = dvel.reshape(config.n_distractors, 2).astype(np.int64)
    if task_id is None:
        task_id = int(rng.integers(0, config.n_tasks))
    elif not 0 <= task_id < config.n_tasks:
        raise UsageError(f"task_id {task_id} out of range")
    return EnvState(
        config=config,
        agent=agent,
        distractor_pos=dpos,
        distractor_vel=dvel,
        background=_background(config, rng),
        goals=goals,
        task_id=task_id,
    )


def agent_displacement(state: EnvState, action) -> np.ndarray:
    """Commanded displacement in pixels, before border clamping."""
    cfg = state.config
    if cfg.discrete:
        if isinstance(action, (bool, float, np.floating)) or np.ndim(action) != 0:
            raise UsageError(f"discrete5 expects an integer action index, got {action!r}")
        a = int(action)
        if not 0 <= a < N_DISCRETE:
            raise UsageError(f"action index {a} out of range")
        return ACTION_DELTAS[a].astype(np.float64) * cfg.agent_step
    arr = np.asarray(action, dtype=np.float64)
    if arr.shape != (2,):
        raise UsageError(f"continuous2d expects a (dx, dy) pair, got {action!r}")
    if not np.isfinite(arr).all() or np.abs(arr).max() > CONTINUOUS_BOUND + 1e-9:
        raise UsageError(f"continuous action {arr} outside [-{CONTINUOUS_BOUND}, {CONTINUOUS_BOUND}]")
    return arr


def _move_distractors(pos: np.ndarray, vel: np.ndarray, cfg: EnvConfig):
    pos, vel = pos.copy(), vel.copy()
    limits = np.array([cfg.max_x, cfg.max_y])
    nxt = pos + vel
    out = (nxt < 0) | (nxt > limits)
    vel[out] = -vel[out]
    return pos + vel, vel


def env_step(state: EnvState, action) -> tuple[EnvState, bool]:
    cfg = state.config
    delta = agent_displacement(state, action)
    nxt = state.copy()
    nxt.agent = np.clip(state.agent + delta, 0, [cfg.max_x, cfg.max_y])
    nxt.distractor_pos, nxt.distractor_vel = _move_distractors(state.distractor_pos, state.distractor_vel, cfg)
    nxt.step_index = state.step_index + 1
    return nxt, reached_goal(nxt)


def reached_goal(state: EnvState) -> bool:
    goal = state.goal
    if goal is None:
        return False
    if state.config.discrete:
        return bool(np.array_equal(state.agent, goal))
    return bool(np.abs(state.agent - goal).max() <= 1.0)


def _agent_pixel(state: EnvState) -> tuple[int, int]:
    x, y = np.floor(state.agent + 0.5).astype(np.int64)
    return int(x), int(y)


def _owner_map(state: EnvState) -> np.ndarray:
    """Per-pixel index of the topmost moving sprite: -1 background, i distractor, n agent."""
    cfg = state.config
    owner = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    for i, (x, y) in enumerate(state.distractor_pos):
        owner[y : y + SPRITE, x : x + SPRITE] = i
    ax, ay = _agent_pixel(state)
    owner[ay : ay + SPRITE, ax : ax + SPRITE] = cfg.n_distractors
    return owner


def render(state: EnvState) -> np.ndarray:
    cfg = state.config
    img = state.background.copy()
    for g, color in zip(state.goals, GOAL_COLORS):
        x, y = g
        img[y : y + SPRITE, x : x + SPRITE] = color
        img[y + 2 : y + SPRITE - 2, x + 2 : x + SPRITE - 2] = 0
    colors = _palette(cfg.palette_seed, cfg.n_distractors)
    for (x, y), color in zip(state.distractor_pos, colors):
        img[y : y + SPRITE, x : x + SPRITE] = color
    ax, ay = _agent_pixel(state)
    img[ay : ay + SPRITE, ax : ax + SPRITE] = AGENT_OUTER
    img[ay + 1 : ay + SPRITE - 1, ax + 1 : ax + SPRITE - 1] = AGENT_INNER
    return img


def oracle_depth(state: EnvState) -> np.ndarray:
    """Draw-order layer of each pixel in frame t (0 background, higher draws on top)."""
    return _owner_map(state) + 1


def oracle_flow(state: EnvState, next_state: EnvState) -> np.ndarray:
    """Exact (H, W, 2) flow: each sprite pixel carries its sprite's displacement."""
    if state.config != next_state.config:
        raise UsageError("states come from different environment configs")
    n = state.config.n_distractors
    if next_state.distractor_pos.shape != state.distractor_pos.shape:
        raise UsageError("states have different distractor counts")
    disp = np.zeros((n + 1, 2), dtype=np.float64)
    disp[:n] = next_state.distractor_pos - state.distractor_pos
    disp[n] = next_state.agent - state.agent
    owner = _owner_map(state)
    flow = np.zeros(owner.shape + (2,), dtype=np.float32)
    moving = owner >= 0
    flow[moving] = disp[owner[moving]]
    return flow


def oracle_agent_mask(state: EnvState) -> np.ndarray:
    cfg = state.config
    mask = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    ax, ay = _agent_pixel(state)
    mask[ay : ay + SPRITE, ax : ax + SPRITE] = 1
    return mask


def scripted_expert(state: EnvState):
    """Greedy move toward the goal: x axis first, then y."""
    cfg = state.config
    if not cfg.goal_enabled:
        raise UsageError("scripted expert needs goal_enabled=True")
    diff = state.goal - state.agent
    if cfg.discrete:
        if diff[0] > 0:
            return 4
        if diff[0] < 0:
            return 3
        if diff[1] > 0:
            return 2
        if diff[1] < 0:
            return 1
        return 0
    return np.clip(diff, -CONTINUOUS_BOUND, CONTINUOUS_BOUND)


def random_action(config: EnvConfig, rng: np.random.Generator):
    if config.discrete:
        return int(rng.integers(0, N_DISCRETE))
    return rng.uniform(-CONTINUOUS_BOUND, CONTINUOUS_BOUND, size=2)


class FlowSettings(BaseModel):
    """How the flow supervision stored with each transition is produced."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["oracle", "horn-schunck", "oracle+noise"] = "oracle"
    noise_std: float = 0.5
    sigma: float | None = None
    masked: bool = True
    hs_alpha: float = 1.0
    hs_iterations: int = 200

    def sigma_for(self, config: EnvConfig) -> float:
        from laoflab.flow import SIGMA_CONTINUOUS, SIGMA_DISCRETE

        if self.sigma is not None:
            return self.sigma
        return SIGMA_DISCRETE if config.discrete else SIGMA_CONTINUOUS


POLICIES = ("expert", "uniform-random", "epsilon-mixture")


def generate_transitions(
    config: EnvConfig,
    n_transitions: int,
    policy: str = "epsilon-mixture",
    seed: int = 0,
    epsilon: float = 0.3,
    flow: FlowSettings | None = None,
    horizon: int | None = None,
):
    """Roll out ``policy`` until exactly ``n_transitions`` transitions are collected.

    Episodes end when the goal is reached or after ``horizon`` steps
    (default H + W). Everything is a deterministic function of the arguments.
    """
    from laoflab import flow as flowlib
    from laoflab.data import TransitionSet

    if n_transitions <= 0:
        raise UsageError("n_transitions must be positive")
    if policy not in POLICIES:
        raise UsageError(f"unknown policy {policy!r}; choose from {POLICIES}")
    if policy != "uniform-random" and not config.goal_enabled:
        raise UsageError(f"policy {policy!r} needs goal_enabled=True")
    flow = flow or FlowSettings()
    sigma = flow.sigma_for(config)
    horizon = horizon or (config.height + config.width)
    h, w = config.height, config.width

    obs = np.zeros((n_transitions, 2, h, w, 3), dtype=np.uint8)
    flow_rgb = np.zeros((n_transitions, h, w, 3), dtype=np.uint8)
    flow_uv = np.zeros((n_transitions, h, w, 2), dtype=np.float32)
    masks = np.zeros((n_transitions, h, w), dtype=np.uint8)
    actions = np.zeros(n_transitions, dtype=np.int64) if config.discrete else np.zeros((n_transitions, 2), np.float32)
    starts, tasks = [], []

    act_rng = np.random.default_rng([seed, 99])
    noise_rng = np.random.default_rng([seed, 123])
    i, episode = 0, 0
    while i < n_transitions:
        state = env_reset(config, seed=int(np.random.SeedSequence([seed, episode]).generate_state(1)[0]))
        starts.append(i)
        tasks.append(state.task_id)
        frame = render(state)
        for _ in range(horizon):
            if i >= n_transitions:
                break
            if policy == "expert" or (policy == "epsilon-mixture" and act_rng.uniform() >= epsilon):
                action = scripted_expert(state)
            else:
                action = random_action(config, act_rng)
            nxt, done = env_step(state, action)
            next_frame = render(nxt)
            if flow.source == "horn-schunck":
                uv = flowlib.estimate_flow_hs(frame, next_frame, flow.hs_alpha, flow.hs_iterations)
            else:
                uv = oracle_flow(state, nxt)
                if flow.source == "oracle+noise":
                    uv = (uv + noise_rng.normal(0.0, flow.noise_std, size=uv.shape)).astype(np.float32)
            mask = oracle_agent_mask(state)
            rgb = flowlib.flow_to_rgb(uv, sigma)
            obs[i, 0], obs[i, 1] = frame, next_frame
            flow_uv[i] = uv
            flow_rgb[i] = flowlib.mask_flow(rgb, mask) if flow.masked else rgb
            masks[i] = mask
            actions[i] = action
            i += 1
            state, frame = nxt, next_frame
            if done:
                break
        episode += 1

    meta = {
        "flow_source": flow.source,
        "flow": flow.model_dump(),
        "sigma": sigma,
        "policy": policy,
        "epsilon": epsilon,
        "seed": seed,
        "horizon": horizon,
    }
    return TransitionSet(
        env=config,
        obs=obs,
        flow_rgb=flow_rgb,
        flow_uv=flow_uv,
        masks=masks,
        actions=actions,
        episode_starts=np.asarray(starts, dtype=np.int64),
        episode_tasks=np.asarray(tasks, dtype=np.int64),
        meta=meta,
    )


def generate_dataset(
    config: EnvConfig,
    n_transitions: int,
    policy: str,
    seed: int,
    path,
    epsilon: float = 0.3,
    flow: FlowSettings | None = None,
    test_fraction: float = 0.1,
    ratios: dict | None = None,
) -> dict:
    """Generate transitions and write them to ``path``; returns the manifest."""
    from laoflab.data import split_episodes, write_dataset

    ts = generate_transitions(config, n_transitions, policy, seed, epsilon, flow)
    return write_dataset(ts, path, splits=split_episodes(ts.n_episodes, test_fraction, seed), ratios=ratios)
