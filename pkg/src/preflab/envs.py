"""Toy MDPs with known ground-truth reward.

Three environments are provided:

* ``chainwalk``: 12-state chain, actions left/right, slip 0.1, +1 for stepping
  right from the state next to the right terminus, -0.1 per step otherwise.
* ``gridnav``: 8x8 grid with interior walls, 4 actions, slip 0.05, +1 for
  entering the goal, -0.2 for bumping into a wall or the border.
* ``pointmass``: 2-D point with velocity, box actions in [-1, 1]^2, reward
  ``-||pos - goal|| - 0.05 ||a||^2``.

Rewards are deterministic functions of the state and the *intended* action.
Terminal states are absorbing with reward 0; the tabular environments expose
the exact transition tensor so value iteration can serve as an oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .numcore import ContractError

GAMMA = 0.99


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_kind: str  # "discrete" | "box"
    n_actions: int  # discrete: number of actions; box: action dimension
    horizon: int
    gamma: float
    r_max: float
    segment_length: int
    action_low: float = -1.0
    action_high: float = 1.0

    @property
    def discrete(self) -> bool:
        return self.action_kind == "discrete"

    @property
    def action_enc_dim(self) -> int:
        """Width of the action encoding fed to networks (one-hot for discrete)."""
        return self.n_actions

    def to_dict(self) -> dict:
        return asdict(self)


class Policy(Protocol):
    def act(self, state: np.ndarray, rng: np.random.Generator): ...


class Env:
    """Common episode bookkeeping: ``reset`` then ``step`` until ``done``."""

    spec: EnvSpec

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._t = -1
        self._done = True
        self.terminated = False
        self.truncated = False

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        self._t = 0
        self._done = False
        self.terminated = False
        self.truncated = False
        return self._reset()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._t < 0:
            raise ContractError("step() called before reset()")
        if self._done:
            raise ContractError("step() called on a finished episode; call reset()")
        action = self.check_action(action)
        obs, reward, terminal = self._step(action)
        self._t += 1
        self.terminated = terminal
        self.truncated = (not terminal) and self._t >= self.spec.horizon
        self._done = self.terminated or self.truncated
        return obs, reward, self._done

    def check_action(self, action):
        raise NotImplementedError

    def encode_actions(self, actions) -> np.ndarray:
        """Map a batch of actions to the network input encoding."""
        raise NotImplementedError

    def true_reward(self, s, a) -> float:
        return float(self.true_reward_batch(np.asarray(s)[None], np.asarray(a)[None])[0])

    def true_reward_batch(self, states, actions) -> np.ndarray:
        raise NotImplementedError

    def project(self, states) -> np.ndarray:
        """Snap arbitrary state vectors onto the reachable state set."""
        return np.asarray(states, dtype=np.float64)

    def is_terminal(self, states) -> np.ndarray:
        return np.zeros(len(states), dtype=bool)


class TabularEnv(Env):
    """Finite MDP with states ``0..n_states-1`` and a fixed observation per state."""

    n_states: int
    obs_table: np.ndarray  # (n_states, state_dim)
    P: np.ndarray  # (n_states, n_actions, n_states)
    R: np.ndarray  # (n_states, n_actions)
    terminal_mask: np.ndarray  # (n_states,)
    valid_mask: np.ndarray  # states that can ever be occupied
    rho: np.ndarray  # (n_states,) initial distribution

    def _finalize(self) -> None:
        self.obs_table.setflags(write=False)
        self._cum_rho = np.cumsum(self.rho)
        self._valid_idx = np.flatnonzero(self.valid_mask)

    def _reset(self) -> np.ndarray:
        self.state = int(np.searchsorted(self._cum_rho, self.rng.random(), side="right"))
        self.state = min(self.state, self.n_states - 1)
        return self.obs_table[self.state]

    def check_action(self, action):
        try:
            a = int(action)
        except (TypeError, ValueError):
            raise ContractError(f"action {action!r} is not a discrete action") from None
        if a != action or not 0 <= a < self.spec.n_actions:
            raise ContractError(f"action {action!r} outside discrete({self.spec.n_actions})")
        return a

    def encode_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        return np.eye(self.spec.n_actions)[a]

    def state_index(self, states) -> np.ndarray:
        raise NotImplementedError

    def true_reward_batch(self, states, actions) -> np.ndarray:
        idx = self.state_index(states)
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        return self.R[idx, a]

    def project(self, states) -> np.ndarray:
        return self.obs_table[self.state_index(states)]

    def is_terminal(self, states) -> np.ndarray:
        return self.terminal_mask[self.state_index(states)]


class ChainWalk(TabularEnv):
    def __init__(
        self,
        seed: int = 0,
        n_states: int = 12,
        start: int = 2,
        slip: float = 0.1,
        step_reward: float = -0.1,
        goal_reward: float = 1.0,
        terminal: bool = True,
        horizon: int = 50,
        gamma: float = GAMMA,
    ):
        super().__init__(seed)
        self.spec = EnvSpec(
            name="chainwalk", state_dim=1, action_kind="discrete", n_actions=2,
            horizon=horizon, gamma=gamma, r_max=max(abs(step_reward), abs(goal_reward), 1e-12),
            segment_length=10,
        )
        n = n_states
        self.n_states = n
        self.slip = slip
        self.obs_table = (np.arange(n, dtype=np.float64) / (n - 1))[:, None]
        self.terminal_mask = np.zeros(n, dtype=bool)
        if terminal:
            self.terminal_mask[n - 1] = True
        self.valid_mask = np.ones(n, dtype=bool)
        self.rho = np.zeros(n)
        self.rho[start] = 1.0
        self.R = np.full((n, 2), step_reward)
        self.R[n - 2, 1] = goal_reward
        self.P = np.zeros((n, 2, n))
        for s in range(n):
            if self.terminal_mask[s]:
                self.P[s, :, s] = 1.0
                self.R[s] = 0.0
                continue
            for a in (0, 1):
                for executed, prob in ((a, 1.0 - slip), (1 - a, slip)):
                    nxt = min(max(s + (1 if executed == 1 else -1), 0), n - 1)
                    self.P[s, a, nxt] += prob
        self._finalize()

    def state_index(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64).reshape(-1)
        return np.clip(np.rint(x * (self.n_states - 1)), 0, self.n_states - 1).astype(np.int64)

    def _step(self, a: int):
        s = self.state
        reward = float(self.R[s, a])
        self.last_slipped = bool(self.slip > 0 and self.rng.random() < self.slip)
        executed = 1 - a if self.last_slipped else a
        self.state = min(max(s + (1 if executed == 1 else -1), 0), self.n_states - 1)
        return self.obs_table[self.state], reward, bool(self.terminal_mask[self.state])


GRID_LAYOUT = (
    "S.......",
    "...#....",
    "...#....",
    ".###.##.",
    ".....#..",
    ".....#..",
    ".##..#..",
    ".......G",
)
GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


class GridNav(TabularEnv):
    def __init__(self, seed: int = 0, slip: float = 0.05, horizon: int = 50, gamma: float = GAMMA):
        super().__init__(seed)
        self.spec = EnvSpec(
            name="gridnav", state_dim=2, action_kind="discrete", n_actions=4,
            horizon=horizon, gamma=gamma, r_max=1.0, segment_length=10,
        )
        rows, cols = len(GRID_LAYOUT), len(GRID_LAYOUT[0])
        self.rows, self.cols = rows, cols
        self.slip = slip
        n = rows * cols
        self.n_states = n
        self.walls = np.array([[ch == "#" for ch in row] for row in GRID_LAYOUT]).reshape(-1)
        goal = next(r * cols + c for r, row in enumerate(GRID_LAYOUT) for c, ch in enumerate(row) if ch == "G")
        self.goal = goal
        self.valid_mask = ~self.walls
        self.terminal_mask = np.zeros(n, dtype=bool)
        self.terminal_mask[goal] = True
        self.obs_table = np.array([[r / (rows - 1), c / (cols - 1)] for r in range(rows) for c in range(cols)])
        self.rho = np.zeros(n)
        for r in (0, 1):
            for c in (0, 1):
                if not self.walls[r * cols + c]:
                    self.rho[r * cols + c] = 1.0
        self.rho /= self.rho.sum()
        self.R = np.zeros((n, 4))
        self._target = np.zeros((n, 4), dtype=np.int64)
        for s in range(n):
            for a in range(4):
                t, bumped = self._move(s, a)
                self._target[s, a] = t
                if self.terminal_mask[s] or self.walls[s]:
                    continue
                self.R[s, a] = -0.2 if bumped else (1.0 if t == goal else 0.0)
        self.P = np.zeros((n, 4, n))
        for s in range(n):
            if self.terminal_mask[s] or self.walls[s]:
                self.P[s, :, s] = 1.0
                continue
            for a in range(4):
                for b in range(4):
                    prob = 1.0 - slip if b == a else slip / 3.0
                    self.P[s, a, self._target[s, b]] += prob
        self._finalize()

    def _move(self, s: int, a: int) -> tuple[int, bool]:
        r, c = divmod(s, self.cols)
        dr, dc = GRID_MOVES[a]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.rows and 0 <= nc < self.cols) or self.walls[nr * self.cols + nc]:
            return s, True
        return nr * self.cols + nc, False

    def state_index(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        r = np.clip(np.rint(x[:, 0] * (self.rows - 1)), 0, self.rows - 1).astype(np.int64)
        c = np.clip(np.rint(x[:, 1] * (self.cols - 1)), 0, self.cols - 1).astype(np.int64)
        return r * self.cols + c

    def project(self, states) -> np.ndarray:
        """Nearest free cell (Euclidean in observation space)."""
        x = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        free = self.obs_table[self._valid_idx]
        d = ((x[:, None, :] - free[None, :, :]) ** 2).sum(-1)
        return free[np.argmin(d, axis=1)]

    def _step(self, a: int):
        s = self.state
        reward = float(self.R[s, a])
        self.last_slipped = bool(self.slip > 0 and self.rng.random() < self.slip)
        executed = a
        if self.last_slipped:
            executed = int(self.rng.integers(3))
            executed += executed >= a
        self.state = int(self._target[s, executed])
        return self.obs_table[self.state], reward, bool(self.terminal_mask[self.state])


class PointMass(Env):
    """Damped double integrator on [-2, 2]^2 with small velocity noise."""

    goal = np.array([0.5, 0.5])
    dt = 0.1
    damping = 0.95
    noise_std = 0.01
    pos_bound = 2.0
    vel_bound = 1.0

    def __init__(self, seed: int = 0, horizon: int = 60, gamma: float = GAMMA):
        super().__init__(seed)
        max_dist = math.hypot(self.pos_bound + abs(self.goal[0]), self.pos_bound + abs(self.goal[1]))
        self.spec = EnvSpec(
            name="pointmass", state_dim=4, action_kind="box", n_actions=2,
            horizon=horizon, gamma=gamma, r_max=math.ceil(max_dist + 0.1),
            segment_length=25,
        )

    def _reset(self) -> np.ndarray:
        pos = self.rng.uniform(-1.5, 1.5, size=2)
        self.state = np.concatenate([pos, np.zeros(2)])
        return self.state.copy()

    def check_action(self, action):
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ContractError(f"action must be a finite length-2 vector, got {action!r}")
        if np.any(a < self.spec.action_low) or np.any(a > self.spec.action_high):
            raise ContractError(f"action {a} outside box [-1, 1]^2")
        return a

    def encode_actions(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64).reshape(-1, 2)

    def true_reward_batch(self, states, actions) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, 4)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        return -np.linalg.norm(s[:, :2] - self.goal, axis=1) - 0.05 * (a * a).sum(axis=1)

    def dynamics(self, states, actions, noise) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, 4)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        vel = np.clip(self.damping * s[:, 2:] + self.dt * a + noise, -self.vel_bound, self.vel_bound)
        pos = np.clip(s[:, :2] + self.dt * vel, -self.pos_bound, self.pos_bound)
        return np.concatenate([pos, vel], axis=1)

    def project(self, states) -> np.ndarray:
        s = np.array(states, dtype=np.float64).reshape(-1, 4)
        s[:, :2] = np.clip(s[:, :2], -self.pos_bound, self.pos_bound)
        s[:, 2:] = np.clip(s[:, 2:], -self.vel_bound, self.vel_bound)
        return s

    def _step(self, a):
        reward = float(self.true_reward_batch(self.state, a)[0])
        noise = self.rng.normal(scale=self.noise_std, size=2)
        self.state = self.dynamics(self.state, a, noise)[0]
        return self.state.copy(), reward, False


ENV_CLASSES: dict[str, Callable[..., Env]] = {
    "chainwalk": ChainWalk,
    "gridnav": GridNav,
    "pointmass": PointMass,
}


def make_env(name: str, seed: int = 0, **kwargs) -> Env:
    try:
        cls = ENV_CLASSES[name]
    except KeyError:
        raise ContractError(f"unknown env {name!r}; choose from {sorted(ENV_CLASSES)}") from None
    return cls(seed=seed, **kwargs)


def reset(env: Env) -> np.ndarray:
    return env.reset()


def step(env: Env, action):
    return env.step(action)


def true_reward(env: Env, s, a) -> float:
    return env.true_reward(s, a)


# -- simple policies used as anchors ----------------------------------------


class RandomPolicy:
    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def act(self, state, rng: np.random.Generator):
        if self.spec.discrete:
            return int(rng.integers(self.spec.n_actions))
        return rng.uniform(self.spec.action_low, self.spec.action_high, size=self.spec.n_actions)


class PDController:
    """``a = clip(kp (goal - pos) - kd vel)`` for the point mass."""

    def __init__(self, kp: float, kd: float, goal=PointMass.goal):
        self.kp, self.kd = float(kp), float(kd)
        self.goal = np.asarray(goal, dtype=np.float64)

    def act(self, state, rng=None):
        s = np.asarray(state, dtype=np.float64)
        return np.clip(self.kp * (self.goal - s[:2]) - self.kd * s[2:], -1.0, 1.0)


# -- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int


def rollout_return(env: Env, policy: Policy, rng: np.random.Generator) -> float:
    s = env.reset()
    total, disc, done = 0.0, 1.0, False
    gamma = env.spec.gamma
    while not done:
        s, r, done = env.step(policy.act(s, rng))
        total += disc * r
        disc *= gamma
    return total


def evaluate_policy(env: Env, policy: Policy, episodes: int, seed: int) -> Estimate:
    """Monte-Carlo discounted return under the true reward.

    The environment and the policy get separate streams derived from ``seed``.
    """
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    env_seed, pol_seed = np.random.SeedSequence(seed).generate_state(2)
    env.seed(int(env_seed))
    rng = np.random.default_rng(int(pol_seed))
    returns = np.array([rollout_return(env, policy, rng) for _ in range(episodes)])
    stderr = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return Estimate(float(returns.mean()), stderr, episodes)


def normalized_score(J: float, J_r: float, J_e: float) -> float:
    if J_e == J_r:
        raise ContractError("degenerate normalization: J_e == J_r")
    return (J - J_r) / (J_e - J_r) * 100.0


def reward_bound_scan(env: Env, samples: int = 100_000, seed: int = 0) -> float:
    """Largest |R*(s,a)| found: exhaustive for tabular envs, sampled otherwise."""
    if isinstance(env, TabularEnv):
        return float(np.abs(env.R[env.valid_mask]).max())
    rng = np.random.default_rng(seed)
    pb, vb = PointMass.pos_bound, PointMass.vel_bound
    s = np.concatenate(
        [rng.uniform(-pb, pb, size=(samples, 2)), rng.uniform(-vb, vb, size=(samples, 2))], axis=1
    )
    a = rng.uniform(-1, 1, size=(samples, 2))
    return float(np.abs(env.true_reward_batch(s, a)).max())


# -- expert references and the frozen registry -------------------------------


def tune_pd_controller(env: PointMass, seed: int = 0, iters: int = 8, pop: int = 24, episodes: int = 6) -> PDController:
    """Cross-entropy search over (kp, kd) gains."""
    rng = np.random.default_rng(seed)
    mu, sd = np.array([2.0, 1.0]), np.array([1.5, 1.0])
    for it in range(iters):
        cand = np.abs(mu + sd * rng.normal(size=(pop, 2)))
        scores = [
            evaluate_policy(env, PDController(*c), episodes, seed=1000 * it + 7).mean for c in cand
        ]
        elite = cand[np.argsort(scores)[-pop // 4:]]
        mu, sd = elite.mean(axis=0), elite.std(axis=0) + 1e-3
    return PDController(*mu)


def expert_policy(env: Env):
    if isinstance(env, TabularEnv):
        from .policy import GreedyTablePolicy, value_iteration_oracle

        return GreedyTablePolicy(value_iteration_oracle(env, env.R, env.spec.gamma), env.state_index)
    gains = load_registry().get(env.spec.name, {}).get("expert_gains")
    if gains is not None:
        return PDController(*gains)
    return tune_pd_controller(env)


REGISTRY_FILE = "env_registry.json"
ANCHOR_EPISODES = 500
REGISTRY_VERSION = 1


def compute_anchors(name: str, episodes: int = ANCHOR_EPISODES, seed: int = 0) -> dict:
    env = make_env(name)
    if isinstance(env, TabularEnv):
        expert = expert_policy(env)
        gains = None
    else:
        expert = tune_pd_controller(env, seed=seed)
        gains = [expert.kp, expert.kd]
    J_r = evaluate_policy(env, RandomPolicy(env.spec), episodes, seed=seed + 1).mean
    J_e = evaluate_policy(env, expert, episodes, seed=seed + 2).mean
    entry = {"spec": env.spec.to_dict(), "J_r": J_r, "J_e": J_e}
    if gains is not None:
        entry["expert_gains"] = gains
    return entry


def build_registry(path: str | Path, names=tuple(ENV_CLASSES)) -> dict:
    reg = {"version": REGISTRY_VERSION, "envs": {n: compute_anchors(n) for n in names}}
    Path(path).write_text(json.dumps(reg, indent=2, sort_keys=True) + "\n")
    return reg


_REGISTRY_CACHE: dict | None = None


def load_registry(path: str | Path | None = None) -> dict:
    global _REGISTRY_CACHE
    if path is not None:
        return json.loads(Path(path).read_text())["envs"]
    if _REGISTRY_CACHE is None:
        text = resources.files("preflab").joinpath("data", REGISTRY_FILE).read_text()
        _REGISTRY_CACHE = json.loads(text)["envs"]
    return _REGISTRY_CACHE


def anchors(name: str) -> tuple[float, float]:
    entry = load_registry()[name]
    return entry["J_r"], entry["J_e"]
