"""Ground-truth continuous toy environments and policy evaluation.

Two tasks, both with actions in [-1, 1]^d_a and bounded rewards:

pointmass2d
    State (x, y, vx, vy) in a [-1, 1]^2 arena.  Actions command velocity
    directly, so a zero action (with zero noise) leaves the state fixed.
    A vertical wall blocks the straight route to the goal: motion segments
    that would cross it are stopped along the wall normal and cost a
    penalty.  A trap region near the wall's top corner ends the episode
    with a large penalty; the logging policies learn to arc around it, so
    it is exactly the under-represented danger zone an offline learner can
    be lured into.

pendulum1d
    Classic torque-limited swing-up with state (cos t, sin t, tdot) and a
    semi-implicit Euler integrator.  Reward is the usual quadratic cost
    rescaled into [0, 1].

Environments are value-like: all dynamics state is passed in and out of
`step`, instances hold only parameters (plus a step-invocation counter used
by the offline-purity tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EnvError(ValueError):
    pass


def _as_rng(noise) -> np.random.Generator | None:
    """Accept a Generator, an int seed, or None (zero noise)."""
    if noise is None or isinstance(noise, np.random.Generator):
        return noise
    return np.random.default_rng(noise)


@dataclass
class ContinuousEnv:
    """Parameters of one toy task; see `make_env`."""

    kind: str
    d_s: int
    d_a: int
    horizon: int
    gamma: float
    noise_sigma: float
    params: dict = field(default_factory=dict)
    step_invocations: int = 0

    # -- pointmass2d geometry helpers --------------------------------------

    def _wall(self) -> tuple[float, float, float]:
        p = self.params
        return p["wall_x"], p["wall_y_lo"], p["wall_y_hi"]

    def _crosses_wall(self, p0: np.ndarray, p1: np.ndarray) -> bool:
        wx, ylo, yhi = self._wall()
        dx0, dx1 = p0[0] - wx, p1[0] - wx
        if not (dx0 < 0 < dx1 or dx1 < 0 < dx0):
            return False
        t = dx0 / (dx0 - dx1)
        y_cross = p0[1] + t * (p1[1] - p0[1])
        return ylo <= y_cross <= yhi

    def _in_trap(self, p: np.ndarray) -> bool:
        lo = self.params["trap_lo"]
        hi = self.params["trap_hi"]
        return bool(lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1])

    # -- public API ---------------------------------------------------------

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.kind == "pointmass2d":
            # uniform over the arena start box, rejecting the trap plus a
            # safety margin so no episode begins already doomed
            lo = self.params["start_lo"]
            hi = self.params["start_hi"]
            margin = self.params["trap_margin"]
            while True:
                pos = rng.uniform(lo, hi)
                t_lo = self.params["trap_lo"] - margin
                t_hi = self.params["trap_hi"] + margin
                if not (t_lo[0] <= pos[0] <= t_hi[0] and t_lo[1] <= pos[1] <= t_hi[1]):
                    break
            return np.array([pos[0], pos[1], 0.0, 0.0])
        theta = math.pi + rng.uniform(-0.5, 0.5)
        theta_dot = rng.uniform(-0.1, 0.1)
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def step(self, s: np.ndarray, a: np.ndarray, noise=None) -> tuple[np.ndarray, float, bool]:
        """One transition; `noise` is a Generator, an int seed, or None."""
        self.step_invocations += 1
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise EnvError("non-finite state passed to step")
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        rng = _as_rng(noise)
        if self.kind == "pointmass2d":
            return self._step_pointmass(s, a, rng)
        return self._step_pendulum(s, a, rng)

    def _step_pointmass(self, s, a, rng) -> tuple[np.ndarray, float, bool]:
        p = self.params
        pos, dt = s[:2], p["dt"]
        vel = a * p["speed"]
        target = pos + dt * vel
        if rng is not None:
            target = target + rng.normal(0.0, self.noise_sigma, size=2)

        hit_wall = False
        if self._crosses_wall(pos, target):
            hit_wall = True
            target = np.array([pos[0], target[1]])
            if self._crosses_wall(pos, target):  # degenerate double-cross
                target = pos.copy()
        clipped = np.clip(target, -1.0, 1.0)
        hit_boundary = bool(np.any(clipped != target))
        target = clipped

        # shaping slope stays strictly positive over the whole arena (the
        # farthest corner is ~2.4 from the goal, inside the /3 normalizer)
        dist = float(np.linalg.norm(target - p["goal"]))
        reward = 0.1 * (1.0 - min(dist / 3.0, 1.0))
        if dist <= p["goal_radius"]:
            reward += 1.0
        if hit_wall:
            reward -= 0.1
        if hit_boundary:
            reward -= 0.05  # pressing into the arena edge is never free
        done = self._in_trap(target)
        if done:
            reward -= 1.0
        s_next = np.array([target[0], target[1], vel[0], vel[1]])
        return s_next, reward, done

    def _step_pendulum(self, s, a, rng) -> tuple[np.ndarray, float, bool]:
        p = self.params
        theta = math.atan2(s[1], s[0])
        theta_dot = float(s[2])
        torque = float(a[0]) * p["torque_scale"]
        g, m, l, dt = p["g"], p["mass"], p["length"], p["dt"]

        theta_ddot = 3.0 * g / (2.0 * l) * math.sin(theta) + 3.0 / (m * l * l) * torque
        theta_dot = theta_dot + dt * theta_ddot
        if rng is not None:
            theta_dot += rng.normal(0.0, self.noise_sigma)
        theta_dot = float(np.clip(theta_dot, -p["max_speed"], p["max_speed"]))
        theta = theta + dt * theta_dot

        angle = math.atan2(math.sin(theta), math.cos(theta))  # wrap to (-pi, pi]
        cost = angle * angle + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque
        reward = 1.0 - cost / p["max_cost"]
        s_next = np.array([math.cos(theta), math.sin(theta), theta_dot])
        return s_next, reward, False


def make_env(kind: str) -> ContinuousEnv:
    if kind == "pointmass2d":
        return ContinuousEnv(
            kind="pointmass2d",
            d_s=4,
            d_a=2,
            horizon=200,
            gamma=0.99,
            noise_sigma=0.01,
            params={
                "dt": 0.1,
                "speed": 1.0,
                "goal": np.array([0.7, 0.7]),
                "goal_radius": 0.18,
                "start_lo": np.array([-0.95, -0.95]),
                "start_hi": np.array([0.95, 0.95]),
                "trap_margin": 0.1,
                "wall_x": 0.0,
                "wall_y_lo": -1.0,
                "wall_y_hi": 0.1,
                # terminal danger strip between the southern half and the
                # goal: the real environment ends the episode inside it, so
                # safe routes detour around its eastern edge.  Logged
                # trajectories rarely enter, which leaves its interior out
                # of distribution for anything trained on the data.
                "trap_lo": np.array([0.02, -0.45]),
                "trap_hi": np.array([0.72, -0.15]),
            },
        )
    if kind == "pendulum1d":
        max_speed = 8.0
        torque_scale = 2.0
        max_cost = math.pi**2 + 0.1 * max_speed**2 + 0.001 * torque_scale**2
        return ContinuousEnv(
            kind="pendulum1d",
            d_s=3,
            d_a=1,
            horizon=200,
            gamma=0.99,
            noise_sigma=0.01,
            params={
                "dt": 0.05,
                "g": 10.0,
                "mass": 1.0,
                "length": 1.0,
                "torque_scale": torque_scale,
                "max_speed": max_speed,
                "max_cost": max_cost,
            },
        )
    raise EnvError(f"unknown environment kind {kind!r}")


# Spec-level free functions (aliases over the methods).


def env_reset(env: ContinuousEnv, seed: int) -> np.ndarray:
    return env.reset(seed)


def env_step(env: ContinuousEnv, s, a, noise=None):
    return env.step(s, a, noise)


# -- behavior policies -------------------------------------------------------


@dataclass
class BehaviorPolicy:
    """A data-collection policy: uniform random, a checkpointed actor
    (wrapped as a callable), or a per-episode mixture of policies."""

    kind: str
    action_fn: object = None
    components: tuple = ()
    weights: tuple = ()
    d_a: int = 0

    @classmethod
    def uniform_random(cls, d_a: int) -> "BehaviorPolicy":
        return cls(kind="uniform_random", d_a=d_a)

    @classmethod
    def checkpoint(cls, action_fn) -> "BehaviorPolicy":
        """`action_fn(s, rng) -> a` wrapping a trained actor."""
        return cls(kind="checkpoint", action_fn=action_fn)

    @classmethod
    def mixture(cls, components, weights) -> "BehaviorPolicy":
        weights = tuple(float(w) for w in weights)
        if len(components) != len(weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise EnvError("mixture weights must match components and sum to 1")
        return cls(kind="mixture", components=tuple(components), weights=weights)

    def episode_policy(self, rng: np.random.Generator):
        """Resolve to a concrete `(s, rng) -> a` for one episode."""
        if self.kind == "uniform_random":
            d_a = self.d_a
            return lambda s, r: r.uniform(-1.0, 1.0, size=d_a)
        if self.kind == "checkpoint":
            return self.action_fn
        idx = rng.choice(len(self.components), p=np.asarray(self.weights))
        return self.components[idx].episode_policy(rng)


# -- evaluation ---------------------------------------------------------------


def evaluate_policy(env: ContinuousEnv, policy, episodes: int, seed: int) -> tuple[float, float]:
    """Mean and std of undiscounted episode returns.

    `policy` is a callable s -> a (deterministic evaluation protocol).
    Episodes are seeded independently from `seed`, so the same call is
    reproducible and different callers never share noise streams.
    """
    if episodes < 1:
        raise EnvError("need at least one evaluation episode")
    returns = np.empty(episodes)
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    for ep, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        s = env.reset(int(rng.integers(2**31)))
        total = 0.0
        for _ in range(env.horizon):
            s, r, done = env.step(s, policy(s), rng)
            total += r
            if done:
                break
        returns[ep] = total
    return float(returns.mean()), float(returns.std())


def normalized_score(j: float, j_random: float, j_expert: float) -> float:
    """Linear score: 0 at the random reference, 100 at the expert."""
    if math.isclose(j_expert, j_random, abs_tol=1e-12):
        raise EnvError("degenerate reference pair: expert and random returns coincide")
    return 100.0 * (j - j_random) / (j_expert - j_random)
