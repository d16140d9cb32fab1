"""Offline transition datasets and their four collection regimes.

A dataset is a columnar store of (s, a, s', r, done) in float32, plus a
header carrying provenance and the normalization statistics every consumer
shares.  Collection regimes mirror the usual offline-RL menu:

  random         a uniform policy
  medium         a partially trained actor checkpoint
  medium-replay  the chronological replay prefix of the online run that
                 produced the medium checkpoint (padded with medium-policy
                 rollouts if the prefix is shorter than requested)
  medium-expert  an equal blend of medium and expert rollouts
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .envs import BehaviorPolicy, ContinuousEnv, EnvError

BEHAVIOR_TAGS = ("random", "medium", "medium-replay", "medium-expert")
STD_FLOOR = 1e-6


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    done: bool

    def __post_init__(self):
        for arr in (self.s, self.a, self.s_next):
            if not np.all(np.isfinite(arr)):
                raise EnvError("transition with non-finite entries")
        if not np.isfinite(self.r):
            raise EnvError("transition with non-finite reward")


class TransitionDataset:
    """Columnar offline dataset with a verbatim-preserved header."""

    def __init__(self, header: dict, s, a, s_next, r, done):
        self.header = header
        self.s = np.asarray(s, dtype=np.float32)
        self.a = np.asarray(a, dtype=np.float32)
        self.s_next = np.asarray(s_next, dtype=np.float32)
        self.r = np.asarray(r, dtype=np.float32)
        self.done = np.asarray(done, dtype=np.uint8)
        n = self.s.shape[0]
        if int(header["count"]) != n:
            raise io.FormatError(f"header count {header['count']} but {n} records")
        if header["behavior_tag"] not in BEHAVIOR_TAGS:
            raise io.FormatError(f"unknown behavior tag {header['behavior_tag']!r}")
        for key in ("state_std", "action_std", "reward_std"):
            if np.any(np.asarray(header[key]) <= 0):
                raise io.FormatError(f"{key} must be positive (floored at {STD_FLOOR})")

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def d_s(self) -> int:
        return self.s.shape[1]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    def record(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], self.s_next[i], float(self.r[i]), bool(self.done[i]))

    # -- normalization ------------------------------------------------------

    @property
    def state_mean(self) -> np.ndarray:
        return np.asarray(self.header["state_mean"], dtype=np.float32)

    @property
    def state_std(self) -> np.ndarray:
        return np.asarray(self.header["state_std"], dtype=np.float32)

    @property
    def action_mean(self) -> np.ndarray:
        return np.asarray(self.header["action_mean"], dtype=np.float32)

    @property
    def action_std(self) -> np.ndarray:
        return np.asarray(self.header["action_std"], dtype=np.float32)

    @property
    def reward_mean(self) -> float:
        return float(self.header["reward_mean"])

    @property
    def reward_std(self) -> float:
        return float(self.header["reward_std"])

    # -- construction / persistence -----------------------------------------

    @classmethod
    def from_arrays(cls, env_id: str, tag: str, seed: int, s, a, s_next, r, done,
                    meta: dict | None = None, cfg_hash: str = "") -> "TransitionDataset":
        s = np.asarray(s, dtype=np.float32)
        a = np.asarray(a, dtype=np.float32)
        s_next = np.asarray(s_next, dtype=np.float32)
        r = np.asarray(r, dtype=np.float32)
        done = np.asarray(done, dtype=np.uint8)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a)) and np.all(np.isfinite(s_next)) and np.all(np.isfinite(r))):
            raise EnvError("dataset arrays contain non-finite entries")

        def stats(x):
            mean = x.mean(axis=0, dtype=np.float64).astype(np.float32)
            std = np.maximum(x.std(axis=0, dtype=np.float64).astype(np.float32), STD_FLOOR)
            return mean.tolist(), std.tolist()

        state_mean, state_std = stats(s)
        action_mean, action_std = stats(a)
        reward_mean, reward_std = stats(r.reshape(-1, 1))
        header = {
            "magic": io.DATASET_MAGIC,
            "version": io.FORMAT_VERSION,
            "env_id": env_id,
            "d_s": int(s.shape[1]),
            "d_a": int(a.shape[1]),
            "count": int(s.shape[0]),
            "behavior_tag": tag,
            "seed": int(seed),
            "state_mean": state_mean,
            "state_std": state_std,
            "action_mean": action_mean,
            "action_std": action_std,
            "reward_mean": reward_mean[0],
            "reward_std": reward_std[0],
            "config_hash": cfg_hash or io.config_hash({"env_id": env_id, "tag": tag, "n": int(s.shape[0]), "seed": int(seed)}),
            "meta": meta or {},
        }
        return cls(header, s, a, s_next, r, done)

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=io.record_dtype(self.d_s, self.d_a))
        rec["s"] = self.s
        rec["a"] = self.a
        rec["s_next"] = self.s_next
        rec["r"] = self.r
        rec["done"] = self.done
        return rec

    def save(self, path: str) -> None:
        io.save_dataset_file(path, self.header, self.to_records())

    @classmethod
    def load(cls, path: str) -> "TransitionDataset":
        header, rec = io.load_dataset_file(path)
        return cls(header, rec["s"], rec["a"], rec["s_next"], rec["r"], rec["done"])


def behavior_episode_returns(ds: TransitionDataset) -> np.ndarray:
    """Undiscounted return of every complete episode in the dataset."""
    ends = np.flatnonzero(ds.done)
    returns = []
    start = 0
    for end in ends:
        returns.append(float(ds.r[start:end + 1].sum()))
        start = end + 1
    return np.asarray(returns)


def dataset_behavior_return(ds: TransitionDataset) -> float:
    returns = behavior_episode_returns(ds)
    if returns.size == 0:
        raise EnvError("dataset holds no complete episode")
    return float(returns.mean())


# -- collection ----------------------------------------------------------------


def _rollout_transitions(env: ContinuousEnv, policy: BehaviorPolicy, n_steps: int,
                         rng: np.random.Generator):
    d_s, d_a = env.d_s, env.d_a
    s_buf = np.empty((n_steps, d_s), dtype=np.float32)
    a_buf = np.empty((n_steps, d_a), dtype=np.float32)
    sp_buf = np.empty((n_steps, d_s), dtype=np.float32)
    r_buf = np.empty(n_steps, dtype=np.float32)
    d_buf = np.empty(n_steps, dtype=np.uint8)
    i = 0
    while i < n_steps:
        episode_policy = policy.episode_policy(rng)
        s = env.reset(int(rng.integers(2**31)))
        for t in range(env.horizon):
            a = np.clip(episode_policy(s, rng), -1.0, 1.0)
            s_next, r, done_env = env.step(s, a, rng)
            done = done_env or t == env.horizon - 1
            s_buf[i], a_buf[i], sp_buf[i], r_buf[i], d_buf[i] = s, a, s_next, r, done
            i += 1
            s = s_next
            if done or i == n_steps:
                break
    return s_buf, a_buf, sp_buf, r_buf, d_buf


def generate_dataset(env: ContinuousEnv, tag: str, n_steps: int, seed: int,
                     medium_policy: BehaviorPolicy | None = None,
                     expert_policy: BehaviorPolicy | None = None,
                     replay_arrays: tuple | None = None,
                     meta: dict | None = None) -> TransitionDataset:
    """Collect exactly `n_steps` transitions under the tagged regime.

    Pure in (env, tag, n_steps, seed) once the checkpoint policies are
    fixed.  Tags other than `random` need trained behavior checkpoints;
    `harness.ensure_behavior_artifacts` produces and caches them (the CLI
    path `moan gen-data` does this automatically).
    """
    if tag not in BEHAVIOR_TAGS:
        raise EnvError(f"unknown behavior tag {tag!r} (expected one of {BEHAVIOR_TAGS})")
    missing = ("run `moan gen-data` (which trains and caches the online constructor checkpoints) "
               "or pass the corresponding policy explicitly")
    rng = np.random.default_rng(np.random.SeedSequence([BEHAVIOR_TAGS.index(tag), seed]))

    if tag == "random":
        arrays = _rollout_transitions(env, BehaviorPolicy.uniform_random(env.d_a), n_steps, rng)
    elif tag == "medium":
        if medium_policy is None:
            raise EnvError(f"medium dataset needs a medium checkpoint: {missing}")
        arrays = _rollout_transitions(env, medium_policy, n_steps, rng)
    elif tag == "medium-expert":
        if medium_policy is None or expert_policy is None:
            raise EnvError(f"medium-expert dataset needs medium and expert checkpoints: {missing}")
        if n_steps % 2 != 0:
            raise EnvError("medium-expert needs an even step count (equal halves)")
        half = n_steps // 2
        med = _rollout_transitions(env, medium_policy, half, rng)
        exp = _rollout_transitions(env, expert_policy, half, rng)
        arrays = tuple(np.concatenate([m, e]) for m, e in zip(med, exp))
    else:  # medium-replay
        if replay_arrays is None:
            raise EnvError(f"medium-replay dataset needs the online constructor's replay prefix: {missing}")
        prefix = tuple(np.asarray(x) for x in replay_arrays)
        have = prefix[0].shape[0]
        if have >= n_steps:
            arrays = tuple(x[:n_steps] for x in prefix)
        else:
            if medium_policy is None:
                raise EnvError(f"medium-replay padding needs the medium checkpoint: {missing}")
            tail = _rollout_transitions(env, medium_policy, n_steps - have, rng)
            arrays = tuple(np.concatenate([p, t]) for p, t in zip(prefix, tail))

    return TransitionDataset.from_arrays(env.kind, tag, seed, *arrays, meta=meta)
