"""Soft actor-critic over the package's numeric core, plus the branched
model-rollout machinery that feeds it in the offline setting.

The agent is a squashed-Gaussian policy with twin critics, delayed target
critics, and a learned temperature.  Offline training alternates short
model rollouts (started from dataset states, rewards reshaped by the
penalty module) with critic/actor/temperature updates on mixed real/model
batches.  The same agent trains online against a real environment, which
is how the dataset-construction checkpoints are produced and how the
online sanity baseline runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io, nets
from . import tensor as T
from .adversarial import Discriminator, DynamicsEnsemble
from .data import TransitionDataset
from .envs import ContinuousEnv, evaluate_policy
from .nets import AdamState, DenseNet, NetError, NetSpec
from .penalty import PenaltyConfig, shape_rewards_batch
from .tensor import Tensor

LOGPROB_EPS = 1e-6  # regularizes the tanh Jacobian at the squash boundary


@dataclass
class PolicyTrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_temperature: float = 3e-4
    batch_size: int = 256
    real_fraction: float = 0.05
    rollout_horizon: int = 5
    rollouts_per_epoch: int = 400
    epochs: int = 80
    updates_per_epoch: int = 250
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    eval_episodes: int = 10
    model_buffer_epochs: int = 5  # rollout retention window

    def __post_init__(self):
        if self.rollout_horizon < 1:
            raise NetError("rollout horizon must be >= 1")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise NetError("real_fraction must be in [0, 1]")


class SACAgent:
    """Policy, twin critics, delayed targets, and a learned temperature."""

    def __init__(self, d_s: int, d_a: int, hidden: tuple[int, ...], rng: np.random.Generator):
        self.d_s, self.d_a = d_s, d_a
        self.policy_net = DenseNet(NetSpec((d_s, *hidden, 2 * d_a), "relu", "gaussian_diag"))
        self.q_net = DenseNet(NetSpec((d_s + d_a, *hidden, 1), "relu", "linear"))
        self.policy = self.policy_net.init_params(rng)
        self.q1 = self.q_net.init_params(rng)
        self.q2 = self.q_net.init_params(rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_temperature = np.zeros(1, dtype=np.float32)
        self.target_entropy = -float(d_a)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    def act(self, s, rng: np.random.Generator | None = None, deterministic: bool = False
            ) -> tuple[np.ndarray, float]:
        """Sample one action with its squashed-Gaussian log-density."""
        a, logp = self.act_batch(np.asarray(s, dtype=np.float32).reshape(1, -1), rng, deterministic)
        return a[0], float(logp[0])

    def act_batch(self, s, rng: np.random.Generator | None = None, deterministic: bool = False):
        s = np.atleast_2d(s).astype(np.float32, copy=False)
        out = nets.gaussian_head_np(self.policy_net.raw_np(self.policy, s))
        if deterministic:
            eps = np.zeros_like(out.mean)
        else:
            if rng is None:
                raise NetError("stochastic action sampling needs an rng")
            eps = rng.standard_normal(out.mean.shape).astype(np.float32)
        z = out.mean + out.std * eps
        a = np.tanh(z)
        logp = (-0.5 * (nets.LOG_2PI + out.log_variance + eps * eps)
                - np.log(1.0 - a * a + LOGPROB_EPS)).sum(axis=1)
        return a, logp

    def policy_fn(self, deterministic: bool = True, rng: np.random.Generator | None = None):
        """Callable s -> a for evaluation or data collection."""
        if deterministic:
            return lambda s: self.act_batch(s.reshape(1, -1), deterministic=True)[0][0]
        return lambda s, r=rng: self.act_batch(s.reshape(1, -1), r)[0][0]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"policy": self.policy.copy(), "q1": self.q1.copy(), "q2": self.q2.copy(),
                "q1_target": self.q1_target.copy(), "q2_target": self.q2_target.copy(),
                "log_temperature": self.log_temperature.copy()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.policy = snap["policy"].copy()
        self.q1 = snap["q1"].copy()
        self.q2 = snap["q2"].copy()
        self.q1_target = snap["q1_target"].copy()
        self.q2_target = snap["q2_target"].copy()
        self.log_temperature = snap["log_temperature"].copy()


def sample_action(agent: SACAgent, s, rng: np.random.Generator | None = None,
                  deterministic: bool = False):
    return agent.act(s, rng, deterministic)


# -- replay storage -------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring of transitions; `role` marks whether rewards are
    raw environment rewards ("env") or shaped model rewards ("model")."""

    def __init__(self, capacity: int, d_s: int, d_a: int, role: str):
        if role not in ("env", "model"):
            raise NetError(f"unknown buffer role {role!r}")
        self.capacity = capacity
        self.role = role
        self.s = np.zeros((capacity, d_s), dtype=np.float32)
        self.a = np.zeros((capacity, d_a), dtype=np.float32)
        self.r = np.zeros(capacity, dtype=np.float32)
        self.s_next = np.zeros((capacity, d_s), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.uint8)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def push_batch(self, s, a, r, s_next, done) -> None:
        s = np.atleast_2d(s)
        n = s.shape[0]
        for i in range(0, n, self.capacity):
            chunk = slice(i, min(i + self.capacity, n))
            self._push_chunk(s[chunk], np.atleast_2d(a)[chunk], np.asarray(r).reshape(-1)[chunk],
                             np.atleast_2d(s_next)[chunk], np.asarray(done).reshape(-1)[chunk])

    def _push_chunk(self, s, a, r, s_next, done) -> None:
        n = s.shape[0]
        idx = (self.pos + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = a
        self.r[idx] = r
        self.s_next[idx] = s_next
        self.done[idx] = done
        self.pos = int((self.pos + n) % self.capacity)
        self.size = int(min(self.size + n, self.capacity))

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise NetError(f"cannot sample from an empty {self.role} buffer")
        idx = rng.integers(self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]

    @classmethod
    def from_dataset(cls, ds: TransitionDataset) -> "ReplayBuffer":
        buf = cls(len(ds), ds.d_s, ds.d_a, "env")
        buf.push_batch(ds.s, ds.a, ds.r, ds.s_next, ds.done)
        return buf


def mixed_batch(env_buf: ReplayBuffer, model_buf: ReplayBuffer, batch_size: int,
                real_fraction: float, rng: np.random.Generator):
    """ceil(f * batch) env rows, the rest model rows, uniform with replacement."""
    n_real = int(np.ceil(real_fraction * batch_size))
    n_model = batch_size - n_real
    parts = []
    if n_real > 0:
        parts.append(env_buf.sample(n_real, rng))
    if n_model > 0:
        parts.append(model_buf.sample(n_model, rng))
    return tuple(np.concatenate(cols) for cols in zip(*parts)) if len(parts) > 1 else parts[0]


# -- loss builders (taped; also used by the gradient-verification suite) --------


def critic_loss_t(q_net: DenseNet, params, s, a, y) -> Tensor:
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1, dtype=np.float32)
    pred = q_net.raw_t(params, x)
    return T.mean_all(T.square(T.sub(pred, np.reshape(y, (-1, 1)).astype(np.float32))))


def policy_sample_t(policy_net: DenseNet, params, s, eps):
    """Taped squashed-Gaussian sample and per-row log-probability."""
    raw = policy_net.raw_t(params, np.atleast_2d(s).astype(np.float32))
    mean, logvar = nets.gaussian_head_t(raw)
    z = T.add(mean, T.mul(T.exp(T.mul(logvar, 0.5)), eps))
    a = T.tanh(z)
    gauss = T.mul(T.sum_rows(T.add(T.add(logvar, np.asarray(eps) * np.asarray(eps)), nets.LOG_2PI)), -0.5)
    jacobian = T.sum_rows(T.log(T.add(T.sub(1.0, T.square(a)), LOGPROB_EPS)))
    return a, T.sub(gauss, jacobian)


def actor_loss_t(agent: SACAgent, params, s, eps, alpha: float) -> Tensor:
    """mean(alpha * log pi - min(Q1, Q2)); critic parameters held constant."""
    a, logp = policy_sample_t(agent.policy_net, params, s, eps)
    x = T.concat_cols([Tensor(np.atleast_2d(s).astype(np.float32)), a])
    q = T.minimum(agent.q_net.raw_t(agent.q1, x), agent.q_net.raw_t(agent.q2, x))
    return T.mean_all(T.sub(T.mul(logp, alpha), q))


def temperature_loss_t(log_temp, logp: np.ndarray, target_entropy: float) -> Tensor:
    """-log_temp * mean(log pi + target entropy); log-probabilities constant."""
    stat = float(np.mean(logp) + target_entropy)
    lt = log_temp if isinstance(log_temp, Tensor) else Tensor(log_temp)
    return T.mean_all(T.mul(lt, -stat))


@dataclass
class SacLosses:
    critic1: float
    critic2: float
    actor: float
    temperature: float


def sac_update(agent: SACAgent, batch, cfg: PolicyTrainConfig,
               adams: dict[str, AdamState], rng: np.random.Generator) -> SacLosses:
    """One twin-critic soft Bellman regression + actor + temperature update,
    followed by polyak target smoothing."""
    s, a, r, s_next, done = batch
    if s.shape[0] == 0:
        raise NetError("sac_update needs a non-empty batch")

    a_next, logp_next = agent.act_batch(s_next, rng)
    x_next = np.concatenate([s_next, a_next], axis=1, dtype=np.float32)
    q_t = np.minimum(agent.q_net.raw_np(agent.q1_target, x_next),
                     agent.q_net.raw_np(agent.q2_target, x_next)).reshape(-1)
    y = r + cfg.gamma * (1.0 - done.astype(np.float32)) * (q_t - agent.temperature * logp_next)

    losses = {}
    for name in ("q1", "q2"):
        leaf = Tensor(getattr(agent, name))
        loss = critic_loss_t(agent.q_net, leaf, s, a, y)
        T.backward(loss)
        new_params, adams[name] = nets.adam_step(getattr(agent, name), leaf.grad, adams[name])
        setattr(agent, name, new_params)
        losses[name] = float(loss.data)

    eps = rng.standard_normal((s.shape[0], agent.d_a)).astype(np.float32)
    leaf = Tensor(agent.policy)
    loss = actor_loss_t(agent, leaf, s, eps, agent.temperature)
    T.backward(loss)
    agent.policy, adams["policy"] = nets.adam_step(agent.policy, leaf.grad, adams["policy"])
    losses["actor"] = float(loss.data)

    _, logp = agent.act_batch(s, rng)
    leaf = Tensor(agent.log_temperature)
    loss = temperature_loss_t(leaf, logp, agent.target_entropy)
    T.backward(loss)
    agent.log_temperature, adams["temperature"] = nets.adam_step(
        agent.log_temperature, leaf.grad, adams["temperature"])
    losses["temperature"] = float(loss.data)

    if not all(np.isfinite(v) for v in losses.values()):
        raise NetError(f"non-finite SAC loss: {losses}")

    tau = cfg.tau
    agent.q1_target = (1.0 - tau) * agent.q1_target + tau * agent.q1
    agent.q2_target = (1.0 - tau) * agent.q2_target + tau * agent.q2
    return SacLosses(losses["q1"], losses["q2"], losses["actor"], losses["temperature"])


def fresh_adams(agent: SACAgent, cfg: PolicyTrainConfig) -> dict[str, AdamState]:
    return {
        "q1": AdamState.fresh(agent.q1.size, cfg.lr_critic),
        "q2": AdamState.fresh(agent.q2.size, cfg.lr_critic),
        "policy": AdamState.fresh(agent.policy.size, cfg.lr_actor),
        "temperature": AdamState.fresh(1, cfg.lr_temperature),
    }


# -- model rollouts ----------------------------------------------------------------


@dataclass
class RolloutResult:
    """Columnar shaped transitions from one batch of branches."""

    s: np.ndarray
    a: np.ndarray
    r_shaped: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    truncations: int
    penalty_columns: dict[str, np.ndarray]


def rollout_branch(agent: SACAgent, ensemble: DynamicsEnsemble, disc: Discriminator,
                   penalty_cfg: PenaltyConfig, dataset: TransitionDataset, h: int,
                   n_starts: int, rng: np.random.Generator,
                   state_box: np.ndarray | None = None) -> RolloutResult:
    """Branch `n_starts` rollouts of length <= h from dataset states.

    Each step samples the policy, then one ensemble member, then reshapes
    the model reward.  Branches stop early when the sampled next state is
    non-finite or falls outside twice the environment's state box; such
    steps are dropped and counted as truncations.
    """
    if len(dataset) == 0:
        raise NetError("rollout_branch needs a non-empty dataset")
    idx = rng.integers(len(dataset), size=n_starts)
    s = dataset.s[idx].astype(np.float64)
    bound = None if state_box is None else 2.0 * np.asarray(state_box)

    cols_s, cols_a, cols_r, cols_sp = [], [], [], []
    pen_cols: dict[str, list[np.ndarray]] = {}
    truncations = 0
    for _ in range(h):
        if s.shape[0] == 0:
            break
        a, _ = agent.act_batch(s, rng)
        s_next, r_raw, members = ensemble.sample_next_batch(s, a, rng)
        shaped, cols = shape_rewards_batch(ensemble, disc, penalty_cfg,
                                           s, a, s_next, r_raw, members, rng)
        ok = np.all(np.isfinite(s_next), axis=1)
        if bound is not None:
            ok &= np.all(np.abs(s_next) <= bound, axis=1)
        truncations += int((~ok).sum())
        cols_s.append(s[ok])
        cols_a.append(a[ok])
        cols_r.append(shaped[ok])
        cols_sp.append(s_next[ok])
        for key, val in cols.items():
            pen_cols.setdefault(key, []).append(val[ok])
        s = s_next[ok]

    s_all = np.concatenate(cols_s) if cols_s else np.empty((0, dataset.d_s))
    a_all = np.concatenate(cols_a) if cols_a else np.empty((0, dataset.d_a))
    r_all = np.concatenate(cols_r) if cols_r else np.empty(0)
    sp_all = np.concatenate(cols_sp) if cols_sp else np.empty((0, dataset.d_s))
    return RolloutResult(
        s_all.astype(np.float32), a_all.astype(np.float32), r_all.astype(np.float32),
        sp_all.astype(np.float32), np.zeros(len(r_all), dtype=np.uint8), truncations,
        {k: np.concatenate(v) if v else np.empty(0) for k, v in pen_cols.items()})


# -- training loops -----------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    eval_return_mean: float
    eval_return_std: float
    critic1_loss: float
    critic2_loss: float
    actor_loss: float
    temperature_loss: float
    temperature: float
    truncation_count: int
    env_buffer: int
    model_buffer: int


def train_policy(agent: SACAgent, dataset: TransitionDataset, ensemble: DynamicsEnsemble,
                 disc: Discriminator, penalty_cfg: PenaltyConfig, cfg: PolicyTrainConfig,
                 eval_env: ContinuousEnv, metrics_cb=None, penalty_cb=None
                 ) -> list[EpochMetrics]:
    """Offline optimization on the dataset plus branched model rollouts.

    The environment is touched only by the per-epoch evaluation episodes;
    no training signal flows from it.
    """
    root = np.random.SeedSequence(cfg.seed)
    ss = root.spawn(3)
    rng_roll = np.random.default_rng(ss[0])
    rng_update = np.random.default_rng(ss[1])
    eval_seeds = np.random.default_rng(ss[2]).integers(2**31, size=cfg.epochs)

    env_buf = ReplayBuffer.from_dataset(dataset)
    capacity = max(1, cfg.rollout_horizon * cfg.rollouts_per_epoch * cfg.model_buffer_epochs)
    model_buf = ReplayBuffer(capacity, dataset.d_s, dataset.d_a, "model")
    adams = fresh_adams(agent, cfg)
    box = state_box(eval_env)

    history: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        result = rollout_branch(agent, ensemble, disc, penalty_cfg, dataset,
                                cfg.rollout_horizon, cfg.rollouts_per_epoch, rng_roll, box)
        if len(result.r_shaped) > 0:
            model_buf.push_batch(result.s, result.a, result.r_shaped, result.s_next, result.done)
        if penalty_cb is not None:
            penalty_cb(epoch, result.penalty_columns)

        sums = np.zeros(4)
        for _ in range(cfg.updates_per_epoch):
            batch = mixed_batch(env_buf, model_buf, cfg.batch_size, cfg.real_fraction, rng_update)
            losses = sac_update(agent, batch, cfg, adams, rng_update)
            sums += (losses.critic1, losses.critic2, losses.actor, losses.temperature)
        sums /= max(1, cfg.updates_per_epoch)

        mean, std = evaluate_policy(eval_env, agent.policy_fn(deterministic=True),
                                    cfg.eval_episodes, int(eval_seeds[epoch]))
        row = EpochMetrics(epoch, mean, std, sums[0], sums[1], sums[2], sums[3],
                           agent.temperature, result.truncations, len(env_buf), len(model_buf))
        history.append(row)
        if metrics_cb is not None:
            metrics_cb(row)
    return history


def state_box(env: ContinuousEnv) -> np.ndarray:
    """Documented compact box containing all reachable states (half-widths)."""
    if env.kind == "pointmass2d":
        return np.array([1.0, 1.0, 1.0, 1.0])
    return np.array([1.0, 1.0, env.params["max_speed"]])


@dataclass
class OnlineCheckpoint:
    step: int
    eval_return: float
    snapshot: dict[str, np.ndarray]


@dataclass
class OnlineResult:
    checkpoints: list[OnlineCheckpoint]
    best_return: float
    replay: tuple  # (s, a, r, s_next, done) arrays in collection order
    final_return: float


def train_online(env: ContinuousEnv, agent: SACAgent, cfg: PolicyTrainConfig,
                 total_steps: int, update_every: int = 1, warmup: int = 1000,
                 eval_every: int = 2000, seed: int = 0) -> OnlineResult:
    """Standard online SAC against a real environment.

    Used for the dataset-construction checkpoints and the online sanity
    baseline.  The replay history is returned in chronological order so
    callers can slice behavior-data prefixes out of it.
    """
    root = np.random.SeedSequence(seed)
    ss = root.spawn(3)
    rng_env = np.random.default_rng(ss[0])
    rng_update = np.random.default_rng(ss[1])
    rng_eval = np.random.default_rng(ss[2])

    buf = ReplayBuffer(total_steps, env.d_s, env.d_a, "env")
    adams = fresh_adams(agent, cfg)
    checkpoints: list[OnlineCheckpoint] = []
    best = -np.inf
    final = -np.inf

    s = env.reset(int(rng_env.integers(2**31)))
    t_ep = 0
    for step in range(total_steps):
        if step < warmup:
            a = rng_env.uniform(-1.0, 1.0, size=env.d_a)
        else:
            a, _ = agent.act(s, rng_env)
        s_next, r, done_env = env.step(s, a, rng_env)
        t_ep += 1
        # bootstrap only through true terminations; horizon cutoffs are
        # bookkeeping, and treating them as terminal poisons the critic
        buf.push_batch(s[None], np.asarray(a)[None], [r], np.asarray(s_next)[None], [done_env])
        s = s_next
        if done_env or t_ep >= env.horizon:
            s = env.reset(int(rng_env.integers(2**31)))
            t_ep = 0
        if step >= warmup and step % update_every == 0:
            batch = buf.sample(cfg.batch_size, rng_update)
            sac_update(agent, batch, cfg, adams, rng_update)
        if (step + 1) % eval_every == 0:
            mean, _ = evaluate_policy(env, agent.policy_fn(deterministic=True),
                                      cfg.eval_episodes, int(rng_eval.integers(2**31)))
            checkpoints.append(OnlineCheckpoint(step + 1, mean, agent.snapshot()))
            best = max(best, mean)
            final = mean
    replay = (buf.s[:buf.size].copy(), buf.a[:buf.size].copy(), buf.r[:buf.size].copy(),
              buf.s_next[:buf.size].copy(), buf.done[:buf.size].copy())
    return OnlineResult(checkpoints, float(best), replay, float(final))


# -- persistence -----------------------------------------------------------------


def save_policy_checkpoint(path: str, agent: SACAgent, cfg_hash: str = "") -> None:
    meta = {
        "d_s": agent.d_s,
        "d_a": agent.d_a,
        "policy_spec": {"layer_widths": list(agent.policy_net.spec.layer_widths),
                        "activation": list(agent.policy_net.spec.activation),
                        "output_head": agent.policy_net.spec.output_head},
        "q_spec": {"layer_widths": list(agent.q_net.spec.layer_widths),
                   "activation": list(agent.q_net.spec.activation),
                   "output_head": agent.q_net.spec.output_head},
        "target_entropy": agent.target_entropy,
    }
    blocks = [("policy", agent.policy), ("q1", agent.q1), ("q2", agent.q2),
              ("q1_target", agent.q1_target), ("q2_target", agent.q2_target),
              ("log_temperature", agent.log_temperature)]
    io.save_checkpoint_file(path, "policy", meta, blocks, cfg_hash)


def load_policy_checkpoint(path: str) -> SACAgent:
    header, blocks = io.load_checkpoint_file(path, expect_kind="policy")
    meta = header["meta"]
    widths = meta["policy_spec"]["layer_widths"]
    hidden = tuple(widths[1:-1])
    agent = SACAgent(int(meta["d_s"]), int(meta["d_a"]), hidden, np.random.default_rng(0))
    agent.policy = blocks["policy"]
    agent.q1 = blocks["q1"]
    agent.q2 = blocks["q2"]
    agent.q1_target = blocks["q1_target"]
    agent.q2_target = blocks["q2_target"]
    agent.log_temperature = blocks["log_temperature"]
    agent.target_entropy = float(meta["target_entropy"])
    return agent
