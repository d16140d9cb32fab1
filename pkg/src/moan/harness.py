"""Experiment orchestration: seeded two-stage runs, artifact persistence,
metrics CSVs, and sweep/bound-check recipes.

Layout under the output root:

    datasets/<env>_<tag>_<size>_<seed>.ds     shared dataset cache
    behavior/<env>/...                        online constructor artifacts
    models/<stage1-hash>.ckpt                 shared stage-1 cache
    runs/<run_id>/                            one run's artifacts
        config.cfg  config_reference.txt  model.ckpt  policy.ckpt
        metrics_model.csv  metrics_policy.csv  penalty_breakdown.csv
        manifest.json

A run owns its directory exclusively via a lock file.  The stage boundary
is a hard checkpoint: rerunning a finished or half-finished run reuses the
stage-1 artifact byte-identically when its identity hash matches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import io
from .adversarial import train_adversarial, save_model_checkpoint, load_model_checkpoint
from .boundlab import random_mdp, random_policy, theorem1_check, TabularMDP
from .envs import BehaviorPolicy, evaluate_policy, make_env
from .sac import (SACAgent, PolicyTrainConfig, train_online, train_policy,
                  save_policy_checkpoint, load_policy_checkpoint)

DEFAULT_OUT = "moan_out"
OUT_ENV_VAR = "MOAN_OUT_DIR"

# Online constructor budgets per environment (dataset construction only).
# update_every > 1 stretches learning over more env steps, which both
# cheapens the run and lengthens the replay prefix behind medium-replay.
CONSTRUCTOR = {
    "pointmass2d": {"total_steps": 100000, "warmup": 2000, "eval_every": 500, "update_every": 3},
    "pendulum1d": {"total_steps": 25000, "warmup": 1000, "eval_every": 1000, "update_every": 1},
}
MEDIUM_TARGET = 1.0 / 3.0
MEDIUM_WINDOW = (0.25, 0.45)


class HarnessError(RuntimeError):
    pass


def resolve_out_root(explicit: str | None) -> str:
    return explicit or os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    code_version: str
    seeds: dict
    started_at: float
    finished_at: float
    status: str
    artifacts: list  # [{name, path, sha256, bytes, valid}]

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


class MetricsWriter:
    """Append-only CSV with a fixed header; refuses non-monotone steps."""

    def __init__(self, path: str, columns: list[str], step_column: str = "epoch"):
        self.path = path
        self.columns = columns
        self.step_column = step_column
        self._last_step = -1
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        step = int(row[self.step_column])
        if step <= self._last_step:
            raise HarnessError(f"{self.path}: step {step} is not monotone")
        self._last_step = step
        for col in self.columns:
            val = row[col]
            if isinstance(val, float) and not np.isfinite(val):
                raise HarnessError(f"{self.path}: non-finite value for {col} at step {step}")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in self.columns])


# -- behavior artifacts (dataset-construction checkpoints) ----------------------


@dataclass
class BehaviorArtifacts:
    medium_policy: BehaviorPolicy
    expert_policy: BehaviorPolicy
    replay_arrays: tuple
    expert_return: float
    medium_return: float


def _behavior_dir(out_root: str, env_kind: str) -> str:
    return os.path.join(out_root, "behavior", env_kind)


def ensure_behavior_artifacts(env_kind: str, out_root: str, seed: int = 2024) -> BehaviorArtifacts:
    """Train (once) and cache the online-SAC checkpoints behind the medium /
    expert / medium-replay dataset regimes."""
    bdir = _behavior_dir(out_root, env_kind)
    meta_path = os.path.join(bdir, "meta.json")
    if not os.path.exists(meta_path):
        _construct_behavior_artifacts(env_kind, bdir, seed)
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)

    medium_agent = load_policy_checkpoint(os.path.join(bdir, "medium.ckpt"))
    expert_agent = load_policy_checkpoint(os.path.join(bdir, "expert.ckpt"))
    replay = datamod.TransitionDataset.load(os.path.join(bdir, "replay_prefix.ds"))

    def stochastic(agent):
        return BehaviorPolicy.checkpoint(lambda s, rng, a=agent: a.act_batch(s.reshape(1, -1), rng)[0][0])

    return BehaviorArtifacts(
        medium_policy=stochastic(medium_agent),
        expert_policy=stochastic(expert_agent),
        replay_arrays=(replay.s, replay.a, replay.s_next, replay.r, replay.done),
        expert_return=float(meta["expert_return"]),
        medium_return=float(meta["medium_return"]),
    )


def _construct_behavior_artifacts(env_kind: str, bdir: str, seed: int) -> None:
    env = make_env(env_kind)
    budget = CONSTRUCTOR[env_kind]
    rng = np.random.default_rng(seed)
    agent = SACAgent(env.d_s, env.d_a, (64, 64), rng)
    cfg = PolicyTrainConfig(seed=seed, batch_size=256)
    result = train_online(env, agent, cfg, budget["total_steps"], budget["update_every"],
                          budget["warmup"], budget["eval_every"], seed)
    if not result.checkpoints:
        raise HarnessError("online constructor produced no checkpoints")

    best = max(result.checkpoints, key=lambda c: c.eval_return)
    returns = np.array([c.eval_return for c in result.checkpoints])
    floor = min(0.0, float(returns.min()))
    levels = (returns - floor) / max(best.eval_return - floor, 1e-9)

    env_eval = make_env(env_kind)
    expert_agent = SACAgent(env.d_s, env.d_a, (64, 64), np.random.default_rng(0))
    expert_agent.restore(best.snapshot)
    # expert reference: the stochastic policy's return, since behavior data
    # is collected stochastically
    expert_return = _stochastic_return(env_eval, expert_agent, seed)

    # prefer a genuinely half-trained checkpoint inside the medium window;
    # when learning jumps straight past it, fall back to the expert with an
    # inflated policy variance calibrated into the window
    in_window = np.flatnonzero((levels >= MEDIUM_WINDOW[0]) & (levels <= MEDIUM_WINDOW[1]))
    medium_agent = SACAgent(env.d_s, env.d_a, (64, 64), np.random.default_rng(0))
    if in_window.size:
        medium_idx = int(in_window[np.argmin(np.abs(levels[in_window] - MEDIUM_TARGET))])
        medium = result.checkpoints[medium_idx]
        medium_agent.restore(medium.snapshot)
        medium_step = medium.step
        medium_return = _stochastic_return(env_eval, medium_agent, seed + 1)
        lo, hi = MEDIUM_WINDOW[0] * expert_return, MEDIUM_WINDOW[1] * expert_return
        if not lo <= medium_return <= hi:
            medium_agent, medium_return = _inflate_to_medium(env_eval, best.snapshot, expert_return, seed)
    else:
        medium_idx = int(np.argmin(np.abs(levels - MEDIUM_TARGET)))
        medium_step = result.checkpoints[medium_idx].step
        medium_agent, medium_return = _inflate_to_medium(env_eval, best.snapshot, expert_return, seed)

    os.makedirs(bdir, exist_ok=True)
    save_policy_checkpoint(os.path.join(bdir, "expert.ckpt"), expert_agent)
    save_policy_checkpoint(os.path.join(bdir, "medium.ckpt"), medium_agent)

    s, a, r, s_next, done = result.replay
    prefix = slice(0, medium_step)
    replay_ds = datamod.TransitionDataset.from_arrays(
        env_kind, "medium-replay", seed, s[prefix], a[prefix], s_next[prefix], r[prefix], done[prefix],
        meta={"medium_step": medium_step, "total_steps": budget["total_steps"]})
    replay_ds.save(os.path.join(bdir, "replay_prefix.ds"))

    meta = {"expert_return": expert_return, "medium_return": medium_return,
            "medium_step": medium_step, "seed": seed,
            "eval_returns": [c.eval_return for c in result.checkpoints],
            "eval_steps": [c.step for c in result.checkpoints]}
    io.atomic_write(os.path.join(bdir, "meta.json"), json.dumps(meta, indent=2).encode())


def _stochastic_return(env, agent: SACAgent, seed: int, episodes: int = 20) -> float:
    rng = np.random.default_rng(seed)
    mean, _ = evaluate_policy(env, lambda s: agent.act_batch(s.reshape(1, -1), rng)[0][0],
                              episodes, seed)
    return float(mean)


def _inflate_to_medium(env, expert_snapshot: dict, expert_return: float, seed: int
                       ) -> tuple[SACAgent, float]:
    """Bisect a degradation knob on the expert policy (mean shrunk toward
    zero, variance inflated) until its stochastic return falls in the
    medium window.  d=0 is the expert, d=1 is near-random."""
    target = MEDIUM_TARGET * expert_return
    lo_d, hi_d = 1.0, 0.0  # return is (approximately) decreasing in d
    best_agent, best_ret = None, None
    for _ in range(14):
        d = 0.5 * (lo_d + hi_d)
        agent = _degraded_agent(env, expert_snapshot, d)
        ret = _stochastic_return(env, agent, seed + 17)
        if best_ret is None or abs(ret - target) < abs(best_ret - target):
            best_agent, best_ret = agent, ret
        if MEDIUM_WINDOW[0] * expert_return <= ret <= MEDIUM_WINDOW[1] * expert_return:
            return agent, ret
        if ret > target:
            hi_d = d  # still too good: degrade more
        else:
            lo_d = d
    return best_agent, best_ret


def _degraded_agent(env, snapshot: dict, d: float) -> SACAgent:
    agent = SACAgent(env.d_s, env.d_a, (64, 64), np.random.default_rng(0))
    agent.restore(snapshot)
    layout = agent.policy_net.layout
    last = len(agent.policy_net.spec.layer_widths) - 2
    _, w_off, w_shape = next(e for e in layout.entries if e[0] == f"W{last}")
    _, b_off, b_shape = next(e for e in layout.entries if e[0] == f"b{last}")
    W = agent.policy[w_off:w_off + int(np.prod(w_shape))].reshape(w_shape)
    b = agent.policy[b_off:b_off + int(np.prod(b_shape))]
    W[:, :env.d_a] *= 1.0 - d
    b[:env.d_a] *= 1.0 - d
    b[env.d_a:] += 12.0 * d
    return agent


# -- dataset cache ----------------------------------------------------------------


def dataset_path(out_root: str, env_kind: str, tag: str, size: int, seed: int) -> str:
    return os.path.join(out_root, "datasets", f"{env_kind}_{tag}_{size}_{seed}.ds")


def ensure_dataset(config: cfgmod.ExperimentConfig, out_root: str) -> str:
    """Return the path of the configured dataset, generating it on demand."""
    ds_cfg = config["dataset"]
    if ds_cfg["path"]:
        if not os.path.exists(ds_cfg["path"]):
            raise HarnessError(f"dataset file {ds_cfg['path']} does not exist")
        return ds_cfg["path"]
    env_kind = config["env"]["kind"]
    path = dataset_path(out_root, env_kind, ds_cfg["tag"], ds_cfg["size"], ds_cfg["seed"])
    if os.path.exists(path):
        return path
    env = make_env(env_kind)
    tag = ds_cfg["tag"]
    kwargs = {}
    meta = {}
    if tag != "random":
        artifacts = ensure_behavior_artifacts(env_kind, out_root)
        kwargs = {"medium_policy": artifacts.medium_policy, "expert_policy": artifacts.expert_policy}
        if tag == "medium-replay":
            s, a, sp, r, d = artifacts.replay_arrays
            kwargs["replay_arrays"] = (s, a, sp, r, d)
        meta = {"expert_return": artifacts.expert_return, "medium_return": artifacts.medium_return}
    ds = datamod.generate_dataset(env, tag, ds_cfg["size"], ds_cfg["seed"], meta=meta, **kwargs)
    ds.save(path)
    return path


# -- runs ---------------------------------------------------------------------------


def _model_cache_path(out_root: str, stage1_hash: str) -> str:
    return os.path.join(out_root, "models", f"{stage1_hash}.ckpt")


def run(config: cfgmod.ExperimentConfig, out_root: str | None = None) -> RunManifest:
    """Execute stage 1 then stage 2, persisting checkpoints, metrics, and an
    atomically written manifest.  Resumable at the stage boundary."""
    out_root = resolve_out_root(out_root or config["run"]["out_dir"])
    run_id = config["run"]["run_id"] or f"run_{config.config_hash()[:12]}_s{config.run_seed}"
    run_dir = os.path.join(out_root, "runs", run_id)
    os.makedirs(run_dir, exist_ok=True)

    lock_path = os.path.join(run_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise HarnessError(f"run directory {run_dir} is locked by another run") from None
    os.close(lock_fd)

    started = time.time()
    artifacts: list[dict] = []

    def add_artifact(name: str, path: str, valid: bool = True) -> None:
        artifacts.append({"name": name, "path": os.path.relpath(path, run_dir),
                          "sha256": _sha256_file(path) if os.path.exists(path) else "",
                          "bytes": os.path.getsize(path) if os.path.exists(path) else 0,
                          "valid": valid})

    def finish(status: str) -> RunManifest:
        manifest = RunManifest(run_id=run_id, config_hash=config.config_hash(),
                               code_version=_code_version(), seeds={"run": config.run_seed},
                               started_at=started, finished_at=time.time(),
                               status=status, artifacts=artifacts)
        io.atomic_write(os.path.join(run_dir, "manifest.json"),
                        json.dumps(manifest.to_dict(), indent=2).encode())
        return manifest

    try:
        io.atomic_write(os.path.join(run_dir, "config.cfg"), cfgmod.dump(config).encode())
        add_artifact("config", os.path.join(run_dir, "config.cfg"))
        cfgmod.write_reference(os.path.join(run_dir, "config_reference.txt"))
        add_artifact("config_reference", os.path.join(run_dir, "config_reference.txt"))

        ds_path = ensure_dataset(config, out_root)
        dataset = datamod.TransitionDataset.load(ds_path)
        add_artifact("dataset", ds_path)

        stage1_hash = io.config_hash(config.stage1_identity())
        model_path = os.path.join(run_dir, "model.ckpt")
        reused = False
        if os.path.exists(model_path):
            header, _ = io.load_checkpoint_file(model_path, expect_kind="model")
            reused = header.get("config_hash") == stage1_hash
        if not reused:
            cache = _model_cache_path(out_root, stage1_hash)
            if os.path.exists(cache):
                with open(cache, "rb") as src:
                    io.atomic_write(model_path, src.read())
                reused = True
        if reused:
            ensemble, disc = load_model_checkpoint(model_path)
        else:
            ensemble, disc, report = train_adversarial(dataset, config.model_config())
            save_model_checkpoint(model_path, ensemble, disc, stage1_hash)
            cache = _model_cache_path(out_root, stage1_hash)
            if not os.path.exists(cache):
                with open(model_path, "rb") as src:
                    io.atomic_write(cache, src.read())
            _write_model_metrics(run_dir, report, config.model_config().n_members)
            add_artifact("metrics_model", os.path.join(run_dir, "metrics_model.csv"))
        add_artifact("model_checkpoint", model_path)

        agent, history = _run_stage2(config, dataset, ensemble, disc, run_dir)
        policy_path = os.path.join(run_dir, "policy.ckpt")
        save_policy_checkpoint(policy_path, agent, config.config_hash())
        add_artifact("policy_checkpoint", policy_path)
        add_artifact("metrics_policy", os.path.join(run_dir, "metrics_policy.csv"))
        pb = os.path.join(run_dir, "penalty_breakdown.csv")
        if os.path.exists(pb):
            add_artifact("penalty_breakdown", pb)
        return finish("complete")
    except BaseException:
        for art in artifacts:
            art["valid"] = False
        finish("failed")
        raise
    finally:
        os.unlink(lock_path)


def _run_stage2(config, dataset, ensemble, disc, run_dir):
    env = make_env(config["env"]["kind"])
    policy_cfg = config.policy_config()
    rng = np.random.default_rng(np.random.SeedSequence([config.run_seed, 3]))
    agent = SACAgent(dataset.d_s, dataset.d_a, policy_cfg.hidden, rng)

    writer = MetricsWriter(os.path.join(run_dir, "metrics_policy.csv"), [
        "epoch", "eval_return_mean", "eval_return_std", "critic1_loss", "critic2_loss",
        "actor_loss", "temperature_loss", "temperature", "truncation_count",
        "env_buffer", "model_buffer"])
    breakdown = MetricsWriter(os.path.join(run_dir, "penalty_breakdown.csv"),
                              ["step", "r_raw", "sigma_term", "u", "disc_term", "r_shaped"],
                              step_column="step")
    counter = {"step": 0}

    def on_metrics(row):
        writer.write({k: getattr(row, k) for k in writer.columns})

    def on_penalty(epoch, cols, cap=20):
        n = min(cap, len(cols.get("r_raw", ())))
        for i in range(n):
            breakdown.write({"step": counter["step"], "r_raw": float(cols["r_raw"][i]),
                             "sigma_term": float(cols["sigma_term"][i]), "u": float(cols["u"][i]),
                             "disc_term": float(cols["disc_term"][i]),
                             "r_shaped": float(cols["r_shaped"][i])})
            counter["step"] += 1

    history = train_policy(agent, dataset, ensemble, disc, config.penalty_config(),
                           policy_cfg, env, metrics_cb=on_metrics, penalty_cb=on_penalty)
    return agent, history


def _write_model_metrics(run_dir: str, report, n_members: int) -> None:
    cols = ["epoch", "gen_nll", "gen_adv_loss", "disc_loss", "disc_accuracy", "holdout_mse_mean"]
    cols += [f"holdout_mse_{k}" for k in range(n_members)]
    writer = MetricsWriter(os.path.join(run_dir, "metrics_model.csv"), cols)
    for epoch in range(report.stop_epoch):
        row = {"epoch": epoch, "gen_nll": report.gen_nll[epoch],
               "gen_adv_loss": report.gen_adv_loss[epoch], "disc_loss": report.disc_loss[epoch],
               "disc_accuracy": report.disc_accuracy[epoch],
               "holdout_mse_mean": float(np.mean(report.holdout_mse[epoch]))}
        for k in range(n_members):
            row[f"holdout_mse_{k}"] = report.holdout_mse[epoch][k]
        writer.write(row)


def _code_version() -> str:
    from . import __version__
    return __version__


def final_eval_return(run_dir: str) -> float:
    path = os.path.join(run_dir, "metrics_policy.csv")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise HarnessError(f"{path} holds no rows")
    return float(rows[-1]["eval_return_mean"])


# -- sweeps ---------------------------------------------------------------------


def ablation_sweep(config: cfgmod.ExperimentConfig, param: str, values: list[float],
                   seeds: list[int], out_root: str | None = None) -> str:
    """One run per (value, seed); returns the summary CSV path."""
    if param not in ("alpha", "eta"):
        raise HarnessError(f"sweep parameter must be alpha or eta, got {param!r}")
    if not values:
        raise HarnessError("sweep needs at least one value")
    out_root = resolve_out_root(out_root or config["run"]["out_dir"])
    section = "model" if param == "alpha" else "penalty"
    rows = []
    for value in values:
        for seed in seeds:
            run_id = f"sweep_{param}{value:g}_s{seed}"
            sub = config.with_overrides(**{section: {param: value}},
                                        run={"seed": seed, "run_id": run_id})
            manifest = run(sub, out_root)
            final = final_eval_return(os.path.join(out_root, "runs", run_id))
            rows.append({"param": param, "value": value, "seed": seed,
                         "run_id": run_id, "final_eval_return": final})
    summary_path = os.path.join(out_root, f"sweep_{param}_summary.csv")
    os.makedirs(out_root, exist_ok=True)
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "seed", "run_id", "final_eval_return"])
        writer.writeheader()
        writer.writerows(rows)
    return summary_path


# -- bound-check recipe ------------------------------------------------------------


def bound_check_csv(path: str, trials: int, n_states: int = 5, n_actions: int = 3,
                    gamma: float = 0.9, delta: float = 1.0, seed: int = 0) -> list[dict]:
    """Random tabular tuples through the bound evaluator, one CSV row each."""
    rows = []
    columns = ["seed", "j_real", "j_model", "model_error_term", "discrepancy_term",
               "rhs_literal", "holds_literal", "slack_literal", "c_star", "reward_scale"]
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
        mdp = random_mdp(n_states, n_actions, gamma, rng)
        mdp_hat = TabularMDP(rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)),
                             mdp.rewards, mdp.mu0, gamma)
        pi = random_policy(n_states, n_actions, rng)
        pi_d = random_policy(n_states, n_actions, rng)
        rep = theorem1_check(mdp, mdp_hat, pi, pi_d, delta)
        rows.append({"seed": trial, "j_real": rep.j_real, "j_model": rep.j_model,
                     "model_error_term": rep.model_error_term,
                     "discrepancy_term": rep.discrepancy_term, "rhs_literal": rep.rhs_literal,
                     "holds_literal": int(rep.holds_literal), "slack_literal": rep.slack_literal,
                     "c_star": rep.c_star, "reward_scale": rep.reward_scale})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return rows
