"""Finite-difference verification of every loss gradient in the system.

Each check builds a small random net in float64, evaluates one loss family
through the taped path, and compares against central differences.  This is
the battery behind `moan gradcheck` and the gradient acceptance criterion;
individual families are also exercised by the unit tests.
"""

from __future__ import annotations

import numpy as np

from . import nets
from . import tensor as T
from .adversarial import Discriminator, DynamicsEnsemble, _disc_loss_t, _gen_loss_t
from .data import TransitionDataset
from .nets import grad_check
from .sac import SACAgent, actor_loss_t, critic_loss_t, temperature_loss_t

D_S, D_A, BATCH = 2, 1, 8


def _tiny_dataset(rng: np.random.Generator, n: int = 64) -> TransitionDataset:
    s = rng.normal(size=(n, D_S))
    a = rng.uniform(-1, 1, size=(n, D_A))
    s_next = s + 0.1 * rng.normal(size=(n, D_S))
    r = rng.normal(size=n)
    done = np.zeros(n)
    return TransitionDataset.from_arrays("gradcheck", "random", 0, s, a, s_next, r, done)


def _batch(ds: TransitionDataset, rng: np.random.Generator):
    idx = rng.integers(len(ds), size=BATCH)
    return ds.s[idx], ds.a[idx], ds.s_next[idx], ds.r[idx]


def check_disc_objective(rng: np.random.Generator, step: float) -> float:
    ds = _tiny_dataset(rng)
    disc = Discriminator.from_dataset(ds, (8,), rng)
    s, a, sp, r = _batch(ds, rng)
    real_x = disc.norm_inputs(s, a, sp, r).astype(np.float64)
    fake_sp = sp + rng.normal(size=sp.shape)
    fake_x = disc.norm_inputs(s, a, fake_sp, r + rng.normal(size=r.shape)).astype(np.float64)

    def builder(params):
        return _disc_loss_t(disc.net, params, real_x, fake_x)

    return grad_check(builder, disc.params.astype(np.float64), step)


def check_gen_objective(rng: np.random.Generator, step: float, alpha: float) -> float:
    ds = _tiny_dataset(rng)
    ensemble = DynamicsEnsemble.from_dataset(ds, 1, (8,), rng)
    disc = Discriminator.from_dataset(ds, (8,), rng)
    s, a, sp, r = _batch(ds, rng)
    eps = rng.standard_normal((BATCH, D_S + 1))

    def builder(params):
        loss, _ = _gen_loss_t(ensemble, params, disc, s, a, sp, r, alpha, eps)
        return loss

    return grad_check(builder, ensemble.params[0].astype(np.float64), step)


def _tiny_agent(rng: np.random.Generator) -> SACAgent:
    agent = SACAgent(D_S, D_A, (8,), rng)
    agent.policy = agent.policy.astype(np.float64)
    agent.q1 = agent.q1.astype(np.float64)
    agent.q2 = agent.q2.astype(np.float64)
    return agent


def check_critic_loss(rng: np.random.Generator, step: float) -> float:
    agent = _tiny_agent(rng)
    s = rng.normal(size=(BATCH, D_S))
    a = rng.uniform(-1, 1, size=(BATCH, D_A))
    y = rng.normal(size=BATCH)

    def builder(params):
        return critic_loss_t(agent.q_net, params, s, a, y)

    return grad_check(builder, agent.q1, step)


def check_actor_loss(rng: np.random.Generator, step: float) -> float:
    agent = _tiny_agent(rng)
    s = rng.normal(size=(BATCH, D_S))
    eps = rng.standard_normal((BATCH, D_A))
    alpha = float(rng.uniform(0.05, 1.0))

    def builder(params):
        return actor_loss_t(agent, params, s, eps, alpha)

    return grad_check(builder, agent.policy, step)


def check_temperature_loss(rng: np.random.Generator, step: float) -> float:
    logp = rng.normal(size=BATCH)
    target_entropy = -float(D_A)

    def builder(log_temp):
        return temperature_loss_t(log_temp, logp, target_entropy)

    return grad_check(builder, rng.normal(size=1), step)


CHECKS = {
    "disc_objective": lambda rng, step: check_disc_objective(rng, step),
    "gen_objective_alpha0": lambda rng, step: check_gen_objective(rng, step, 0.0),
    "gen_objective_alpha1": lambda rng, step: check_gen_objective(rng, step, 1.0),
    "sac_critic": lambda rng, step: check_critic_loss(rng, step),
    "sac_actor": lambda rng, step: check_actor_loss(rng, step),
    "sac_temperature": lambda rng, step: check_temperature_loss(rng, step),
}


def run_battery(trials: int = 20, step: float = 1e-5, seed: int = 123,
                verbose: bool = False) -> float:
    """Worst relative error over `trials` random parameterizations of every
    loss family."""
    worst = 0.0
    for name, check in CHECKS.items():
        errors = []
        for trial in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
            errors.append(check(rng, step))
        family_worst = max(errors)
        worst = max(worst, family_worst)
        if verbose:
            print(f"{name}: max relative error {family_worst:.3e} over {trials} nets")
    return worst
