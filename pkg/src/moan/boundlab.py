"""Exact finite-MDP machinery: values, occupancies, divergences, and the
return lower bound they combine into.

Everything here runs in float64 with direct linear solves; there are no
learned components.  The continuous-control half of the package is checked
statistically, this module is where the same quantities are checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BoundLabError(ValueError):
    pass


@dataclass
class TabularMDP:
    """Finite MDP: transitions T[s,a,s'], rewards r[s,a] in [0,1], start
    distribution mu0, discount gamma in (0,1)."""

    transitions: np.ndarray
    rewards: np.ndarray
    mu0: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        n_s, n_a, n_s2 = self.transitions.shape
        if n_s != n_s2:
            raise BoundLabError("transition tensor must be (S, A, S)")
        if self.rewards.shape != (n_s, n_a):
            raise BoundLabError("reward matrix shape does not match transitions")
        if self.mu0.shape != (n_s,):
            raise BoundLabError("mu0 shape does not match state count")
        if not 0.0 < self.gamma < 1.0:
            raise BoundLabError(f"gamma must be in (0,1), got {self.gamma}")
        row_sums = self.transitions.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=1e-12):
            raise BoundLabError("transition rows must sum to 1 (within 1e-12)")
        if not math.isclose(self.mu0.sum(), 1.0, abs_tol=1e-12):
            raise BoundLabError("mu0 must sum to 1")
        if np.any(self.rewards < 0.0) or np.any(self.rewards > 1.0):
            raise BoundLabError("rewards must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class TabularPolicy:
    """Action distribution per state: pi[s,a]."""

    pi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.ndim != 2:
            raise BoundLabError("policy must be a (S, A) matrix")
        if not np.allclose(self.pi.sum(axis=1), 1.0, atol=1e-12):
            raise BoundLabError("policy rows must sum to 1")


@dataclass
class OccupancyMeasure:
    """Normalized discounted state-action visitation; entries sum to 1."""

    rho: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if np.any(self.rho < -1e-12):
            raise BoundLabError("occupancy entries must be non-negative")
        if not math.isclose(self.rho.sum(), 1.0, abs_tol=1e-10):
            raise BoundLabError(f"occupancy must sum to 1, got {self.rho.sum()}")


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> TabularMDP:
    """Dirichlet(1) transition rows, U[0,1] rewards, Dirichlet(1) start."""
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(T, r, mu0, gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def _policy_transition(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """State-to-state transition P[s,s'] = sum_a pi(a|s) T[s,a,s']."""
    return np.einsum("sa,sax->sx", policy.pi, mdp.transitions)


def exact_value(mdp: TabularMDP, policy: TabularPolicy) -> tuple[np.ndarray, float]:
    """Solve the linear Bellman system; returns (V over states, J = <mu0, V>)."""
    if policy.pi.shape != (mdp.n_states, mdp.n_actions):
        raise BoundLabError("policy shape does not match MDP")
    r_pi = np.einsum("sa,sa->s", policy.pi, mdp.rewards)
    P_pi = _policy_transition(mdp, policy)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    return V, float(mdp.mu0 @ V)


def occupancy(mdp: TabularMDP, policy: TabularPolicy) -> OccupancyMeasure:
    """Normalized occupancy rho[s,a] = (1-gamma) pi(a|s) sum_t gamma^t P_t(s).

    The discounted visitation d solves d = mu0 + gamma P_pi^T d, so the
    (1-gamma) factor makes rho a probability distribution over (s, a).
    """
    P_pi = _policy_transition(mdp, policy)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.mu0)
    rho = (1.0 - mdp.gamma) * policy.pi * d[:, None]
    return OccupancyMeasure(rho)


# -- divergences -------------------------------------------------------------


def _check_distributions(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise BoundLabError("distributions must share a support")
    if np.any(p < 0) or np.any(q < 0):
        raise BoundLabError("distributions must be non-negative")
    return p, q


def tv_distance(p, q) -> float:
    """Total variation: half the L1 distance."""
    p, q = _check_distributions(p, q)
    return float(0.5 * np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p puts mass where q has none."""
    p, q = _check_distributions(p, q)
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats; always finite and <= log 2."""
    p, q = _check_distributions(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def ipm_sup_bounded(p, q, delta: float) -> float:
    """sup over {f : |f|_inf <= delta} of |E_p f - E_q f|.

    On a finite support the supremum is attained at f = delta * sign(p - q),
    which evaluates to 2 * delta * tv_distance(p, q).
    """
    if delta < 0:
        raise BoundLabError("delta must be non-negative")
    p, q = _check_distributions(p, q)
    return float(delta * np.abs(p - q).sum())


# -- the value-gap identity and the return bound -----------------------------


def value_discrepancy(mdp: TabularMDP, mdp_hat: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Z[s,a]: next-state value of the surrogate model minus the real one,
    both evaluated with the real-environment value function."""
    V, _ = exact_value(mdp, policy)
    return np.einsum("sax,x->sa", mdp_hat.transitions - mdp.transitions, V)


def value_gap_identity(mdp: TabularMDP, mdp_hat: TabularMDP, policy: TabularPolicy) -> tuple[float, float, float]:
    """Exact return-difference identity between a real and a surrogate MDP.

    lhs = J(pi, M) - J(pi, M_hat).  rhs rewrites the same gap as a
    discounted expectation of the next-state value discrepancy Z under the
    surrogate occupancy.  Because the occupancy is normalized by (1-gamma),
    the exact constant is gamma/(1-gamma), not gamma alone; with that
    constant the identity holds to machine precision.
    """
    _require_shared_frame(mdp, mdp_hat)
    _, J = exact_value(mdp, policy)
    _, J_hat = exact_value(mdp_hat, policy)
    lhs = J - J_hat
    Z = value_discrepancy(mdp, mdp_hat, policy)
    rho_hat = occupancy(mdp_hat, policy).rho
    rhs = -(mdp.gamma / (1.0 - mdp.gamma)) * float(np.sum(rho_hat * Z))
    return lhs, rhs, abs(lhs - rhs)


def _require_shared_frame(mdp: TabularMDP, mdp_hat: TabularMDP) -> None:
    if mdp.transitions.shape != mdp_hat.transitions.shape:
        raise BoundLabError("MDPs must share state and action spaces")
    if not np.array_equal(mdp.rewards, mdp_hat.rewards):
        raise BoundLabError("MDPs must share the reward function")
    if not np.array_equal(mdp.mu0, mdp_hat.mu0):
        raise BoundLabError("MDPs must share the initial distribution")
    if mdp.gamma != mdp_hat.gamma:
        raise BoundLabError("MDPs must share the discount")


@dataclass
class BoundReport:
    """One evaluation of the return lower bound on a tabular tuple."""

    j_real: float
    j_model: float
    model_error_term: float
    discrepancy_term: float
    rhs_literal: float
    holds_literal: bool
    slack_literal: float
    c_star: float
    reward_scale: float


def theorem1_check(
    mdp: TabularMDP,
    mdp_hat: TabularMDP,
    policy: TabularPolicy,
    behavior_policy: TabularPolicy,
    value_bound_delta: float = 1.0,
) -> BoundReport:
    """Evaluate the return lower bound literally and find the minimal
    penalty multiplier that makes it hold.

    The bound compares J(pi, M) against J(pi, M_hat) minus gamma times a
    penalty: the expected per-(s,a) transition TV error under the behavior
    occupancy, plus sqrt(2 * JS) between behavior and surrogate-model
    occupancies.  Rewards are rescaled (recorded in the report) so the real
    value function is bounded by `value_bound_delta` in max norm, matching
    the bound's value-class assumption.

    c_star is the smallest c >= 0 with J_real >= J_model - c * gamma *
    penalty.  The bound is linear and non-increasing in c, so the bisection
    target has the closed form max(0, (J_model - J_real) / (gamma * penalty)).
    """
    _require_shared_frame(mdp, mdp_hat)
    V, _ = exact_value(mdp, policy)
    v_max = float(np.max(np.abs(V)))
    scale = value_bound_delta / v_max if v_max > value_bound_delta else 1.0
    if scale != 1.0:
        mdp = TabularMDP(mdp.transitions, mdp.rewards * scale, mdp.mu0, mdp.gamma)
        mdp_hat = TabularMDP(mdp_hat.transitions, mdp_hat.rewards * scale, mdp_hat.mu0, mdp_hat.gamma)

    _, j_real = exact_value(mdp, policy)
    _, j_model = exact_value(mdp_hat, policy)

    rho_behavior = occupancy(mdp, behavior_policy).rho
    per_sa_tv = 0.5 * np.abs(mdp.transitions - mdp_hat.transitions).sum(axis=2)
    model_error = float(np.sum(rho_behavior * per_sa_tv))

    rho_model = occupancy(mdp_hat, policy).rho
    discrepancy = math.sqrt(2.0 * js_divergence(rho_behavior, rho_model))

    penalty = model_error + discrepancy
    rhs = j_model - mdp.gamma * penalty
    slack = j_real - rhs

    if penalty > 0.0:
        c_star = max(0.0, (j_model - j_real) / (mdp.gamma * penalty))
    else:
        c_star = 0.0 if j_real >= j_model - 1e-12 else math.inf

    return BoundReport(
        j_real=j_real,
        j_model=j_model,
        model_error_term=model_error,
        discrepancy_term=discrepancy,
        rhs_literal=rhs,
        holds_literal=slack >= -1e-12,
        slack_literal=slack,
        c_star=c_star,
        reward_scale=scale,
    )
