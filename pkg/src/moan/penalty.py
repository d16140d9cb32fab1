"""Reward reshaping for model-generated transitions.

The shaped reward subtracts `eta` times two uncertainty signals from the
model's raw reward: the ensemble's own predictive spread (a norm of the
chosen aggregation of per-member std vectors, in normalized units) and
sqrt(2 u), where u scores how implausible the discriminator finds the
sampled tuple.

`mode` picks what u is.  `discrepancy` (the default) uses 1 - D, so tuples
the discriminator confidently calls real are penalized least; `literal`
uses D itself, which inverts that ordering and is kept selectable because
the two readings disagree and ablation tooling reports both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adversarial import Discriminator, DynamicsEnsemble
from .nets import NetError

SIGMA_MODES = ("max_member_std_norm", "chosen_member_std_norm", "mean_member_std_norm")
PENALTY_MODES = ("literal", "discrepancy")


@dataclass
class PenaltyConfig:
    eta: float = 0.1
    mode: str = "discrepancy"
    sigma_agg: str = "max_member_std_norm"
    disc_samples: int = 1  # samples averaged inside the discrepancy score

    def __post_init__(self):
        if self.eta < 0:
            raise NetError(f"eta must be non-negative, got {self.eta}")
        if self.mode not in PENALTY_MODES:
            raise NetError(f"unknown penalty mode {self.mode!r}")
        if self.sigma_agg not in SIGMA_MODES:
            raise NetError(f"unknown sigma aggregation {self.sigma_agg!r}")
        if self.disc_samples < 1:
            raise NetError("disc_samples must be a positive integer")


@dataclass
class PenaltyBreakdown:
    """One shaped reward with its ingredients, for metrics export."""

    sigma_term: float
    disc_term: float
    r_raw: float
    r_shaped: float
    u: float


def sigma_aggregate(ensemble: DynamicsEnsemble, s, a, member_index: int | None,
                    cfg: PenaltyConfig) -> np.ndarray:
    """Ensemble spread at (s, a): norms of normalized-space std vectors,
    reduced across members per `cfg.sigma_agg`.  Batched over rows."""
    norms = ensemble.member_std_norms(np.atleast_2d(s), np.atleast_2d(a))
    if cfg.sigma_agg == "max_member_std_norm":
        return norms.max(axis=0)
    if cfg.sigma_agg == "mean_member_std_norm":
        return norms.mean(axis=0)
    if member_index is None:
        raise NetError("chosen_member_std_norm needs the sampled member index")
    member_index = np.asarray(member_index).reshape(-1)
    return norms[member_index, np.arange(norms.shape[1])]


def discrepancy(disc: Discriminator, s, a, s_next, r, mode: str = "discrepancy") -> np.ndarray:
    """u in (0,1): the discriminator's realness score (`literal`) or its
    complement (`discrepancy`).  The two modes sum to 1."""
    if mode not in PENALTY_MODES:
        raise NetError(f"unknown penalty mode {mode!r}")
    d = disc.prob(np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next), np.reshape(r, (-1,)))
    return d if mode == "literal" else 1.0 - d


def reshape_reward(r: float, sigma_term: float, u: float, eta: float) -> PenaltyBreakdown:
    """Shaped reward r - eta * (sigma_term + sqrt(2 u)) with its breakdown."""
    if not 0.0 < u < 1.0:
        raise NetError(f"discrepancy score must be in (0,1), got {u}")
    if sigma_term < 0.0:
        raise NetError(f"sigma term must be non-negative, got {sigma_term}")
    if eta < 0.0:
        raise NetError(f"eta must be non-negative, got {eta}")
    disc_term = math.sqrt(2.0 * u)
    shaped = r - eta * (sigma_term + disc_term)
    return PenaltyBreakdown(sigma_term=float(sigma_term), disc_term=float(disc_term),
                            r_raw=float(r), r_shaped=float(shaped), u=float(u))


def shape_rewards_batch(ensemble: DynamicsEnsemble, disc: Discriminator, cfg: PenaltyConfig,
                        s, a, s_next, r, member_index, rng: np.random.Generator | None = None
                        ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Vectorized shaping for sampled model transitions.

    With disc_samples > 1 the discrepancy score is averaged over that many
    fresh model samples at the same (s, a) instead of only the tuple being
    stored.  Returns shaped rewards and the breakdown columns.
    """
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    r = np.reshape(r, (-1,))
    sigma = sigma_aggregate(ensemble, s, a, member_index, cfg)
    u = discrepancy(disc, s, a, s_next, r, cfg.mode)
    if cfg.disc_samples > 1:
        if rng is None:
            raise NetError("disc_samples > 1 needs an rng to draw extra model samples")
        total = u.copy()
        for _ in range(cfg.disc_samples - 1):
            sp_k, r_k, _ = ensemble.sample_next_batch(s, a, rng)
            total += discrepancy(disc, s, a, sp_k, r_k, cfg.mode)
        u = total / cfg.disc_samples
    disc_term = np.sqrt(2.0 * u)
    shaped = r - cfg.eta * (sigma + disc_term)
    columns = {"r_raw": r.astype(np.float64), "sigma_term": sigma, "u": u,
               "disc_term": disc_term, "r_shaped": shaped}
    return shaped, columns
