"""Stage 1: an ensemble of Gaussian dynamics models trained jointly with a
discriminator that separates logged transitions from generated ones.

Each ensemble member maps a normalized (s, a) to a diagonal Gaussian over
the normalized (delta-state, reward); predictions are de-normalized back to
environment units at the API boundary.  The discriminator scores normalized
(s, a, s', r) tuples.  The generator objective is the model's negative
log-likelihood on real data plus `alpha` times an adversarial term computed
on reparameterized samples, so generator gradients flow through the
discriminator's *input* while its parameters stay frozen.

All objectives are computed in normalized units; the NLL therefore differs
from the env-unit density by a constant Jacobian that has no gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import io, nets
from . import tensor as T
from .data import TransitionDataset
from .nets import AdamState, DenseNet, GaussianOutput, NetError, NetSpec
from .tensor import Tensor


@dataclass
class ModelTrainConfig:
    """Knobs for joint generator/discriminator training."""

    alpha: float = 0.1
    lr_gen: float = 1e-3
    lr_disc: float = 3e-4
    batch_size: int = 256
    max_epochs: int = 80
    holdout_fraction: float = 0.1
    patience: int = 5
    disc_steps_per_gen_step: int = 1
    n_members: int = 5
    gen_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (32, 32)
    seed: int = 0
    # Apply the update rule exactly as written (ascent on the generator
    # objective) instead of the descent reading this package uses.
    literal_signs: bool = False
    # Swap log(1-D) for -log(D) in the generator's adversarial term.
    non_saturating: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise NetError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 < self.holdout_fraction <= 0.5:
            raise NetError(f"holdout_fraction must be in (0, 0.5], got {self.holdout_fraction}")
        if self.disc_steps_per_gen_step < 1:
            raise NetError("disc_steps_per_gen_step must be a positive integer")
        if self.n_members < 1:
            raise NetError("ensemble needs at least one member")


@dataclass
class ModelTrainReport:
    """Per-epoch training series plus the selected stopping point."""

    gen_nll: list[float] = field(default_factory=list)
    gen_adv_loss: list[float] = field(default_factory=list)
    disc_loss: list[float] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)
    holdout_mse: list[list[float]] = field(default_factory=list)  # per epoch, per member
    holdout_nll: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    selected_epoch: int = 0
    wall_time: float = 0.0


class DynamicsEnsemble:
    """N Gaussian next-state/reward models with shared architecture and
    dataset-derived normalization."""

    def __init__(self, spec: NetSpec, params: list[np.ndarray],
                 in_mean, in_std, out_mean, out_std, d_s: int, d_a: int):
        self.net = DenseNet(spec)
        # dtype is preserved: training uses float32, verification float64
        self.params = [np.asarray(p) for p in params]
        self.in_mean = np.asarray(in_mean, dtype=np.float32)
        self.in_std = np.asarray(in_std, dtype=np.float32)
        self.out_mean = np.asarray(out_mean, dtype=np.float32)
        self.out_std = np.asarray(out_std, dtype=np.float32)
        self.d_s = d_s
        self.d_a = d_a

    @property
    def n_members(self) -> int:
        return len(self.params)

    @property
    def spec(self) -> NetSpec:
        return self.net.spec

    @classmethod
    def from_dataset(cls, dataset: TransitionDataset, n_members: int,
                     hidden: tuple[int, ...], rng: np.random.Generator) -> "DynamicsEnsemble":
        d_s, d_a = dataset.d_s, dataset.d_a
        d_out = d_s + 1
        spec = NetSpec((d_s + d_a, *hidden, 2 * d_out), "relu", "gaussian_diag")
        net = DenseNet(spec)
        params = [net.init_params(rng) for _ in range(n_members)]
        in_mean = np.concatenate([dataset.state_mean, dataset.action_mean])
        in_std = np.concatenate([dataset.state_std, dataset.action_std])
        delta = dataset.s_next.astype(np.float64) - dataset.s.astype(np.float64)
        targets = np.concatenate([delta, dataset.r.reshape(-1, 1).astype(np.float64)], axis=1)
        out_mean = targets.mean(axis=0).astype(np.float32)
        out_std = np.maximum(targets.std(axis=0).astype(np.float32), 1e-6)
        return cls(spec, params, in_mean, in_std, out_mean, out_std, d_s, d_a)

    # -- normalization helpers ----------------------------------------------

    def norm_inputs(self, s, a) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1, dtype=np.float32)
        return (x - self.in_mean) / self.in_std

    def norm_targets(self, s, s_next, r) -> np.ndarray:
        delta = np.atleast_2d(s_next) - np.atleast_2d(s)
        y = np.concatenate([delta, np.reshape(r, (-1, 1))], axis=1, dtype=np.float32)
        return (y - self.out_mean) / self.out_std

    # -- prediction -----------------------------------------------------------

    def raw_norm(self, member_index: int, x_norm: np.ndarray) -> GaussianOutput:
        """Normalized-space Gaussian (mean, clamped log-variance)."""
        raw = self.net.raw_np(self.params[member_index], x_norm)
        return nets.gaussian_head_np(raw)

    def predict(self, member_index: int, s, a) -> GaussianOutput:
        """De-normalized Gaussian over (delta-state, reward) in env units."""
        if not 0 <= member_index < self.n_members:
            raise NetError(f"member index {member_index} out of range (N={self.n_members})")
        out = self.raw_norm(member_index, self.norm_inputs(s, a))
        mean = self.out_mean + self.out_std * out.mean
        logvar = out.log_variance + 2.0 * np.log(self.out_std)
        if np.asarray(s).ndim == 1:
            return GaussianOutput(mean[0], logvar[0])
        return GaussianOutput(mean, logvar)

    def sample_next(self, s, a, rng: np.random.Generator) -> tuple[np.ndarray, float, int]:
        """Draw a successor (s', r) from a uniformly chosen member."""
        member = int(rng.integers(self.n_members))
        out = self.predict(member, np.asarray(s).reshape(-1), np.asarray(a).reshape(-1))
        draw = out.mean + out.std * rng.standard_normal(out.mean.shape)
        return np.asarray(s, dtype=np.float64).reshape(-1) + draw[:-1], float(draw[-1]), member

    def sample_next_batch(self, s, a, rng: np.random.Generator):
        """Vectorized sampling: one uniformly chosen member per row.

        Returns (s_next, r, member_indices) with shapes (B, d_s), (B,), (B,).
        """
        s = np.atleast_2d(s)
        members = rng.integers(self.n_members, size=s.shape[0])
        x = self.norm_inputs(s, a)
        mean = np.empty((s.shape[0], self.d_s + 1), dtype=np.float64)
        std = np.empty_like(mean)
        for k in range(self.n_members):
            rows = members == k
            if not rows.any():
                continue
            out = self.raw_norm(k, x[rows])
            mean[rows] = self.out_mean + self.out_std * out.mean
            std[rows] = self.out_std * out.std
        draw = mean + std * rng.standard_normal(mean.shape)
        return s + draw[:, :-1], draw[:, -1], members

    def member_std_norms(self, s, a) -> np.ndarray:
        """L2 norm of each member's normalized-space std vector, (N, B)."""
        x = self.norm_inputs(s, a)
        out = np.empty((self.n_members, x.shape[0]))
        for k in range(self.n_members):
            g = self.raw_norm(k, x)
            out[k] = np.linalg.norm(g.std, axis=-1)
        return out


class Discriminator:
    """Probability that a (s, a, s', r) tuple came from the logging data."""

    def __init__(self, spec: NetSpec, params: np.ndarray, in_mean, in_std):
        self.net = DenseNet(spec)
        self.params = np.asarray(params)
        self.in_mean = np.asarray(in_mean, dtype=np.float32)
        self.in_std = np.asarray(in_std, dtype=np.float32)

    @property
    def spec(self) -> NetSpec:
        return self.net.spec

    @classmethod
    def from_dataset(cls, dataset: TransitionDataset, hidden: tuple[int, ...],
                     rng: np.random.Generator) -> "Discriminator":
        d_s, d_a = dataset.d_s, dataset.d_a
        spec = NetSpec((2 * d_s + d_a + 1, *hidden, 1), "relu", "sigmoid_scalar")
        params = DenseNet(spec).init_params(rng)
        in_mean = np.concatenate([dataset.state_mean, dataset.action_mean,
                                  dataset.state_mean, [dataset.reward_mean]])
        in_std = np.concatenate([dataset.state_std, dataset.action_std,
                                 dataset.state_std, [dataset.reward_std]])
        return cls(spec, params, in_mean, in_std)

    def norm_inputs(self, s, a, s_next, r) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next),
                            np.reshape(r, (-1, 1))], axis=1, dtype=np.float32)
        return (x - self.in_mean) / self.in_std

    def prob(self, s, a, s_next, r) -> np.ndarray:
        x = self.norm_inputs(s, a, s_next, r)
        return nets.sigmoid_head_np(self.net.raw_np(self.params, x)).reshape(-1)

    def fit(self, real_batch, fake_batch, steps: int, lr: float = 1e-3) -> float:
        """Full-batch ascent on the discrimination objective against fixed
        real/fake samples; returns the final objective value.  Used when the
        generator is frozen (calibration studies and tests)."""
        real_x = self.norm_inputs(*real_batch)
        fake_x = self.norm_inputs(*fake_batch)
        adam = AdamState.fresh(self.params.size, lr)
        for _ in range(steps):
            _, grad = _disc_value_grad(self.net, self.params, real_x, fake_x)
            self.params, adam = nets.adam_step(self.params, -grad, adam)
        value, _ = _disc_value_grad(self.net, self.params, real_x, fake_x)
        return value


# -- objectives ---------------------------------------------------------------


def _disc_loss_t(net: DenseNet, params_t, real_x, fake_x) -> Tensor:
    """Discrimination objective (to ascend): mean log D(real) + mean log(1 - D(fake)).

    Built on clamped logits via softplus for numerical stability."""
    z_real = nets.clamp_logit_t(net.raw_t(params_t, real_x))
    z_fake = nets.clamp_logit_t(net.raw_t(params_t, fake_x))
    log_d_real = T.neg(T.mean_all(T.softplus(T.neg(z_real))))
    log_one_minus_d_fake = T.neg(T.mean_all(T.softplus(z_fake)))
    return T.add(log_d_real, log_one_minus_d_fake)


def _disc_value_grad(net: DenseNet, params: np.ndarray, real_x, fake_x) -> tuple[float, np.ndarray]:
    leaf = Tensor(params)
    loss = _disc_loss_t(net, leaf, real_x, fake_x)
    T.backward(loss)
    return float(loss.data), leaf.grad


def disc_objective(disc: Discriminator, real_batch, fake_batch) -> float:
    """Value of the discrimination objective on env-unit batches
    (s, a, s_next, r tuples of arrays)."""
    if len(real_batch[0]) == 0 or len(fake_batch[0]) == 0:
        raise NetError("discriminator batches must be non-empty")
    real_x = disc.norm_inputs(*real_batch)
    fake_x = disc.norm_inputs(*fake_batch)
    loss = _disc_loss_t(disc.net, disc.params, real_x, fake_x)
    return float(loss.data)


def _gen_loss_t(ensemble: DynamicsEnsemble, member_params, disc: Discriminator,
                s, a, s_next, r, alpha: float, eps: np.ndarray,
                non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Taped generator objective for one member; returns (loss, nll_part).

    `member_params` may be a Tensor (training) or ndarray (evaluation).
    Discriminator parameters are used as constants: gradients reach the
    generator only through the discriminator's input.
    """
    x = ensemble.norm_inputs(s, a)
    y = ensemble.norm_targets(s, s_next, r)
    raw = ensemble.net.raw_t(member_params, x)
    mean_n, logvar_n = nets.gaussian_head_t(raw)
    nll = T.mean_all(nets.gaussian_nll_rows_t(mean_n, logvar_n, y))
    if alpha == 0.0:
        return nll, nll

    std_n = T.exp(T.mul(logvar_n, 0.5))
    sample_n = T.add(mean_n, T.mul(std_n, eps))
    sample = T.add(T.mul(sample_n, ensemble.out_std), ensemble.out_mean)
    delta_hat = T.slice_cols(sample, 0, ensemble.d_s)
    r_hat = T.slice_cols(sample, ensemble.d_s, ensemble.d_s + 1)
    s_hat = T.add(delta_hat, np.atleast_2d(s).astype(np.float32))

    d_in = T.concat_cols([
        Tensor(np.atleast_2d(s).astype(np.float32)),
        Tensor(np.atleast_2d(a).astype(np.float32)),
        s_hat,
        r_hat,
    ])
    d_norm = T.mul(T.sub(d_in, disc.in_mean), 1.0 / disc.in_std)
    z = nets.clamp_logit_t(disc.net.raw_t(disc.params, d_norm))
    if non_saturating:
        adv = T.mean_all(T.softplus(T.neg(z)))  # -mean log D
    else:
        adv = T.neg(T.mean_all(T.softplus(z)))  # +mean log(1 - D)
    return T.add(nll, T.mul(adv, alpha)), nll


def gen_objective(ensemble: DynamicsEnsemble, member_index: int, disc: Discriminator,
                  real_batch, alpha: float, rng: np.random.Generator,
                  non_saturating: bool = False) -> float:
    """Value of one member's objective on a real batch, with reparameterized
    adversarial samples drawn from `rng`."""
    s, a, s_next, r = real_batch
    eps = rng.standard_normal((np.atleast_2d(s).shape[0], ensemble.d_s + 1)).astype(np.float32)
    loss, _ = _gen_loss_t(ensemble, ensemble.params[member_index], disc,
                          s, a, s_next, r, alpha, eps, non_saturating)
    return float(loss.data)


def holdout_nll(ensemble: DynamicsEnsemble, holdout) -> float:
    """Mean (over members and records) normalized-space NLL; the early-stop
    and checkpoint-selection metric."""
    s, a, s_next, r = holdout
    x = ensemble.norm_inputs(s, a)
    y = ensemble.norm_targets(s, s_next, r)
    total = 0.0
    for k in range(ensemble.n_members):
        out = ensemble.raw_norm(k, x)
        resid = y - out.mean
        total += float(np.mean(np.sum(
            0.5 * (nets.LOG_2PI + out.log_variance + resid * resid * np.exp(-out.log_variance)),
            axis=-1)))
    return total / ensemble.n_members


def validation_mse(ensemble: DynamicsEnsemble, holdout) -> np.ndarray:
    """Per-member MSE of the de-normalized mean prediction of (delta-state,
    reward), averaged over records and output dimensions."""
    s, a, s_next, r = holdout
    if len(s) == 0:
        raise NetError("holdout must be non-empty")
    delta = np.atleast_2d(s_next).astype(np.float64) - np.atleast_2d(s).astype(np.float64)
    truth = np.concatenate([delta, np.reshape(r, (-1, 1))], axis=1)
    out = np.empty(ensemble.n_members)
    for k in range(ensemble.n_members):
        pred = ensemble.predict(k, s, a).mean
        out[k] = float(np.mean((pred - truth) ** 2))
    return out


# -- training -------------------------------------------------------------------


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def train_adversarial(dataset: TransitionDataset, config: ModelTrainConfig
                      ) -> tuple[DynamicsEnsemble, Discriminator, ModelTrainReport]:
    """Alternating generator/discriminator training with holdout early stop.

    Per batch: every member takes one generator step (its own noise
    stream), then the shared discriminator takes
    `disc_steps_per_gen_step` ascent steps against fresh ensemble samples.
    Stops when the mean holdout NLL (the full predictive density, so the
    variance head keeps training after the mean head plateaus) has not
    improved for `patience` epochs, then restores the best epoch's
    parameters (generator and discriminator).
    """
    if len(dataset) < 10 * config.batch_size:
        raise NetError(f"dataset of {len(dataset)} rows is too small for batch size "
                       f"{config.batch_size} (need at least 10 batches)")
    t_start = time.perf_counter()
    root = np.random.SeedSequence(config.seed)
    ss = root.spawn(4 + config.n_members)
    rng_split, rng_init, rng_disc, rng_shuffle = (np.random.default_rng(s) for s in ss[:4])
    member_rngs = [np.random.default_rng(s) for s in ss[4:]]

    ensemble = DynamicsEnsemble.from_dataset(dataset, config.n_members, config.gen_hidden, rng_init)
    disc = Discriminator.from_dataset(dataset, config.disc_hidden, rng_init)

    n = len(dataset)
    n_hold = max(1, int(round(config.holdout_fraction * n)))
    perm = rng_split.permutation(n)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    cols = (dataset.s, dataset.a, dataset.s_next, dataset.r)
    hold = tuple(c[hold_idx] for c in cols)
    train = tuple(c[train_idx] for c in cols)

    gen_adams = [AdamState.fresh(ensemble.net.n_params, config.lr_gen) for _ in range(config.n_members)]
    disc_adam = AdamState.fresh(disc.net.n_params, config.lr_disc)

    report = ModelTrainReport()
    best_nll = np.inf
    best_snapshot = None
    stall = 0
    n_train = len(train_idx)
    batch = config.batch_size

    for epoch in range(config.max_epochs):
        order = rng_shuffle.permutation(n_train)
        nll_sum = adv_sum = disc_sum = 0.0
        n_batches = 0
        for start in range(0, n_train - batch + 1, batch):
            idx = order[start:start + batch]
            bs, ba, bsp, br = (c[idx] for c in train)
            for k in range(config.n_members):
                eps = member_rngs[k].standard_normal((batch, ensemble.d_s + 1)).astype(np.float32)
                leaf = Tensor(ensemble.params[k])
                loss, nll = _gen_loss_t(ensemble, leaf, disc, bs, ba, bsp, br,
                                        config.alpha, eps, config.non_saturating)
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"non-finite generator loss: epoch {epoch}, member {k}")
                T.backward(loss)
                update_grad = -leaf.grad if config.literal_signs else leaf.grad
                try:
                    ensemble.params[k], gen_adams[k] = nets.adam_step(
                        ensemble.params[k], update_grad, gen_adams[k])
                except NetError as exc:
                    raise DivergenceError(f"epoch {epoch}, member {k}: {exc}") from exc
                nll_sum += float(nll.data)
                adv_sum += float(loss.data) - float(nll.data)
            for _ in range(config.disc_steps_per_gen_step):
                fake_sp, fake_r, _ = ensemble.sample_next_batch(bs, ba, rng_disc)
                real_x = disc.norm_inputs(bs, ba, bsp, br)
                fake_x = disc.norm_inputs(bs, ba, fake_sp, fake_r)
                value, grad = _disc_value_grad(disc.net, disc.params, real_x, fake_x)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite discriminator objective: epoch {epoch}")
                try:
                    disc.params, disc_adam = nets.adam_step(disc.params, -grad, disc_adam)
                except NetError as exc:
                    raise DivergenceError(f"epoch {epoch}, discriminator: {exc}") from exc
                disc_sum += value
            n_batches += 1

        mse = validation_mse(ensemble, hold)
        nll = holdout_nll(ensemble, hold)
        fake_sp, fake_r, _ = ensemble.sample_next_batch(hold[0], hold[1], rng_disc)
        p_real = disc.prob(hold[0], hold[1], hold[2], hold[3])
        p_fake = disc.prob(hold[0], hold[1], fake_sp, fake_r)
        accuracy = 0.5 * (float(np.mean(p_real > 0.5)) + float(np.mean(p_fake <= 0.5)))

        denom = max(1, n_batches)
        report.gen_nll.append(nll_sum / (denom * config.n_members))
        report.gen_adv_loss.append(adv_sum / (denom * config.n_members))
        report.disc_loss.append(disc_sum / (denom * config.disc_steps_per_gen_step))
        report.disc_accuracy.append(accuracy)
        report.holdout_mse.append([float(v) for v in mse])
        report.holdout_nll.append(nll)

        if nll < best_nll - 1e-12:
            best_nll = nll
            best_snapshot = ([p.copy() for p in ensemble.params], disc.params.copy(), epoch)
            stall = 0
        else:
            stall += 1
        if stall >= config.patience:
            break

    report.stop_epoch = len(report.gen_nll)
    if best_snapshot is not None:
        ensemble.params, disc.params, report.selected_epoch = (
            [p.copy() for p in best_snapshot[0]], best_snapshot[1].copy(), best_snapshot[2])
    report.wall_time = time.perf_counter() - t_start
    return ensemble, disc, report


# -- persistence ------------------------------------------------------------------


def save_model_checkpoint(path: str, ensemble: DynamicsEnsemble, disc: Discriminator,
                          cfg_hash: str = "") -> None:
    meta = {
        "d_s": ensemble.d_s,
        "d_a": ensemble.d_a,
        "n_members": ensemble.n_members,
        "gen_spec": _spec_meta(ensemble.spec),
        "disc_spec": _spec_meta(disc.spec),
        "in_mean": ensemble.in_mean.tolist(),
        "in_std": ensemble.in_std.tolist(),
        "out_mean": ensemble.out_mean.tolist(),
        "out_std": ensemble.out_std.tolist(),
        "disc_in_mean": disc.in_mean.tolist(),
        "disc_in_std": disc.in_std.tolist(),
    }
    blocks = [(f"member_{k}", p) for k, p in enumerate(ensemble.params)]
    blocks.append(("discriminator", disc.params))
    io.save_checkpoint_file(path, "model", meta, blocks, cfg_hash)


def load_model_checkpoint(path: str) -> tuple[DynamicsEnsemble, Discriminator]:
    header, blocks = io.load_checkpoint_file(path, expect_kind="model")
    meta = header["meta"]
    gen_spec = _spec_from_meta(meta["gen_spec"])
    disc_spec = _spec_from_meta(meta["disc_spec"])
    params = [blocks[f"member_{k}"] for k in range(int(meta["n_members"]))]
    ensemble = DynamicsEnsemble(gen_spec, params, meta["in_mean"], meta["in_std"],
                                meta["out_mean"], meta["out_std"],
                                int(meta["d_s"]), int(meta["d_a"]))
    disc = Discriminator(disc_spec, blocks["discriminator"], meta["disc_in_mean"], meta["disc_in_std"])
    return ensemble, disc


def _spec_meta(spec: NetSpec) -> dict:
    return {"layer_widths": list(spec.layer_widths), "activation": list(spec.activation),
            "output_head": spec.output_head}


def _spec_from_meta(meta: dict) -> NetSpec:
    return NetSpec(tuple(meta["layer_widths"]), tuple(meta["activation"]), meta["output_head"])
