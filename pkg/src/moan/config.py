"""Experiment configuration: a strict key-value format with sections.

Grammar (one setting per line):

    # comment                 full-line or trailing
    [section]                 one of: env, dataset, model, penalty, policy, run
    key = value               value type is fixed per key (see SCHEMA)

Types: int, float, bool (true/false), str, a comma-separated int list, or
an optional string (empty value means unset).  Unknown sections or keys are
errors, as are re-assignments.  `dump` emits a canonical text that parses
back to the same config, and `write_reference` documents every key and its
default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import io
from .adversarial import ModelTrainConfig
from .penalty import PenaltyConfig
from .sac import PolicyTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    kind: str  # int | float | bool | str | ints | optstr
    default: object
    help: str
    choices: tuple = ()


SCHEMA: dict[str, dict[str, FieldSpec]] = {
    "env": {
        "kind": FieldSpec("str", "pointmass2d", "environment id", ("pointmass2d", "pendulum1d")),
    },
    "dataset": {
        "tag": FieldSpec("str", "medium", "collection regime",
                         ("random", "medium", "medium-replay", "medium-expert")),
        "size": FieldSpec("int", 20000, "number of transitions"),
        "seed": FieldSpec("int", 7, "collection seed (part of the dataset identity)"),
        "path": FieldSpec("optstr", None, "explicit dataset file; skips generation"),
    },
    "model": {
        "alpha": FieldSpec("float", 0.1, "adversarial weight in the generator objective"),
        "lr_gen": FieldSpec("float", 1e-3, "generator learning rate"),
        "lr_disc": FieldSpec("float", 3e-4, "discriminator learning rate"),
        "batch_size": FieldSpec("int", 256, "minibatch size"),
        "max_epochs": FieldSpec("int", 80, "epoch cap"),
        "holdout_fraction": FieldSpec("float", 0.1, "validation split in (0, 0.5]"),
        "patience": FieldSpec("int", 5, "epochs without holdout improvement before stopping"),
        "disc_steps_per_gen_step": FieldSpec("int", 1, "discriminator steps per generator step"),
        "n_members": FieldSpec("int", 5, "ensemble size"),
        "gen_hidden": FieldSpec("ints", (64, 64), "generator hidden widths"),
        "disc_hidden": FieldSpec("ints", (32, 32), "discriminator hidden widths"),
        "literal_signs": FieldSpec("bool", False, "ascend (rather than descend) the generator objective"),
        "non_saturating": FieldSpec("bool", False, "use -log D instead of log(1-D) for the generator"),
    },
    "penalty": {
        "eta": FieldSpec("float", 0.1, "penalty weight on shaped rewards"),
        "mode": FieldSpec("str", "discrepancy", "discrepancy (1-D) or literal (D)",
                          ("discrepancy", "literal")),
        "sigma_agg": FieldSpec("str", "max_member_std_norm", "ensemble spread reduction",
                               ("max_member_std_norm", "chosen_member_std_norm", "mean_member_std_norm")),
        "disc_samples": FieldSpec("int", 1, "model samples averaged in the discrepancy score"),
    },
    "policy": {
        "gamma": FieldSpec("float", 0.99, "discount"),
        "tau": FieldSpec("float", 0.005, "target smoothing coefficient"),
        "lr_actor": FieldSpec("float", 3e-4, "actor learning rate"),
        "lr_critic": FieldSpec("float", 3e-4, "critic learning rate"),
        "lr_temperature": FieldSpec("float", 3e-4, "temperature learning rate"),
        "batch_size": FieldSpec("int", 256, "minibatch size"),
        "real_fraction": FieldSpec("float", 0.05, "fraction of each batch drawn from the env buffer"),
        "rollout_horizon": FieldSpec("int", 5, "model rollout branch length"),
        "rollouts_per_epoch": FieldSpec("int", 400, "branch starts per epoch"),
        "epochs": FieldSpec("int", 80, "training epochs"),
        "updates_per_epoch": FieldSpec("int", 250, "gradient updates per epoch"),
        "hidden": FieldSpec("ints", (64, 64), "actor/critic hidden widths"),
        "eval_episodes": FieldSpec("int", 10, "episodes per periodic evaluation"),
        "model_buffer_epochs": FieldSpec("int", 5, "epochs of rollouts retained in the model buffer"),
    },
    "run": {
        "seed": FieldSpec("int", 0, "master seed for both training stages"),
        "out_dir": FieldSpec("optstr", None, "output root (default: $MOAN_OUT_DIR or ./moan_out)"),
        "run_id": FieldSpec("optstr", None, "run directory name (default: derived from config+seed)"),
        "threads": FieldSpec("int", 1, "BLAS/OpenMP thread cap"),
    },
}

# Stage-1/2 training seeds are derived from [run] seed with these stream tags.
_MODEL_STREAM, _POLICY_STREAM = 1, 2


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        merged = {s: {k: f.default for k, f in keys.items()} for s, keys in SCHEMA.items()}
        for section, kv in self.values.items():
            merged[section].update(kv)
        self.values = merged
        _validate(self.values)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def run_seed(self) -> int:
        return int(self.values["run"]["seed"])

    def with_overrides(self, **section_updates) -> "ExperimentConfig":
        """New config with per-section dict updates, e.g. model={'alpha': 1.0}."""
        values = {s: dict(kv) for s, kv in self.values.items()}
        for section, updates in section_updates.items():
            if section not in values:
                raise ConfigError(f"unknown section {section!r}")
            for key, val in updates.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[section][key] = val
        return ExperimentConfig(values)

    # -- derived stage configs ------------------------------------------------

    def model_config(self) -> ModelTrainConfig:
        m = self.values["model"]
        return ModelTrainConfig(
            alpha=m["alpha"], lr_gen=m["lr_gen"], lr_disc=m["lr_disc"],
            batch_size=m["batch_size"], max_epochs=m["max_epochs"],
            holdout_fraction=m["holdout_fraction"], patience=m["patience"],
            disc_steps_per_gen_step=m["disc_steps_per_gen_step"],
            n_members=m["n_members"], gen_hidden=tuple(m["gen_hidden"]),
            disc_hidden=tuple(m["disc_hidden"]), seed=derive_seed(self.run_seed, _MODEL_STREAM),
            literal_signs=m["literal_signs"], non_saturating=m["non_saturating"])

    def penalty_config(self) -> PenaltyConfig:
        p = self.values["penalty"]
        return PenaltyConfig(eta=p["eta"], mode=p["mode"], sigma_agg=p["sigma_agg"],
                             disc_samples=p["disc_samples"])

    def policy_config(self) -> PolicyTrainConfig:
        p = self.values["policy"]
        return PolicyTrainConfig(
            gamma=p["gamma"], tau=p["tau"], lr_actor=p["lr_actor"], lr_critic=p["lr_critic"],
            lr_temperature=p["lr_temperature"], batch_size=p["batch_size"],
            real_fraction=p["real_fraction"], rollout_horizon=p["rollout_horizon"],
            rollouts_per_epoch=p["rollouts_per_epoch"], epochs=p["epochs"],
            updates_per_epoch=p["updates_per_epoch"], hidden=tuple(p["hidden"]),
            seed=derive_seed(self.run_seed, _POLICY_STREAM),
            eval_episodes=p["eval_episodes"], model_buffer_epochs=p["model_buffer_epochs"])

    def config_hash(self) -> str:
        return io.config_hash(_jsonable(self.values))

    def stage1_identity(self) -> dict:
        """Everything the trained model artifact depends on."""
        return {"env": _jsonable(self.values["env"]),
                "dataset": _jsonable(self.values["dataset"]),
                "model": _jsonable(self.values["model"]),
                "seed": derive_seed(self.run_seed, _MODEL_STREAM)}


def derive_seed(run_seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([run_seed, stream]).generate_state(1)[0])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


def _validate(values: dict) -> None:
    for section, kv in values.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in kv.items():
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(f"unknown key {section}.{key}")
            if spec.choices and val is not None and val not in spec.choices:
                raise ConfigError(f"{section}.{key} must be one of {spec.choices}, got {val!r}")
    if values["model"]["alpha"] < 0:
        raise ConfigError("model.alpha must be non-negative")
    if values["penalty"]["eta"] < 0:
        raise ConfigError("penalty.eta must be non-negative")
    if not 0 < values["model"]["holdout_fraction"] <= 0.5:
        raise ConfigError("model.holdout_fraction must be in (0, 0.5]")
    if not 0 <= values["policy"]["real_fraction"] <= 1:
        raise ConfigError("policy.real_fraction must be in [0, 1]")
    if values["dataset"]["size"] < 1:
        raise ConfigError("dataset.size must be positive")
    if values["policy"]["rollout_horizon"] < 1:
        raise ConfigError("policy.rollout_horizon must be >= 1")


# -- parsing -------------------------------------------------------------------


def _parse_value(spec: FieldSpec, text: str, line_no: int, col: int):
    text = text.strip()
    try:
        if spec.kind == "int":
            return int(text)
        if spec.kind == "float":
            return float(text)
        if spec.kind == "bool":
            if text.lower() in ("true", "false"):
                return text.lower() == "true"
            raise ValueError("expected true or false")
        if spec.kind == "ints":
            return tuple(int(part.strip()) for part in text.split(",") if part.strip())
        if spec.kind == "optstr":
            return text or None
        return text
    except ValueError as exc:
        raise ConfigError(f"line {line_no}, column {col}: bad {spec.kind} value {text!r} ({exc})") from exc


def loads(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {}
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"line {line_no}, column {len(line)}: unterminated section header")
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {line_no}, column 1: unknown section [{section}]")
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}, column 1: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {line_no}, column 1: setting outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        col = line.index("=") + 2
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {line_no}, column 1: unknown key {section}.{key}")
        if key in values[section]:
            raise ConfigError(f"line {line_no}, column 1: duplicate key {section}.{key}")
        values[section][key] = _parse_value(SCHEMA[section][key], value, line_no, col)
    return ExperimentConfig(values)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


def dump(config: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            val = config.values[section][key]
            lines.append(f"{key} = {_format_value(spec, val)}")
        lines.append("")
    return "\n".join(lines)


def _format_value(spec: FieldSpec, val) -> str:
    if spec.kind == "ints":
        return ", ".join(str(v) for v in val)
    if spec.kind == "bool":
        return "true" if val else "false"
    if spec.kind == "optstr":
        return "" if val is None else str(val)
    return repr(val) if isinstance(val, float) else str(val)


def write_reference(path: str) -> None:
    """Document every key, its type, and its default."""
    lines = ["# Configuration reference: every key with its default value.",
             "# Values shown are the defaults used when a key is omitted.", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            choice = f" (one of: {', '.join(map(str, spec.choices))})" if spec.choices else ""
            lines.append(f"{key} = {_format_value(spec, spec.default)}  # {spec.help}{choice}")
        lines.append("")
    lines.append("# Defaults are desk-scale substitutes sized for CPU runs, not")
    lines.append("# tuned values for any external benchmark. The penalty is computed")
    lines.append("# in normalized units and applied to raw rewards, so penalty.eta")
    lines.append("# absorbs the reward scale of the environment.")
    io.atomic_write(path, ("\n".join(lines) + "\n").encode())
