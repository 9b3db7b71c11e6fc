"""YAML experiment configuration with a strict schema and named presets.

Unknown keys anywhere are an error, so a typo in ``tau_b`` cannot silently
fall back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from robal.attacks import ATTACK_NAMES, AttackBudget
from robal.data import LAYOUTS
from robal.heads import POSTHOC_KINDS, MarginSpec, PostHocRule
from robal.trainer import FINETUNE_METHODS, LOSS_METHODS, MODES, ATConfig, LossSpec

SWEEP_AXES = ("kappa", "m0", "tau-diff", "tau_m", "tau_p", "ir", "pgd-steps")


class ConfigError(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"
    train_path: str | None = None
    test_path: str | None = None
    num_classes: int = 10
    dim: int = 16
    spread: float = 0.2
    layout: str = "ring"
    n_max: int = 1000
    imbalance_ratio: float = 50.0
    test_per_class: int = 200

    def validate(self, where: str) -> None:
        _check(self.source in ("synth", "file"), f"{where}.source must be 'synth' or 'file'")
        if self.source == "file":
            for name in ("train_path", "test_path"):
                path = getattr(self, name)
                _check(path is not None, f"{where}.{name} is required when source is 'file'")
                _check(Path(path).is_file(), f"{where}.{name}: no such file {path!r}")
        _check(self.num_classes >= 2, f"{where}.num_classes must be >= 2")
        _check(self.dim >= 2, f"{where}.dim must be >= 2")
        _check(self.spread >= 0, f"{where}.spread must be >= 0")
        _check(self.layout in LAYOUTS, f"{where}.layout must be one of {LAYOUTS}")
        _check(self.imbalance_ratio >= 1, f"{where}.imbalance_ratio must be >= 1")
        _check(self.n_max >= self.imbalance_ratio, f"{where}.n_max must be >= imbalance_ratio")
        _check(self.test_per_class >= 1, f"{where}.test_per_class must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (8, 16)
    feature_dim: int = 64
    image_shape: tuple[int, ...] | None = None
    head: str = "linear"
    bias: bool = True
    s: float = 10.0
    gamma: float = 0.0625
    m0: float = 0.1
    tau_b: float = 0.0
    tau_m: float = 0.0

    def validate(self, where: str) -> None:
        _check(self.arch in ("mlp", "conv"), f"{where}.arch must be 'mlp' or 'conv'")
        _check(self.head in ("linear", "cosine"), f"{where}.head must be 'linear' or 'cosine'")
        _check(all(h >= 1 for h in self.hidden), f"{where}.hidden sizes must be >= 1")
        _check(len(self.channels) == 2, f"{where}.channels needs two entries")
        if self.arch == "conv":
            _check(self.image_shape is not None and len(self.image_shape) == 3,
                   f"{where}.image_shape (channels, height, width) is required for conv")
        _check(self.s > 0, f"{where}.s must be > 0")
        _check(self.gamma >= 0, f"{where}.gamma must be >= 0")
        _check(self.m0 >= 0, f"{where}.m0 must be >= 0")

    def backbone(self, input_shape) -> dict:
        if self.arch == "mlp":
            return {"arch": "mlp", "input_shape": list(input_shape), "hidden": list(self.hidden)}
        return {"arch": "conv", "image_shape": list(self.image_shape),
                "channels": list(self.channels), "feature_dim": self.feature_dim}

    def head_config(self) -> dict:
        if self.head == "linear":
            return {"kind": "linear", "bias": self.bias}
        return {"kind": "cosine", "s": self.s, "gamma": self.gamma}

    def margins(self) -> MarginSpec:
        return MarginSpec(self.m0, self.tau_b, self.tau_m)


@dataclass(frozen=True)
class TrainingConfig:
    method: str = "ce"
    reweight: str = "none"
    mode: str = "outer"
    alpha: float = 0.0
    kl_scale: float = 1.0
    hyper: dict = field(default_factory=dict)
    epsilon: float = 8 / 255
    eta: float = 2 / 255
    steps: int = 5
    epochs: int = 40
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay_epochs: tuple[int, ...] = (30, 37)
    lr_decay_factor: float = 0.1
    sampler: str = "plain"
    finetune: str = "none"
    finetune_lr: float = 0.01

    def validate(self, where: str) -> None:
        _check(self.method in LOSS_METHODS, f"{where}.method must be one of {LOSS_METHODS}")
        _check(self.reweight in ("none", "class-balanced"), f"{where}.reweight invalid")
        _check(self.mode in MODES, f"{where}.mode must be one of {MODES}")
        _check(self.alpha >= 0, f"{where}.alpha must be >= 0")
        _check(self.kl_scale > 0, f"{where}.kl_scale must be > 0")
        _check(0 <= self.epsilon <= 1, f"{where}.epsilon must lie in [0, 1]")
        _check(self.eta > 0, f"{where}.eta must be > 0")
        _check(self.steps >= 1, f"{where}.steps must be >= 1")
        _check(self.epochs >= 0, f"{where}.epochs must be >= 0")
        _check(self.batch >= 1, f"{where}.batch must be >= 1")
        _check(self.lr >= 0 and self.finetune_lr >= 0, f"{where}: learning rates must be >= 0")
        _check(0 <= self.momentum < 1, f"{where}.momentum must lie in [0, 1)")
        _check(self.weight_decay >= 0, f"{where}.weight_decay must be >= 0")
        _check(0 < self.lr_decay_factor <= 1, f"{where}.lr_decay_factor must lie in (0, 1]")
        _check(self.sampler in ("plain", "class-aware"), f"{where}.sampler invalid")
        _check(self.finetune in ("none", *FINETUNE_METHODS), f"{where}.finetune invalid")
        allowed = {"delta_max", "m", "s", "gamma", "tau", "beta"}
        bad = set(self.hyper) - allowed
        _check(not bad, f"{where}.hyper: unknown keys {sorted(bad)}")
        if self.method == "robal":
            _check(self.mode == "outer", f"{where}.mode must be 'outer' for robal")


@dataclass(frozen=True)
class PosthocConfig:
    kind: str = "none"
    tau: float = 0.0
    alpha: float = 0.0

    def validate(self, where: str) -> None:
        _check(self.kind in POSTHOC_KINDS, f"{where}.kind must be one of {POSTHOC_KINDS}")


@dataclass(frozen=True)
class AttackConfig:
    name: str = "pgd"
    epsilon: float = 8 / 255
    eta: float = 2 / 255
    steps: int = 20
    restarts: int = 1

    def validate(self, where: str) -> None:
        _check(self.name.split(":")[0] in ATTACK_NAMES, f"{where}.name must be one of {ATTACK_NAMES}")
        _check(self.epsilon >= 0, f"{where}.epsilon must be >= 0")
        _check(self.eta > 0, f"{where}.eta must be > 0")
        _check(self.steps >= 1 and self.restarts >= 1, f"{where}: steps and restarts must be >= 1")

    def budget(self) -> AttackBudget:
        return AttackBudget(epsilon=self.epsilon, eta=self.eta, steps=self.steps,
                            restarts=self.restarts)


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "kappa"
    values: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)

    def validate(self, where: str) -> None:
        _check(self.axis in SWEEP_AXES, f"{where}.axis must be one of {SWEEP_AXES}")
        _check(len(self.values) > 0, f"{where}.values must not be empty")


def _default_attacks() -> tuple[AttackConfig, ...]:
    return (AttackConfig("pgd"), AttackConfig("ensemble"))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    preset: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    posthoc: PosthocConfig = field(default_factory=PosthocConfig)
    attacks: tuple[AttackConfig, ...] = field(default_factory=_default_attacks)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "ExperimentConfig":
        _check(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        self.dataset.validate("dataset")
        self.model.validate("model")
        self.training.validate("training")
        self.posthoc.validate("posthoc")
        for i, a in enumerate(self.attacks):
            a.validate(f"attacks[{i}]")
        names = [a.name for a in self.attacks]
        _check(len(set(names)) == len(names), "attack names must be unique")
        self.sweep.validate("sweep")
        if self.training.method in ("robal", "cosine-with-margin"):
            _check(self.model.head == "cosine", f"training.method {self.training.method} needs model.head: cosine")
        return self

    # --- derived objects ---------------------------------------------------

    def at_config(self, seed: int | None = None) -> ATConfig:
        t = self.training
        loss = LossSpec(t.method, t.reweight, tuple(sorted(t.hyper.items())),
                        self.model.margins(), t.alpha, t.kl_scale)
        return ATConfig(loss=loss, mode=t.mode, epsilon=t.epsilon, eta=t.eta, steps=t.steps,
                        epochs=t.epochs, batch=t.batch, lr=t.lr, momentum=t.momentum,
                        weight_decay=t.weight_decay, lr_decay_epochs=tuple(t.lr_decay_epochs),
                        lr_decay_factor=t.lr_decay_factor, sampler=t.sampler,
                        seed=self.seed if seed is None else seed)

    def posthoc_rule(self, direction=None, scales=None) -> PostHocRule:
        p = self.posthoc
        return PostHocRule(p.kind, p.tau, p.alpha, direction=direction, scales=scales)

    def attack_list(self) -> list[tuple[str, AttackBudget]]:
        return [(a.name, a.budget()) for a in self.attacks]

    # --- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "training": TrainingConfig,
             "posthoc": PosthocConfig, "sweep": SweepConfig}
_TUPLES = {"hidden", "channels", "image_shape", "lr_decay_epochs", "values"}
_FLOATS = {"spread", "imbalance_ratio", "s", "gamma", "m0", "tau_b", "tau_m", "alpha", "kl_scale", "epsilon",
           "eta", "lr", "momentum", "weight_decay", "lr_decay_factor", "finetune_lr", "tau"}


def _coerce(name: str, value, where: str):
    if value is None:
        return None
    if name in _TUPLES:
        _check(isinstance(value, (list, tuple)), f"{where}.{name} must be a list")
        return tuple(float(v) if name == "values" else int(v) for v in value)
    if name in _FLOATS:
        _check(isinstance(value, (int, float)) and not isinstance(value, bool),
               f"{where}.{name} must be a number")
        return float(value)
    if name == "hyper":
        _check(isinstance(value, dict), f"{where}.hyper must be a mapping")
        return {str(k): float(v) for k, v in value.items()}
    return value


def _section(cls, data, where: str):
    if data is None:
        return cls()
    _check(isinstance(data, dict), f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    _check(not unknown, f"{where}: unknown keys {sorted(unknown)}")
    return cls(**{k: _coerce(k, v, where) for k, v in data.items()})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "hyper":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(data: dict | None) -> ExperimentConfig:
    """Build a validated config from a mapping, applying ``preset`` first if named."""
    data = dict(data or {})
    preset = data.get("preset")
    if preset is not None:
        _check(preset in PRESETS, f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        data = _merge(PRESETS[preset], data)
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    _check(not unknown, f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key == "attacks":
            _check(isinstance(value, list), "attacks must be a list")
            kwargs[key] = tuple(_section(AttackConfig, a, f"attacks[{i}]") for i, a in enumerate(value))
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _check(data is None or isinstance(data, dict), f"{path}: top level must be a mapping")
    return parse_config(data)


def _linear(**training) -> dict:
    return {"model": {"head": "linear"}, "training": training}


def _cosine(s: float, gamma: float, model=None, **training) -> dict:
    return {"model": {"head": "cosine", "s": s, "gamma": gamma, **(model or {})},
            "training": training}


def _posthoc(kind: str, **params) -> dict:
    return {"model": {"head": "linear"}, "posthoc": {"kind": kind, **params}}


# Hyper-parameters follow the values reported as optimal under adversarial training.
PRESETS: dict[str, dict] = {
    "at": _linear(method="ce"),
    "standard": _linear(method="ce", epsilon=0.0),
    "vanilla-fc": _linear(method="ce"),
    "vanilla-cos": _cosine(16.0, 0.0, model={"m0": 0.0}, method="ce"),
    "class-aware-margin": _linear(method="class-aware-margin", hyper={"delta_max": 0.5}),
    "cosine-with-margin": _cosine(10.0, 0.0, method="cosine-with-margin", hyper={"m": 0.2}),
    "class-aware-temperature": _linear(method="class-aware-temperature", hyper={"gamma": 0.3}),
    "class-aware-bias": _linear(method="class-aware-bias", hyper={"tau": 1.0}),
    "focal": _linear(method="focal", hyper={"gamma": 2.0}),
    "re-sampling": _linear(method="ce", sampler="class-aware"),
    "re-weighting": _linear(method="focal", reweight="class-balanced",
                            hyper={"beta": 0.9999, "gamma": 2.0}),
    "ft-resample": _linear(method="ce", finetune="resample"),
    "ft-reweight": _linear(method="ce", finetune="reweight", hyper={"beta": 0.9999}),
    "ft-lws": _linear(method="ce", finetune="lws"),
    "classifier-rescaling": _posthoc("cdt-post", tau=0.3),
    "classifier-normalization": _posthoc("tau-norm", tau=2.0),
    "la-post": _posthoc("la-post", tau=1.0),
    "feature-disentangling": _posthoc("tde", alpha=0.1),
    "robal": {**_cosine(10.0, 1 / 16, model={"m0": 0.1, "tau_b": 1.5, "tau_m": 0.3},
                        method="robal", alpha=6.0),
              "posthoc": {"kind": "robal-bias", "tau": 0.0}},
    "robal-r": {**_cosine(10.0, 1 / 16, model={"m0": 0.1, "tau_b": 1.5, "tau_m": 0.3},
                          method="robal", alpha=6.0),
                "posthoc": {"kind": "robal-bias", "tau": 0.0}},
    "robal-n": {**_cosine(10.0, 1 / 16, model={"m0": 0.1, "tau_b": 0.0, "tau_m": 0.0},
                          method="robal", alpha=6.0),
                "posthoc": {"kind": "robal-bias", "tau": 1.5}},
}
