"""Run configuration: YAML file with scenario/radio/rewards/training/advisor sections."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .advisor import AdvisorConfig
from .radio import LinkClass, RadioParams
from .rewards import KAPPA
from .world import ConfigError, GaussianMixture, NodeKind, ScenarioConfig

ARTIFACT_VERSION = "0.1.0"


@dataclass(frozen=True)
class RewardsConfig:
    kappa: float = KAPPA
    n_groups: int = 4
    group_sizes: tuple[int, ...] | None = None  # None: BS group first, rest split evenly
    alpha1: tuple[float, ...] | None = None
    alpha2: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigError("rewards.kappa", "must be >= 0")
        if self.n_groups < 1:
            raise ConfigError("rewards.n_groups", "must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 300
    k_epochs: int = 4
    minibatch_size: int = 4096
    lr_start: float = 3e-4
    lr_end: float = 1e-4
    beta1_start: float = 0.5
    beta1_end: float = 0.1
    beta2: float = 0.3
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    share_slots: Any = "agent"  # "agent", "group" or an explicit slot index per agent
    arrive_radius: float | None = None  # None: half a UAV step
    nr: bool = False  # team reward for every agent
    nl: bool = False  # no advisor, no distillation
    nc: bool = False  # no behavioural constraint
    eval_every: int = 50
    eval_episodes: int = 5
    trace_every: int = 50
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 0:
            raise ConfigError("training.n_episodes", "must be >= 0")
        if self.k_epochs < 0:
            raise ConfigError("training.k_epochs", "must be >= 0")
        if self.minibatch_size < 1:
            raise ConfigError("training.minibatch_size", "must be >= 1")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ConfigError("training.lr_start", "learning rates must be > 0")
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ConfigError("training.gamma", "need 0 < gamma <= 1 and 0 <= lam <= 1")
        if self.hidden < 1:
            raise ConfigError("training.hidden", "must be >= 1")
        if isinstance(self.share_slots, str):
            if self.share_slots not in ("agent", "group"):
                raise ConfigError("training.share_slots", f"unknown mode {self.share_slots!r}")
        elif not all(isinstance(s, int) and s >= 0 for s in self.share_slots):
            raise ConfigError("training.share_slots", "explicit slots must be non-negative integers")
        if self.eval_episodes < 0 or self.eval_every < 0 or self.trace_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("training.eval_every", "intervals and counts must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    radio: RadioParams = field(default_factory=RadioParams)
    rewards: RewardsConfig = field(default_factory=RewardsConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    advisor: AdvisorConfig = field(default_factory=AdvisorConfig)


_SCENARIO_KEYS = [f.name for f in dataclasses.fields(ScenarioConfig) if f.name != "rng_seed"]


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(section, "must be a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")


def _build(cls, section: str, data: dict, convert=None):
    allowed = [f.name for f in dataclasses.fields(cls)]
    if cls is ScenarioConfig:
        allowed = _SCENARIO_KEYS
    _check_keys(section, data, allowed)
    kwargs = dict(data)
    if convert:
        kwargs = convert(kwargs)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc


def _scenario_in(d: dict) -> dict:
    gm = d.get("ue_init")
    if gm is not None:
        _check_keys("scenario.ue_init", gm, ("centers", "sigmas", "weights"))
        d["ue_init"] = GaussianMixture(
            tuple(tuple(float(v) for v in c) for c in gm["centers"]),
            tuple(float(s) for s in gm["sigmas"]),
            tuple(float(w) for w in gm.get("weights", [1.0] * len(gm["centers"]))),
        )
    return d


def _radio_in(d: dict) -> dict:
    defaults = RadioParams()
    for key, enum_cls, base in (("p_tx", NodeKind, defaults.p_tx), ("gain", NodeKind, defaults.gain),
                                ("bandwidth", LinkClass, defaults.bandwidth)):
        if key in d:
            sub = d[key]
            _check_keys(f"radio.{key}", sub, [e.value for e in enum_cls])
            merged = dict(base)
            merged.update({enum_cls(k): float(v) for k, v in sub.items()})
            d[key] = merged
    return d


def _tuples(keys):
    def conv(d):
        for k in keys:
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return d
    return conv


def _training_in(d: dict) -> dict:
    if isinstance(d.get("share_slots"), list):
        d["share_slots"] = tuple(d["share_slots"])
    return d


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    _check_keys("config", data, ("scenario", "radio", "rewards", "training", "advisor"))
    return RunConfig(
        scenario=_build(ScenarioConfig, "scenario", data.get("scenario") or {}, _scenario_in),
        radio=_build(RadioParams, "radio", data.get("radio") or {}, _radio_in),
        rewards=_build(RewardsConfig, "rewards", data.get("rewards") or {}, _tuples(("group_sizes", "alpha1", "alpha2"))),
        training=_build(TrainConfig, "training", data.get("training") or {}, _training_in),
        advisor=_build(AdvisorConfig, "advisor", data.get("advisor") or {}),
    )


def _plain(v):
    if isinstance(v, dict):
        return {(k.value if hasattr(k, "value") else k): _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    return v


def config_to_dict(cfg: RunConfig) -> dict:
    out = _plain(cfg)
    out["scenario"].pop("rng_seed", None)
    return out


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot descend into a scalar")
        node[keys[-1]] = _scalar(raw)
    return data


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "2e3" as text
        try:
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
    return config_from_dict(apply_overrides(data, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
