"""Strict JSON run configuration: unknown keys are rejected and every seed must be given."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .autoencoder import DaeConfig
from .channel import ScenarioSpec
from .gan import GanConfig
from .gossip import GossipConfig
from .pipeline import ChannelSettings, ExperimentConfig, Seeds, desk_dae, desk_gan

# gossip seeds come from the top-level seeds block; K and the budget from n_ues and gan.epochs
_GOSSIP_DERIVED = {"seed", "init_seed", "train_seed"}


class ConfigError(ValueError):
    """The run configuration is malformed."""


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(section: str, data, allowed: set[str], required: set[str] = frozenset()) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"{section}: missing required keys {missing}")
    return data


def _build(section: str, cls, data: dict, base=None, exclude: set[str] = frozenset()):
    _check_keys(section, data, _names(cls) - exclude)
    try:
        if base is None:
            return cls(**data)
        kwargs = {f.name: getattr(base, f.name) for f in fields(cls)}
        kwargs.update(data)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    top = _names(ExperimentConfig)
    _check_keys("config", data, top, {"seeds"})
    seeds = _build("seeds", Seeds, _check_keys("seeds", data["seeds"], _names(Seeds), _names(Seeds)))
    channel = _build("channel", ChannelSettings, data.get("channel", {}))
    gan_data = dict(data.get("gan", {}))
    if "size" not in gan_data:
        gan_data["size"] = [channel.n_t, channel.n_c]
    gan = _build("gan", GanConfig, gan_data, desk_gan())
    dae_data = dict(data.get("dae", {}))
    dae_data.setdefault("n_t", channel.n_t)
    dae_data.setdefault("n_c", channel.n_c)
    dae = _build("dae", DaeConfig, dae_data, desk_dae())
    n_ues = data.get("n_ues", 4)
    gossip_data = dict(data.get("gossip", {}))
    _check_keys("gossip", gossip_data, _names(GossipConfig) - _GOSSIP_DERIVED)
    gossip_data.setdefault("n_ues", n_ues)
    gossip_data.setdefault("budget_epochs", gan.epochs)
    gossip = _build("gossip", GossipConfig, gossip_data, exclude=_GOSSIP_DERIVED)
    custom = data.get("custom_scenario")
    custom = _build("custom_scenario", ScenarioSpec, custom) if custom is not None else None
    rest = {k: v for k, v in data.items()
            if k not in ("seeds", "channel", "gan", "dae", "gossip", "custom_scenario")}
    try:
        return ExperimentConfig(channel=channel, gan=gan, dae=dae, gossip=gossip, seeds=seeds,
                                custom_scenario=custom, **rest)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def config_to_dict(config: ExperimentConfig) -> dict:
    d = config.to_dict()
    for k in _GOSSIP_DERIVED:
        d["gossip"].pop(k, None)
    d["gan"]["size"] = list(config.gan.size)
    if d["custom_scenario"] is None:
        del d["custom_scenario"]
    return d


def load_run_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def dump_run_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")
