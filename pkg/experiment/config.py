"""
This file contains the experiment configuration: an INI file whose sections map one to one onto frozen
dataclasses. Anything not given keeps the dataclass default; unknown sections or keys are rejected.
"""

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Tuple, Union

from ride_core.constants import *
from ride_core.market import MarketConfig
from coride.agents import AgentConfig
from coride.ddpg import TrainingConfig
from coride.ranking import RankingConfig

POLICIES = ("coride", "coride+", "ran", "res", "rev")


@dataclass(frozen=True)
class WorldConfig:
    # world spec file; empty means the three-district case-study world
    spec: str = ""
    discount_rate: float = 0.2


@dataclass(frozen=True)
class OrderConfig:
    # order history csv; empty means synthetic Poisson orders
    history: str = ""
    strict: bool = False
    sampling_rate: float = 1.0
    base_rate: float = 4.0
    max_duration: int = 3


@dataclass(frozen=True)
class ExperimentSettings:
    policy: str = "coride+"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    evaluation_episodes: int = 1
    greedy_evaluation: bool = False
    trace_grid: int = -1
    trace_horizon: int = 10
    export_attention: bool = False
    output: str = "runs/latest"


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    orders: OrderConfig = field(default_factory=OrderConfig)
    market: MarketConfig = field(default_factory=MarketConfig)
    ranking: RankingConfig = field(default_factory=RankingConfig)
    agents: AgentConfig = field(default_factory=AgentConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def validate(self) -> "ExperimentConfig":
        if self.experiment.policy not in POLICIES:
            raise ConfigError(f"[experiment] policy must be one of {POLICIES}, got '{self.experiment.policy}'.")
        if not self.experiment.seeds:
            raise ConfigError("[experiment] seeds must name at least one seed.")
        if self.experiment.evaluation_episodes < 1:
            raise ConfigError("[experiment] evaluation_episodes must be positive.")
        if not 0.0 <= self.world.discount_rate < 0.5:
            raise ConfigError(f"[world] discount_rate must lie in [0, 0.5), got {self.world.discount_rate}.")
        if not self.orders.history and self.ranking.max_duration != self.orders.max_duration:
            raise ConfigError(f"[ranking] max_duration ({self.ranking.max_duration}) must match [orders] max_duration "
                              f"({self.orders.max_duration}) for synthetic orders.")
        if self.agents.hidden_size % self.agents.heads:
            raise ConfigError(f"[agents] heads ({self.agents.heads}) must divide hidden_size "
                              f"({self.agents.hidden_size}).")
        self.training.validate()
        return self


SECTIONS = [f.name for f in fields(ExperimentConfig)]


def _section_defaults(section: str):
    return getattr(ExperimentConfig(), section)


def _parse_value(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        match default:
            case bool():
                lowered = text.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: '{text}'")
            case int():
                return int(text, 10)
            case float():
                return float(text)
            case tuple():
                return tuple(int(part, 10) for part in text.split(",") if part.strip())
            case _:
                return text
    except ValueError as e:
        raise ConfigError(f"Invalid value for [{section}] {key}: '{text}'.") from e


def _format_value(value) -> str:
    match value:
        case bool():
            return "true" if value else "false"
        case tuple():
            return ", ".join(str(v) for v in value)
        case _:
            return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError("Could not parse experiment config.") from e

    sections = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]; expected one of {SECTIONS}.")
        defaults = _section_defaults(section)
        known = {f.name for f in fields(defaults)}
        values = {}
        for key, text_value in parser.items(section):
            if key not in known:
                raise ConfigError(f"Unknown key '{key}' in config section [{section}].")
            values[key] = _parse_value(section, key, text_value, getattr(defaults, key))
        sections[section] = replace(defaults, **values)
    return ExperimentConfig(**sections).validate()


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"Could not read config '{path}'.") from e
    return parse_config(text)


def format_config(config: ExperimentConfig) -> str:
    """ Complete INI text for `config`; parse_config of the result gives back an equal config. """
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        values = getattr(config, section)
        for f in fields(values):
            lines.append(f"{f.name} = {_format_value(getattr(values, f.name))}")
        lines.append("")
    return "\n".join(lines)


def describe_defaults() -> str:
    return "config sections, keys and defaults:\n\n" + format_config(ExperimentConfig())


def with_overrides(config: ExperimentConfig, **overrides: Dict) -> ExperimentConfig:
    """ overrides: section name -> {key: value} """
    for section, values in overrides.items():
        if values:
            config = replace(config, **{section: replace(getattr(config, section), **values)})
    return config.validate()
