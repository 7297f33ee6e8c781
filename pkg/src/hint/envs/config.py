from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

MARINE = "marine"
FC = "fc"


@dataclass(frozen=True)
class EnvConfig:
    """Static description of one gridworld scenario.

    ``n_type1``/``n_type2`` are routing/logistic agents for MARINE and
    perception/action agents for FireCommander.
    """

    domain: str
    width: int
    height: int
    fov: int
    n_type1: int
    n_type2: int
    n_targets: int
    max_steps: int
    initial_fuel: float = 0.0
    subarea_side: int = 0
    seed: int = 0
    k: int = 1

    def __post_init__(self):
        if self.domain not in (MARINE, FC):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.fov < 3 or self.fov % 2 == 0:
            raise ValueError("fov must be odd and >= 3")
        if min(self.n_type1, self.n_type2, self.n_targets) < 1:
            raise ValueError("agent and target counts must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be non-empty")
        if self.domain == MARINE and self.initial_fuel <= 0:
            raise ValueError("MARINE needs positive initial_fuel")
        if self.domain == FC and self.subarea_side < 1:
            raise ValueError("FireCommander needs subarea_side >= 1")

    @property
    def n_agents(self) -> int:
        return self.n_type1 + self.n_type2

    def with_seed(self, seed: int) -> "EnvConfig":
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# k is the high-level refresh interval from the teacher pretraining table.
PRESETS = {
    "marine-easy": EnvConfig(MARINE, 5, 5, 3, 2, 1, 1, 50, initial_fuel=5, k=1),
    "marine-medium": EnvConfig(MARINE, 10, 10, 3, 3, 2, 1, 100, initial_fuel=10, k=3),
    "marine-hard": EnvConfig(MARINE, 20, 20, 5, 6, 4, 1, 200, initial_fuel=20, k=5),
    # perception first, action second: easy 1P/2A, medium 2P/3A, hard 4P/6A
    "fc-easy": EnvConfig(FC, 5, 5, 3, 1, 2, 1, 50, subarea_side=5, k=1),
    "fc-medium": EnvConfig(FC, 10, 10, 3, 2, 3, 1, 100, subarea_side=5, k=3),
    "fc-hard": EnvConfig(FC, 21, 21, 5, 4, 6, 1, 210, subarea_side=7, k=5),
}


def preset(name: str, seed: int = 0) -> EnvConfig:
    try:
        return PRESETS[name].with_seed(seed)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def env_config_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    base = d.pop("preset", None)
    if base is not None:
        return dataclasses.replace(preset(base), **d)
    return EnvConfig(**d)


def load_env_config(path) -> EnvConfig:
    with open(Path(path)) as fh:
        return env_config_from_dict(yaml.safe_load(fh) or {})
