from .base import (
    ACTION_NAMES,
    DOWN,
    EXTINGUISH,
    LEFT,
    N_FEATURES,
    RIGHT,
    STAY,
    UP,
    AgentObservation,
    GridEnv,
    JointObservation,
    SnapshotError,
    StepResult,
)
from .config import FC, MARINE, PRESETS, EnvConfig, env_config_from_dict, load_env_config, preset
from .firecommander import ACTION, PERCEPTION, FireCommanderEnv
from .marine import LOGISTIC, ROUTING, MarineEnv, refuel_fraction


def make_env(config: EnvConfig) -> GridEnv:
    if config.domain == MARINE:
        return MarineEnv(config)
    return FireCommanderEnv(config)
