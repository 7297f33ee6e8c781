from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig

UP, DOWN, LEFT, RIGHT, STAY, EXTINGUISH = range(6)
ACTION_NAMES = ("up", "down", "left", "right", "stay", "extinguish")
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0), (0, 0)], dtype=np.int64)

# shared agent-target feature layout width (see global_observe)
N_FEATURES = 12

_TOKEN_MAGIC = b"HINTSNAP1"


class SnapshotError(ValueError):
    pass


@dataclass
class AgentObservation:
    """Local view of one agent: a (channels, fov, fov) patch plus a small vector."""

    agent_class: str
    patch: np.ndarray
    vector: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.patch.reshape(-1), self.vector])


@dataclass
class StepResult:
    observations: list
    rewards: np.ndarray
    done: bool
    success: bool
    info: dict = field(default_factory=dict)

    @property
    def team_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass
class JointObservation:
    """Agent-target feature rows for the centralized teacher.

    ``by_class[c]`` has shape (n_agents_of_class, n_targets_of_class, N_FEATURES);
    ``agents[c]`` lists the global agent indices in that block.
    """

    by_class: dict
    agents: dict
    step_frac: float

    def rows(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1, b.shape[-1]) for b in self.by_class.values()], axis=0)

    def n_rows(self) -> int:
        return sum(b.shape[0] * b.shape[1] for b in self.by_class.values())


def place_distinct(rng: np.random.Generator, height: int, width: int, n: int) -> np.ndarray:
    if n > height * width:
        raise ValueError(f"cannot place {n} entities on a {height}x{width} grid")
    cells = rng.choice(height * width, size=n, replace=False)
    return np.stack([cells // width, cells % width], axis=1).astype(np.int64)


def window(arr: np.ndarray, r: int, c: int, fov: int, fill=0.0) -> np.ndarray:
    """fov x fov patch of ``arr`` centred on (r, c); out-of-bounds cells = ``fill``."""
    h = fov // 2
    out = np.full((fov, fov), fill, dtype=np.float64)
    H, W = arr.shape
    r0, r1 = max(r - h, 0), min(r + h + 1, H)
    c0, c1 = max(c - h, 0), min(c + h + 1, W)
    out[r0 - (r - h):r1 - (r - h), c0 - (c - h):c1 - (c - h)] = arr[r0:r1, c0:c1]
    return out


def presence(positions: np.ndarray, height: int, width: int) -> np.ndarray:
    grid = np.zeros((height, width))
    for r, c in positions:
        grid[r, c] += 1.0
    return grid


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p, dtype=np.float64)
    m = (p > 0) & (p < 1)
    q = p[m]
    out[m] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return out


class GridEnv:
    """Shared machinery: seeding, action checks, snapshot/restore."""

    classes: tuple = ()
    n_actions_by_class: dict = {}

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = None

    # subclasses fill these in
    def reset(self, seed=None):
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        raise NotImplementedError

    @property
    def agent_classes(self) -> list:
        c = self.config
        return [self.classes[0]] * c.n_type1 + [self.classes[1]] * c.n_type2

    def class_agents(self, cls: str) -> list:
        return [i for i, c in enumerate(self.agent_classes) if c == cls]

    def n_actions(self, cls: str) -> int:
        return self.n_actions_by_class[cls]

    def check_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        if a.shape[0] != self.config.n_agents:
            raise ValueError(f"expected {self.config.n_agents} actions, got {a.shape[0]}")
        for i, cls in enumerate(self.agent_classes):
            if not 0 <= a[i] < self.n_actions_by_class[cls]:
                raise ValueError(f"invalid action {a[i]} for {cls} agent {i}")
        return a

    def _clamp(self, pos: np.ndarray) -> np.ndarray:
        pos[..., 0] = np.clip(pos[..., 0], 0, self.config.height - 1)
        pos[..., 1] = np.clip(pos[..., 1], 0, self.config.width - 1)
        return pos

    @property
    def t(self) -> int:
        return self.state.step

    @property
    def done(self) -> bool:
        return self.state.done

    def snapshot(self) -> bytes:
        payload = pickle.dumps(self.state, protocol=pickle.HIGHEST_PROTOCOL)
        return _TOKEN_MAGIC + hashlib.sha256(payload).digest() + payload

    def restore(self, token: bytes):
        if not isinstance(token, (bytes, bytearray)) or not token.startswith(_TOKEN_MAGIC):
            raise SnapshotError("not a snapshot token")
        body = token[len(_TOKEN_MAGIC):]
        digest, payload = body[:32], body[32:]
        if hashlib.sha256(payload).digest() != digest:
            raise SnapshotError("snapshot token is corrupted")
        self.state = pickle.loads(payload)
        return self.state

    def clone(self) -> "GridEnv":
        other = type(self)(self.config)
        other.restore(self.snapshot())
        return other

    def reseed(self, seed) -> None:
        """Replace the dynamics RNG stream (used to fork lookahead simulations)."""
        self.state.rng = np.random.default_rng(seed)
