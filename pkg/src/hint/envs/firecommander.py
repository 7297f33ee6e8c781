"""FireCommander-lite: perception agents find fires, action agents put them out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import (
    EXTINGUISH,
    MOVES,
    N_FEATURES,
    AgentObservation,
    GridEnv,
    JointObservation,
    StepResult,
    binary_entropy,
    place_distinct,
    presence,
    window,
)
from .config import FC, EnvConfig

PERCEPTION, ACTION = "perception", "action"

NONE, BURNING, EXTINGUISHED = 0, 1, 2

P_BASE = 0.05
DOWNWIND_FACTOR = 3.0
FIRE_PENALTY = -0.01
EXTINGUISH_REWARD = 0.5

WINDS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)


@dataclass
class FireState:
    step: int
    pos: np.ndarray  # (n_agents, 2)
    fire: np.ndarray  # (H, W) int8 in {NONE, BURNING, EXTINGUISHED}
    discovered: np.ndarray  # (H, W) bool
    prob: np.ndarray  # (H, W) fire probability believed by the team
    wind: np.ndarray  # (2,) unit step the fire is pushed towards
    rng: np.random.Generator
    done: bool = False
    succeeded: bool = False


def spread_probabilities(wind) -> list:
    """(direction, probability) pairs for a burning cell igniting a neighbour."""
    out = []
    for d in WINDS:
        p = P_BASE * (DOWNWIND_FACTOR if tuple(d) == tuple(wind) else 1.0)
        out.append((d, p))
    return out


def _shift(arr: np.ndarray, dr: int, dc: int, fill=0.0) -> np.ndarray:
    """out[r, c] = arr[r - dr, c - dc] (value carried one cell along (dr, dc))."""
    out = np.full_like(arr, fill)
    H, W = arr.shape
    rs = slice(max(dr, 0), H + min(dr, 0))
    rd = slice(max(-dr, 0), H + min(-dr, 0))
    cs = slice(max(dc, 0), W + min(dc, 0))
    cd = slice(max(-dc, 0), W + min(-dc, 0))
    out[rs, cs] = arr[rd, cd]
    return out


class FireCommanderEnv(GridEnv):
    classes = (PERCEPTION, ACTION)
    n_actions_by_class = {PERCEPTION: 5, ACTION: 6}

    def __init__(self, config: EnvConfig):
        if config.domain != FC:
            raise ValueError("FireCommanderEnv needs an FC config")
        super().__init__(config)
        H, W, s = config.height, config.width, config.subarea_side
        self.subareas = [(r0, c0, min(r0 + s, H), min(c0 + s, W))
                         for r0 in range(0, H, s) for c0 in range(0, W, s)]

    def reset(self, seed=None):
        c = self.config
        rng = np.random.default_rng(c.seed if seed is None else seed)
        n = c.n_agents
        cells = place_distinct(rng, c.height, c.width, n + c.n_targets)
        fire = np.zeros((c.height, c.width), dtype=np.int8)
        for r, col in cells[n:]:
            fire[r, col] = BURNING
        wind = WINDS[rng.integers(len(WINDS))].copy()
        prior = c.n_targets / (c.height * c.width)
        self.state = FireState(
            step=0,
            pos=cells[:n].copy(),
            fire=fire,
            discovered=np.zeros_like(fire, dtype=bool),
            prob=np.full(fire.shape, prior),
            wind=wind,
            rng=rng,
        )
        self._perceive()
        return self.state, self.observe()

    def _fov_mask(self) -> np.ndarray:
        c, s = self.config, self.state
        h = c.fov // 2
        mask = np.zeros((c.height, c.width), dtype=bool)
        for i in range(c.n_type1):
            r, col = s.pos[i]
            mask[max(r - h, 0):r + h + 1, max(col - h, 0):col + h + 1] = True
        return mask

    def _perceive(self) -> None:
        s = self.state
        seen = self._fov_mask()
        burning = s.fire == BURNING
        s.discovered |= seen & burning
        s.prob[seen] = burning[seen].astype(np.float64)
        s.prob[s.fire == EXTINGUISHED] = 0.0

    def _diffuse(self) -> None:
        s = self.state
        keep = np.ones_like(s.prob)
        for d, p in spread_probabilities(s.wind):
            keep *= 1.0 - p * _shift(s.prob, int(d[0]), int(d[1]))
        s.prob = 1.0 - (1.0 - s.prob) * keep
        s.prob[s.fire == EXTINGUISHED] = 0.0

    def _spread(self) -> int:
        s = self.state
        burning = (s.fire == BURNING).astype(np.float64)
        ignite = np.zeros(s.fire.shape, dtype=bool)
        for d, p in spread_probabilities(s.wind):
            src = _shift(burning, int(d[0]), int(d[1])) > 0
            draws = s.rng.random(s.fire.shape)
            ignite |= src & (draws < p)
        ignite &= s.fire == NONE
        s.fire[ignite] = BURNING
        return int(ignite.sum())

    def step(self, actions) -> StepResult:
        s = self.state
        if s.done:
            raise RuntimeError("step() on a finished episode")
        c = self.config
        a = self.check_actions(actions)
        rewards = np.zeros(c.n_agents)
        extinguished = 0
        for i in range(c.n_type1, c.n_agents):
            if a[i] == EXTINGUISH:
                r, col = s.pos[i]
                if s.fire[r, col] == BURNING and s.discovered[r, col]:
                    s.fire[r, col] = EXTINGUISHED
                    rewards[i] += EXTINGUISH_REWARD
                    extinguished += 1
        s.pos = self._clamp(s.pos + MOVES[a])
        ignited = self._spread()
        self._diffuse()
        self._perceive()
        s.step += 1
        n_burning = int((s.fire == BURNING).sum())
        rewards += FIRE_PENALTY * n_burning
        s.succeeded = n_burning == 0
        s.done = s.succeeded or s.step >= c.max_steps
        info = {"fires_extinguished": extinguished, "fires_ignited": ignited,
                "burning": n_burning, "step": s.step}
        return StepResult(self.observe(), rewards, s.done, s.succeeded, info)

    def success(self) -> bool:
        return not bool((self.state.fire == BURNING).any())

    def failure(self) -> bool:
        return self.state.step >= self.config.max_steps and not self.success()

    # ------------------------------------------------------------ observations

    def entropy(self) -> np.ndarray:
        return binary_entropy(self.state.prob)

    def known_fires(self) -> np.ndarray:
        s = self.state
        return np.argwhere((s.fire == BURNING) & s.discovered)

    def observe(self) -> list:
        s, c = self.state, self.config
        H, W = c.height, c.width
        nP = c.n_type1
        perc = presence(s.pos[:nP], H, W)
        act = presence(s.pos[nP:], H, W)
        burning = (s.fire == BURNING).astype(np.float64)
        ent = self.entropy()
        inside = np.ones((H, W))
        known = self.known_fires()
        obs = []
        for i, cls in enumerate(self.agent_classes):
            r, col = s.pos[i]
            if cls == PERCEPTION:
                patch = np.stack([
                    window(burning, r, col, c.fov),
                    window(perc, r, col, c.fov),
                    window(act, r, col, c.fov),
                    window(ent, r, col, c.fov),
                    window(inside, r, col, c.fov),
                ])
                vec = np.array([r / max(H - 1, 1), col / max(W - 1, 1)])
            else:
                patch = np.zeros((0, c.fov, c.fov))
                if len(known):
                    dists = np.abs(known - (r, col)).sum(axis=1)
                    f = known[dists.argmin()]
                    vec = np.array([r / max(H - 1, 1), col / max(W - 1, 1), 1.0,
                                    (f[0] - r) / H, (f[1] - col) / W, dists.min() / (H + W),
                                    float(dists.min() == 0), len(known) / (H * W)])
                else:
                    vec = np.array([r / max(H - 1, 1), col / max(W - 1, 1), 0.0,
                                    0.0, 0.0, 0.0, 0.0, 0.0])
            obs.append(AgentObservation(cls, patch, vec))
        return obs

    def _poi(self, cls: str, r: int, col: int, area, ent, known) -> tuple:
        r0, c0, r1, c1 = area
        if cls == PERCEPTION:
            sub = ent[r0:r1, c0:c1]
            cand = np.argwhere(sub >= sub.max() - 1e-12) + (r0, c0)
        else:
            inside = [f for f in known if r0 <= f[0] < r1 and c0 <= f[1] < c1]
            if not inside:
                return ((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2)
            cand = np.array(inside)
        d = np.abs(cand - (r, col)).sum(axis=1)
        best = cand[d.argmin()]
        return int(best[0]), int(best[1])

    def target_points(self, cls: str) -> np.ndarray:
        s = self.state
        ent = self.entropy()
        known = self.known_fires()
        idx = self.class_agents(cls)
        out = np.zeros((len(idx), len(self.subareas), 2), dtype=np.int64)
        for a_i, i in enumerate(idx):
            r, col = s.pos[i]
            for j, area in enumerate(self.subareas):
                out[a_i, j] = self._poi(cls, r, col, area, ent, known)
        return out

    def global_observe(self) -> JointObservation:
        s, c = self.state, self.config
        H, W = c.height, c.width
        ent = self.entropy()
        frac = s.step / c.max_steps
        known_mask = (s.fire == BURNING) & s.discovered
        m = len(self.subareas)
        stats = []
        for r0, c0, r1, c1 in self.subareas:
            e = ent[r0:r1, c0:c1]
            k = known_mask[r0:r1, c0:c1]
            stats.append((e.max(), e.mean(), k.sum() / k.size, float(k.any())))
        by_class, agents = {}, {}
        for cls in self.classes:
            idx = self.class_agents(cls)
            pts = self.target_points(cls)
            feats = np.zeros((len(idx), m, N_FEATURES))
            for a_i, i in enumerate(idx):
                r, col = s.pos[i]
                for j, (r0, c0, r1, c1) in enumerate(self.subareas):
                    pr, pc = pts[a_i, j]
                    feats[a_i, j] = (
                        a_i / max(len(idx) - 1, 1),
                        j / max(m - 1, 1),
                        1.0 if cls == PERCEPTION else 0.0,
                        (pr - r) / H,
                        (pc - col) / W,
                        (abs(pr - r) + abs(pc - col)) / (H + W),
                        *stats[j],
                        float(r0 <= r < r1 and c0 <= col < c1),
                        frac,
                    )
            by_class[cls] = feats
            agents[cls] = idx
        return JointObservation(by_class, agents, frac)

    def agent_extras(self, i: int) -> tuple:
        s = self.state
        if self.agent_classes[i] == ACTION:
            r, col = s.pos[i]
            return float(s.fire[r, col] == BURNING and s.discovered[r, col]), 0.0
        return 0.0, 0.0

    def render(self) -> str:
        s, c = self.state, self.config
        sym = {NONE: ".", BURNING: "F", EXTINGUISHED: "x"}
        grid = [[sym[int(v)] for v in row] for row in s.fire]
        for i, (r, col) in enumerate(s.pos):
            grid[r][col] = "P" if i < c.n_type1 else "A"
        return "\n".join("".join(row) for row in grid)
