"""MARINE-lite: routing agents cross a wave field, logistic agents refuel them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import (
    MOVES,
    N_FEATURES,
    STAY,
    AgentObservation,
    GridEnv,
    JointObservation,
    StepResult,
    place_distinct,
    presence,
    window,
)
from .config import MARINE, EnvConfig

ROUTING, LOGISTIC = "routing", "logistic"

REFUEL_LEVELS = (0.0, 0.15, 0.30, 0.50)
WAVE_RANGE = (0.0, 1.0)

STEP_PENALTY = -0.01
ARRIVAL_REWARD = 1.0
DISTANCE_SHAPING = -0.001
DEPLETION_PENALTY = -1.0
REFUEL_REWARD = 0.1

N_WAVES = 3
NOISE_AR = 0.8
NOISE_SCALE = 0.1


def refuel_fraction(wave_height: float, lo: float = WAVE_RANGE[0], hi: float = WAVE_RANGE[1]) -> float:
    """Fraction of tank capacity transferred at this wave height (4 equal bins)."""
    if not math.isfinite(wave_height):
        raise ValueError("wave height must be finite")
    level = int((wave_height - lo) / (hi - lo) * 4)
    return REFUEL_LEVELS[min(max(level, 0), 3)]


@dataclass
class MarineState:
    step: int
    pos: np.ndarray  # (n_agents, 2) row, col
    fuel: np.ndarray  # (n_routing,)
    arrived: np.ndarray  # (n_routing,) bool
    dest: np.ndarray  # (n_targets, 2)
    wave: np.ndarray  # (H, W) in WAVE_RANGE
    wave_params: np.ndarray  # (N_WAVES, 5): amp, kx, ky, omega, phase
    noise: np.ndarray  # (H, W) AR(1) component
    rng: np.random.Generator
    done: bool = False
    succeeded: bool = False
    failed: bool = False


class MarineEnv(GridEnv):
    classes = (ROUTING, LOGISTIC)
    n_actions_by_class = {ROUTING: 5, LOGISTIC: 5}

    def __init__(self, config: EnvConfig):
        if config.domain != MARINE:
            raise ValueError("MarineEnv needs a MARINE config")
        super().__init__(config)
        H, W = config.height, config.width
        self._rows, self._cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")

    # ------------------------------------------------------------------ dynamics

    def _wave_field(self, params, noise, t) -> np.ndarray:
        raw = np.zeros_like(noise)
        for amp, kx, ky, om, ph in params:
            raw += amp * np.sin(kx * self._cols + ky * self._rows - om * t + ph)
        raw /= params[:, 0].sum()
        return np.clip(0.5 + 0.45 * raw + noise, *WAVE_RANGE)

    def reset(self, seed=None):
        c = self.config
        rng = np.random.default_rng(c.seed if seed is None else seed)
        n = c.n_agents
        cells = place_distinct(rng, c.height, c.width, n + c.n_targets)
        span = max(c.width, c.height)
        params = np.empty((N_WAVES, 5))
        for k in range(N_WAVES):
            ang = rng.uniform(0, 2 * math.pi)
            wavelength = rng.uniform(0.5 * span, 2.0 * span)
            kk = 2 * math.pi / wavelength
            params[k] = (rng.uniform(0.5, 1.0), kk * math.cos(ang), kk * math.sin(ang),
                         rng.uniform(0.1, 0.4), rng.uniform(0, 2 * math.pi))
        noise = NOISE_SCALE * rng.standard_normal((c.height, c.width))
        self.state = MarineState(
            step=0,
            pos=cells[:n].copy(),
            fuel=np.full(c.n_type1, float(c.initial_fuel)),
            arrived=np.zeros(c.n_type1, dtype=bool),
            dest=cells[n:].copy(),
            wave=self._wave_field(params, noise, 0),
            wave_params=params,
            noise=noise,
            rng=rng,
        )
        return self.state, self.observe()

    def _dest_dist(self, r: int, c: int) -> int:
        return int(np.abs(self.state.dest - (r, c)).sum(axis=1).min())

    def step(self, actions) -> StepResult:
        s = self.state
        if s.done:
            raise RuntimeError("step() on a finished episode")
        c = self.config
        a = self.check_actions(actions)
        nr = c.n_type1
        rewards = np.full(c.n_agents, STEP_PENALTY)

        moved = a != STAY
        new_pos = s.pos + MOVES[a]
        for i in range(nr):
            if s.arrived[i] or s.fuel[i] <= 0:
                new_pos[i] = s.pos[i]
                moved[i] = False
        new_pos = self._clamp(new_pos)
        for i in range(nr):
            if moved[i]:
                s.fuel[i] = max(0.0, s.fuel[i] - 1.0)
        s.pos = new_pos

        # wave field advances
        s.step += 1
        s.noise = NOISE_AR * s.noise + math.sqrt(1 - NOISE_AR**2) * NOISE_SCALE * s.rng.standard_normal(s.noise.shape)
        s.wave = self._wave_field(s.wave_params, s.noise, s.step)

        transferred = 0.0
        cap = float(c.initial_fuel)
        for i in range(nr):
            if s.arrived[i]:
                continue
            r, col = s.pos[i]
            helpers = [j for j in range(nr, c.n_agents) if s.pos[j, 0] == r and s.pos[j, 1] == col]
            if helpers:
                amount = min(refuel_fraction(s.wave[r, col]) * cap, cap - s.fuel[i])
                if amount > 0:
                    s.fuel[i] += amount
                    transferred += amount
                    rewards[helpers[0]] += REFUEL_REWARD * amount

        arrivals = 0
        for i in range(nr):
            if s.arrived[i]:
                continue
            r, col = s.pos[i]
            d = self._dest_dist(r, col)
            if d == 0:
                s.arrived[i] = True
                rewards[i] += ARRIVAL_REWARD
                arrivals += 1
            else:
                rewards[i] += DISTANCE_SHAPING * d

        depleted = ~s.arrived & (s.fuel <= 0)
        rewards[:nr][depleted] += DEPLETION_PENALTY
        s.succeeded = bool(s.arrived.all())
        s.failed = bool(depleted.any())
        s.done = s.succeeded or s.failed or s.step >= c.max_steps
        info = {"fuel_transferred": transferred, "agents_arrived": int(s.arrived.sum()),
                "arrivals": arrivals, "step": s.step}
        return StepResult(self.observe(), rewards, s.done, s.succeeded, info)

    def success(self) -> bool:
        return bool(self.state.arrived.all())

    def failure(self) -> bool:
        s = self.state
        return bool((~s.arrived & (s.fuel <= 0)).any())

    # ------------------------------------------------------------ observations

    def observe(self) -> list:
        s, c = self.state, self.config
        H, W = c.height, c.width
        nr = c.n_type1
        routing = presence(s.pos[:nr], H, W)
        logistic = presence(s.pos[nr:], H, W)
        dest = presence(s.dest, H, W)
        inside = np.ones((H, W))
        obs = []
        for i, cls in enumerate(self.agent_classes):
            r, col = s.pos[i]
            fuel = s.fuel[i] / c.initial_fuel if cls == ROUTING else 1.0
            patch = np.stack([
                window(s.wave, r, col, c.fov),
                window(routing, r, col, c.fov),
                window(logistic, r, col, c.fov),
                window(dest, r, col, c.fov),
                window(inside, r, col, c.fov),
                np.full((c.fov, c.fov), fuel),
            ])
            d = s.dest[np.abs(s.dest - (r, col)).sum(axis=1).argmin()]
            arrived = float(s.arrived[i]) if cls == ROUTING else 0.0
            vec = np.array([r / max(H - 1, 1), col / max(W - 1, 1),
                            (d[0] - r) / H, (d[1] - col) / W, arrived])
            obs.append(AgentObservation(cls, patch, vec))
        return obs

    def targets(self, cls: str) -> np.ndarray:
        """Target positions for agents of ``cls``: logistic agents then destinations
        for routing agents; routing agents for logistic agents."""
        s, nr = self.state, self.config.n_type1
        if cls == ROUTING:
            return np.concatenate([s.pos[nr:], s.dest], axis=0)
        return s.pos[:nr].copy()

    def target_points(self, cls: str) -> np.ndarray:
        idx = self.class_agents(cls)
        tp = self.targets(cls)
        return np.broadcast_to(tp, (len(idx),) + tp.shape).copy()

    def global_observe(self) -> JointObservation:
        s, c = self.state, self.config
        H, W = c.height, c.width
        nl = c.n_type2
        cap = float(c.initial_fuel)
        frac = s.step / c.max_steps
        by_class, agents = {}, {}
        for cls in self.classes:
            idx = self.class_agents(cls)
            tp = self.targets(cls)
            m = tp.shape[0]
            feats = np.zeros((len(idx), m, N_FEATURES))
            for a_i, i in enumerate(idx):
                r, col = s.pos[i]
                for j in range(m):
                    tr, tc = tp[j]
                    if cls == ROUTING:
                        is_dest = j >= nl
                        tfuel = 0.0 if is_dest else 1.0
                        flag = 1.0 if is_dest else 0.0
                        afuel = s.fuel[i] / cap
                    else:
                        tfuel = s.fuel[j] / cap
                        flag = float(s.arrived[j])
                        afuel = 1.0
                    feats[a_i, j] = (
                        a_i / max(len(idx) - 1, 1),
                        j / max(m - 1, 1),
                        1.0 if cls == ROUTING else 0.0,
                        afuel,
                        tfuel,
                        (tr - r) / H,
                        (tc - col) / W,
                        (abs(tr - r) + abs(tc - col)) / (H + W),
                        s.wave[r, col],
                        refuel_fraction(s.wave[tr, tc]),
                        flag,
                        frac,
                    )
            by_class[cls] = feats
            agents[cls] = idx
        return JointObservation(by_class, agents, frac)

    def agent_extras(self, i: int) -> tuple:
        """(on-extinguishable-fire flag, fuel fraction) for the executor input."""
        if self.agent_classes[i] == ROUTING:
            return 0.0, self.state.fuel[i] / self.config.initial_fuel
        return 0.0, 1.0

    def render(self) -> str:
        s, c = self.state, self.config
        grid = [["." for _ in range(c.width)] for _ in range(c.height)]
        for r, col in s.dest:
            grid[r][col] = "D"
        for i, (r, col) in enumerate(s.pos):
            grid[r][col] = "R" if i < c.n_type1 else "L"
        return "\n".join("".join(row) for row in grid)
