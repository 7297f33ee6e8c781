"""Hierarchical centralized teacher.

A high-level coordinator scores every (agent, target) pair and samples a
binary subgoal vector per agent every ``k`` steps.  Class-specific low-level
executors turn (local state, subgoal) into primitive actions.  A value head
over pooled agent-target features supplies V(o) for refinement.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .envs import EXTINGUISH, N_FEATURES, EnvConfig, make_env
from .envs.base import MOVES, STAY

log = logging.getLogger(__name__)

EXEC_FEATURES = 8
ENC_WIDTH = 32
SCORER_WIDTH = 32
VALUE_WIDTH = 64
EXEC_WIDTH = 64


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- parameters

@dataclass
class TeacherParams:
    high: ng.ParamSet
    low: dict
    value: ng.ParamSet

    def copy(self) -> "TeacherParams":
        return TeacherParams(self.high.copy(), {c: p.copy() for c, p in self.low.items()},
                             self.value.copy())


def value_input_width(classes) -> int:
    return 2 * N_FEATURES * len(classes) + 1


def init_high(classes, rng) -> ng.ParamSet:
    ps = ng.ParamSet("teacher_high")
    for c in classes:
        ng.init_mlp(ps, f"enc.{c}", [N_FEATURES, ENC_WIDTH], rng)
    ng.init_mlp(ps, "score", [3 * ENC_WIDTH, SCORER_WIDTH, 1], rng)
    return ps


def init_value(classes, rng) -> ng.ParamSet:
    ps = ng.ParamSet("teacher_value")
    ng.init_mlp(ps, "v", [value_input_width(classes), VALUE_WIDTH, 1], rng)
    return ps


def init_low(cls: str, n_actions: int, rng) -> ng.ParamSet:
    ps = ng.ParamSet(f"teacher_low:{cls}")
    ng.init_mlp(ps, "pi", [EXEC_FEATURES, EXEC_WIDTH, EXEC_WIDTH, n_actions], rng)
    ng.init_mlp(ps, "v", [EXEC_FEATURES, EXEC_WIDTH, 1], rng)
    return ps


def init_teacher(env, seed: int = 0) -> TeacherParams:
    rng = np.random.default_rng(seed)
    classes = env.classes
    return TeacherParams(
        high=init_high(classes, rng),
        low={c: init_low(c, env.n_actions(c), rng) for c in classes},
        value=init_value(classes, rng),
    )


# ---------------------------------------------------------------- high level

def high_logits(P, feats: dict, classes):
    """Pairwise logits per class.

    ``feats[c]`` has shape (B, n_c, m_c, F).  Returns ``{c: Tensor (B, n_c, m_c)}``.
    """
    enc = {c: ng.tanh(ng.affine(feats[c], P[f"enc.{c}.w0"], P[f"enc.{c}.b0"], name=f"enc.{c}"))
           for c in classes}
    n_pairs = sum(feats[c].shape[1] * feats[c].shape[2] for c in classes)
    pooled = None
    for c in classes:
        s = ng.total(enc[c], axis=(1, 2), keepdims=True)
        pooled = s if pooled is None else ng.add(pooled, s)
    global_ctx = ng.mul(pooled, 1.0 / n_pairs)
    out = {}
    for c in classes:
        e = enc[c]
        target_ctx = ng.mean(e, axis=1, keepdims=True)
        zeros = np.zeros(e.shape)
        x = ng.concat([e, ng.add(zeros, target_ctx), ng.add(zeros, global_ctx)], axis=-1)
        logit = ng.mlp(x, P, "score", 2)
        out[c] = ng.reshape(logit, logit.shape[:-1])
    return out


def bits_logprob(logits: dict, bits: dict, classes):
    """Sum of independent Bernoulli log-probs, per batch row: Tensor (B,)."""
    total = None
    for c in classes:
        l = logits[c]
        b = np.asarray(bits[c], dtype=np.float64)
        lp = ng.add(ng.mul(ng.log_sigmoid(l), b), ng.mul(ng.log_sigmoid(ng.mul(l, -1.0)), 1.0 - b))
        s = ng.total(lp, axis=(1, 2))
        total = s if total is None else ng.add(total, s)
    return total


def bits_entropy(logits: dict, classes):
    total = None
    for c in classes:
        l = logits[c]
        p = ng.sigmoid(l)
        h = ng.mul(ng.add(ng.mul(p, ng.log_sigmoid(l)),
                          ng.mul(ng.sub(1.0, p), ng.log_sigmoid(ng.mul(l, -1.0)))), -1.0)
        s = ng.total(h, axis=(1, 2))
        total = s if total is None else ng.add(total, s)
    return total


def value_inputs(jobs_list, classes) -> np.ndarray:
    rows = []
    for jo in jobs_list:
        parts = []
        for c in classes:
            f = jo.by_class[c].reshape(-1, N_FEATURES)
            parts.append(f.mean(axis=0))
            parts.append(f.max(axis=0))
        parts.append([jo.step_frac])
        rows.append(np.concatenate(parts))
    return np.asarray(rows)


def value_graph(P, x):
    out = ng.mlp(x, P, "v", 2)
    return ng.reshape(out, out.shape[:-1])


def stack_features(jobs_list, classes) -> dict:
    return {c: np.stack([jo.by_class[c] for jo in jobs_list]) for c in classes}


@dataclass
class Subgoals:
    """Current assignment per class: ``bits[c]`` is (n_c, m_c) in {0, 1}."""

    bits: dict
    sampled: dict
    age: int = 0
    logprob: float = 0.0

    def copy(self) -> "Subgoals":
        return Subgoals({c: b.copy() for c, b in self.bits.items()},
                        {c: b.copy() for c, b in self.sampled.items()}, self.age, self.logprob)


def remap_empty(bits: dict, jobs, classes, dist_col: int) -> dict:
    """Agents with an all-zero assignment get their nearest target instead."""
    out = {}
    for c in classes:
        b = bits[c].copy()
        for a in range(b.shape[0]):
            if not b[a].any():
                b[a, int(np.argmin(jobs.by_class[c][a, :, dist_col]))] = 1
        out[c] = b
    return out


@dataclass
class TeacherStep:
    actions: np.ndarray
    logprob: float
    high_logprob: float
    low_logprob: float
    subgoals: Subgoals
    refreshed: bool
    jobs: object
    low_logps: np.ndarray = None


class Teacher:
    """Stateless policy object; episode state lives in the Subgoals cache."""

    def __init__(self, env_config: EnvConfig, params: TeacherParams, k: int | None = None):
        self.config = env_config
        self.params = params
        self.k = env_config.k if k is None else k
        probe = make_env(env_config)
        self.classes = probe.classes
        self.n_actions = {c: probe.n_actions(c) for c in self.classes}
        # column of the distance feature in the agent-target layout
        self.dist_col = 7 if env_config.domain == "marine" else 5

    # -- high level ------------------------------------------------------
    def high_level_policy(self, jobs, rng=None, deterministic=False):
        """Bernoulli probabilities per pair, a sampled subgoal set and its log-prob."""
        feats = stack_features([jobs], self.classes)
        with ng.no_grad():
            logits = high_logits(self.params.high.tensors(), feats, self.classes)
        probs = {c: 0.5 * (1.0 + np.tanh(0.5 * logits[c].data[0])) for c in self.classes}
        if deterministic:
            sampled = {c: (probs[c] > 0.5).astype(np.int64) for c in self.classes}
        else:
            sampled = {c: (rng.random(probs[c].shape) < probs[c]).astype(np.int64) for c in self.classes}
        lp = 0.0
        for c in self.classes:
            l = logits[c].data[0]
            b = sampled[c]
            lp += float(np.sum(b * -np.logaddexp(0, -l) + (1 - b) * -np.logaddexp(0, l)))
        bits = remap_empty(sampled, jobs, self.classes, self.dist_col)
        return probs, Subgoals(bits, sampled, 0, lp)

    def high_logprob_graph(self, P, jobs_list, sampled_list):
        feats = stack_features(jobs_list, self.classes)
        logits = high_logits(P, feats, self.classes)
        bits = {c: np.stack([s[c] for s in sampled_list]) for c in self.classes}
        return bits_logprob(logits, bits, self.classes)

    # -- low level -------------------------------------------------------
    def executor_inputs(self, env, subgoals: Subgoals) -> dict:
        out = {}
        for c in self.classes:
            idx = env.class_agents(c)
            pts = env.target_points(c)
            X = np.zeros((len(idx), EXEC_FEATURES))
            for a_i, i in enumerate(idx):
                r, col = env.state.pos[i]
                assigned = np.flatnonzero(subgoals.bits[c][a_i])
                cand = pts[a_i, assigned]
                d = np.abs(cand - (r, col)).sum(axis=1)
                tr, tc = cand[int(np.argmin(d))]
                fire_here, fuel = env.agent_extras(i)
                X[a_i] = executor_features(tr - r, tc - col, env.config.height, env.config.width,
                                           fire_here, fuel)
            out[c] = X
        return out

    def low_level_logp(self, cls: str, X: np.ndarray) -> np.ndarray:
        with ng.no_grad():
            return ng.log_softmax(ng.mlp(X, self.params.low[cls].tensors(), "pi", 3)).data

    def low_level_policy(self, cls: str, X: np.ndarray, params: ng.ParamSet | None = None) -> np.ndarray:
        """Action distribution(s) of the executor for class ``cls``."""
        params = self.params.low[cls] if params is None else params
        if params.role != f"teacher_low:{cls}":
            raise ValueError(f"executor parameters {params.role!r} do not belong to class {cls!r}")
        with ng.no_grad():
            return ng.softmax(ng.mlp(np.atleast_2d(X), params.tensors(), "pi", 3)).data

    # -- acting ----------------------------------------------------------
    def act(self, env, cache: Subgoals | None, rng, deterministic=False, jobs=None) -> TeacherStep:
        """One joint action.  Subgoals are refreshed when ``cache.age`` reaches k."""
        if jobs is None:
            jobs = env.global_observe()
        refreshed = cache is None or cache.age >= self.k
        if refreshed:
            _, cache = self.high_level_policy(jobs, rng, deterministic)
            hl = cache.logprob
        else:
            cache = cache.copy()
            hl = 0.0
        X = self.executor_inputs(env, cache)
        actions = np.zeros(env.config.n_agents, dtype=np.int64)
        low_lps = np.zeros(env.config.n_agents)
        for c in self.classes:
            lp = self.low_level_logp(c, X[c])
            idx = env.class_agents(c)
            for a_i, i in enumerate(idx):
                if deterministic:
                    a = int(np.argmax(lp[a_i]))
                else:
                    a = int(rng.choice(lp.shape[1], p=_normalise(np.exp(lp[a_i]))))
                actions[i] = a
                low_lps[i] = lp[a_i, a]
        cache.age += 1
        return TeacherStep(actions, hl + low_lps.sum(), hl, float(low_lps.sum()), cache, refreshed,
                           jobs, low_lps)

    def joint_logprob(self, env, subgoals: Subgoals, actions, include_high: bool) -> tuple:
        """log pi_T of a given joint action under fixed subgoals: (high part, low part)."""
        X = self.executor_inputs(env, subgoals)
        low = 0.0
        for c in self.classes:
            lp = self.low_level_logp(c, X[c])
            for a_i, i in enumerate(env.class_agents(c)):
                low += lp[a_i, actions[i]]
        return (subgoals.logprob if include_high else 0.0), float(low)

    def value(self, jobs) -> float:
        with ng.no_grad():
            return float(value_graph(self.params.value.tensors(),
                                     value_inputs([jobs], self.classes)).data[0])


def _normalise(p):
    return p / p.sum()


def teacher_value(jobs, value_params: ng.ParamSet, classes) -> float:
    with ng.no_grad():
        return float(value_graph(value_params.tensors(), value_inputs([jobs], classes)).data[0])


def executor_features(dr, dc, height, width, fire_here, fuel) -> np.ndarray:
    s = max(height, width)
    return np.array([np.sign(dr), np.sign(dc), dr / s, dc / s,
                     float(dr == 0 and dc == 0), fire_here, fuel, 1.0])


def executor_features_batch(dr, dc, height, width, fire_here, fuel) -> np.ndarray:
    s = max(height, width)
    return np.stack([np.sign(dr), np.sign(dc), dr / s, dc / s,
                     ((dr == 0) & (dc == 0)).astype(np.float64), fire_here, fuel,
                     np.ones_like(dr, dtype=np.float64)], axis=1)


# ---------------------------------------------------------------- pretraining

@dataclass
class TeacherPretrainConfig:
    timesteps_high: int
    timesteps_low: int
    lr: float = 5e-4
    entropy_coef: float = 0.01
    gamma: float = 0.9
    k: int = 1
    threads_high: int = 16
    threads_low: int = 10
    rollout_low: int = 10
    rollout_high: int = 5
    value_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


# table values: (high timesteps, low timesteps) at paper scale
PRETRAIN_TABLE = {
    "marine-easy": (0.8e7, 0.1e7, 1), "marine-medium": (1.0e7, 0.5e7, 3),
    "marine-hard": (3.4e7, 0.6e7, 5), "fc-easy": (0.25e7, 0.15e7, 1),
    "fc-medium": (0.3e7, 0.5e7, 3), "fc-hard": (0.5e7, 1.3e7, 5),
}


def pretrain_config_for(preset_name: str, scale: float = 0.1, seed: int = 0) -> TeacherPretrainConfig:
    hi, lo, k = PRETRAIN_TABLE[preset_name]
    return TeacherPretrainConfig(int(hi * scale), int(lo * scale), k=k, seed=seed)


class ReachTasks:
    """Batch of independent reach-the-target episodes for one executor class.

    Action-class executors in FireCommander must also extinguish when the
    target cell holds a discovered fire.
    """

    def __init__(self, env_config: EnvConfig, cls: str, n: int, rng, extinguisher: bool):
        self.H, self.W = env_config.height, env_config.width
        self.n = n
        self.rng = rng
        self.extinguisher = extinguisher
        self.marine_routing = env_config.domain == "marine" and cls == "routing"
        self.limit = self.H + self.W + 4
        self.pos = np.zeros((n, 2), dtype=np.int64)
        self.poi = np.zeros((n, 2), dtype=np.int64)
        self.fire = np.zeros(n)
        self.fuel = np.zeros(n)
        self.t = np.zeros(n, dtype=np.int64)
        for i in range(n):
            self._reset(i)

    def _reset(self, i):
        rng = self.rng
        self.poi[i] = (rng.integers(self.H), rng.integers(self.W))
        if rng.random() < 0.2:
            self.pos[i] = self.poi[i]
        else:
            self.pos[i] = (rng.integers(self.H), rng.integers(self.W))
        self.fire[i] = float(self.extinguisher and rng.random() < 0.7)
        self.fuel[i] = rng.random() if self.marine_routing else (0.0 if self.extinguisher else 1.0)
        self.t[i] = 0

    def features(self) -> np.ndarray:
        dr = self.poi[:, 0] - self.pos[:, 0]
        dc = self.poi[:, 1] - self.pos[:, 1]
        here = ((dr == 0) & (dc == 0)).astype(np.float64) * self.fire
        return executor_features_batch(dr, dc, self.H, self.W, here, self.fuel)

    def step(self, actions):
        rewards = np.full(self.n, -0.01)
        dones = np.zeros(self.n, dtype=bool)
        for i, a in enumerate(actions):
            at = (self.pos[i] == self.poi[i]).all()
            if self.fire[i]:
                if a == EXTINGUISH and at:
                    rewards[i] += 1.0
                    dones[i] = True
            if not dones[i] and a != EXTINGUISH:
                self.pos[i] = np.clip(self.pos[i] + MOVES[a], 0, [self.H - 1, self.W - 1])
                if not self.fire[i] and (self.pos[i] == self.poi[i]).all() and (a == STAY or not at):
                    rewards[i] += 1.0
                    dones[i] = True
            self.t[i] += 1
            if self.t[i] >= self.limit:
                dones[i] = True
        for i in np.flatnonzero(dones):
            self._reset(i)
        return rewards, dones


def _a2c_loss(P, X, actions, returns, entropy_coef, value_coef, pi_prefix="pi", n_pi=3):
    logits = ng.mlp(X, P, pi_prefix, n_pi)
    logp = ng.log_softmax(logits)
    v = ng.reshape(ng.mlp(X, P, "v", 2), (X.shape[0],))
    adv = returns - v.data
    chosen = ng.pick(logp, actions)
    pg = ng.mul(ng.mean(ng.mul(chosen, adv)), -1.0)
    ent = ng.mean(ng.total(ng.mul(ng.softmax(logits), logp), axis=-1))  # = -entropy
    vl = ng.mean(ng.square(ng.sub(v, returns)))
    return ng.add(ng.add(pg, ng.mul(ent, entropy_coef)), ng.mul(vl, value_coef))


def pretrain_low_level(env_config: EnvConfig, cfg: TeacherPretrainConfig, params: dict | None = None,
                       classes=None) -> dict:
    """Synchronous advantage actor-critic on randomized reach tasks, one executor per class."""
    probe = make_env(env_config)
    classes = probe.classes if classes is None else classes
    rng = np.random.default_rng(cfg.seed)
    out = {} if params is None else dict(params)
    for cls in classes:
        n_act = probe.n_actions(cls)
        ps = out.get(cls) or init_low(cls, n_act, rng)
        opt = ng.OptState.for_params(ps)
        tasks = ReachTasks(env_config, cls, cfg.threads_low, np.random.default_rng(rng.integers(2**63)),
                           extinguisher=n_act > EXTINGUISH)
        steps = 0
        while steps < cfg.timesteps_low:
            xs, acts, rews, dones = [], [], [], []
            for _ in range(cfg.rollout_low):
                X = tasks.features()
                with ng.no_grad():
                    p = ng.softmax(ng.mlp(X, ps.tensors(), "pi", 3)).data
                a = np.array([rng.choice(n_act, p=_normalise(row)) for row in p])
                r, d = tasks.step(a)
                xs.append(X)
                acts.append(a)
                rews.append(r)
                dones.append(d)
                steps += tasks.n
            with ng.no_grad():
                boot = ng.mlp(tasks.features(), ps.tensors(), "v", 2).data[:, 0]
            ret = boot
            returns = []
            for r, d in zip(reversed(rews), reversed(dones)):
                ret = r + cfg.gamma * ret * (~d)
                returns.append(ret)
            returns = np.concatenate(returns[::-1])
            X = np.concatenate(xs)
            A = np.concatenate(acts)
            g = ng.evaluate_with_gradients(
                lambda P, x: _a2c_loss(P, x.data, A, returns, cfg.entropy_coef, cfg.value_coef), ps, [X])
            if not math.isfinite(g.value):
                raise DivergenceError(f"low-level loss diverged for class {cls}")
            ng.adam_step(ps, g, opt, cfg.lr)
        out[cls] = ps
    return out


def pretrain_high_level(env_config: EnvConfig, cfg: TeacherPretrainConfig, low: dict,
                        params: TeacherParams | None = None, progress=None) -> TeacherParams:
    """Advantage actor-critic over subgoal assignments; executors stay frozen.

    The high-level reward for one decision is the discounted sum of the team
    rewards collected over the following k steps.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    probe = make_env(env_config)
    classes = probe.classes
    if params is None:
        params = TeacherParams(init_high(classes, rng), low, init_value(classes, rng))
    else:
        params = TeacherParams(params.high, low, params.value)
    teacher = Teacher(env_config, params, k=cfg.k)
    opt_h = ng.OptState.for_params(params.high)
    opt_v = ng.OptState.for_params(params.value)
    envs = [make_env(env_config) for _ in range(cfg.threads_high)]
    worker_rngs = [np.random.default_rng([cfg.seed, w]) for w in range(cfg.threads_high)]
    ep_counter = [0]

    def fresh(w):
        ep_counter[0] += 1
        envs[w].reset(seed=int(worker_rngs[w].integers(2**31)))

    for w in range(cfg.threads_high):
        fresh(w)
    gk = cfg.gamma ** cfg.k
    steps = 0
    while steps < cfg.timesteps_high:
        jobs_b, sampled_b, rets_b = [], [], []
        for w, env in enumerate(envs):
            wr = worker_rngs[w]
            seg_jobs, seg_sampled, seg_r, seg_done = [], [], [], []
            for _ in range(cfg.rollout_high):
                jobs = env.global_observe()
                step = teacher.act(env, None, wr, jobs=jobs)
                cache = step.subgoals
                reward, disc = 0.0, 1.0
                res = env.step(step.actions)
                reward += res.team_reward
                steps += 1
                while not res.done and cache.age < cfg.k:
                    disc *= cfg.gamma
                    st = teacher.act(env, cache, wr)
                    cache = st.subgoals
                    res = env.step(st.actions)
                    reward += disc * res.team_reward
                    steps += 1
                seg_jobs.append(jobs)
                seg_sampled.append(step.subgoals.sampled)
                seg_r.append(reward)
                seg_done.append(res.done)
                if res.done:
                    fresh(w)
            boot = 0.0 if seg_done[-1] else teacher.value(env.global_observe())
            ret = boot
            rets = []
            for r, d in zip(reversed(seg_r), reversed(seg_done)):
                ret = r + gk * ret * (not d)
                rets.append(ret)
            jobs_b += seg_jobs
            sampled_b += seg_sampled
            rets_b += rets[::-1]
        returns = np.asarray(rets_b)
        vin = value_inputs(jobs_b, classes)
        gv = ng.evaluate_with_gradients(
            lambda P: ng.mean(ng.square(ng.sub(value_graph(P, vin), returns))), params.value)
        with ng.no_grad():
            v = value_graph(params.value.tensors(), vin).data
        adv = returns - v

        def pol_loss(P):
            feats = stack_features(jobs_b, classes)
            logits = high_logits(P, feats, classes)
            bits = {c: np.stack([s[c] for s in sampled_b]) for c in classes}
            lp = bits_logprob(logits, bits, classes)
            ent = bits_entropy(logits, classes)
            return ng.mul(ng.add(ng.mean(ng.mul(lp, adv)), ng.mul(ng.mean(ent), cfg.entropy_coef)), -1.0)

        gh = ng.evaluate_with_gradients(pol_loss, params.high)
        if not (math.isfinite(gv.value) and math.isfinite(gh.value)):
            raise DivergenceError("high-level pretraining diverged")
        ng.adam_step(params.high, gh, opt_h, cfg.lr)
        ng.adam_step(params.value, gv, opt_v, cfg.lr)
        if progress is not None:
            progress(steps, gh.value, gv.value)
    return params


def pretrain_teacher(env_config: EnvConfig, cfg: TeacherPretrainConfig, progress=None) -> TeacherParams:
    low = pretrain_low_level(env_config, cfg)
    return pretrain_high_level(env_config, cfg, low, progress=progress)


# ---------------------------------------------------------------- checkpoints

def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_teacher(params: TeacherParams, directory, manifest: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ng.save_params(params.high, d / "high.npz")
    ng.save_params(params.value, d / "value.npz")
    for c, p in params.low.items():
        ng.save_params(p, d / f"low_{c}.npz")
    man = dict(manifest or {})
    man["classes"] = list(params.low)
    (d / "manifest.json").write_text(json.dumps(man, indent=2, default=str))
    return d


def load_teacher(directory) -> TeacherParams:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no teacher checkpoint in {d}")
    man = json.loads((d / "manifest.json").read_text())
    return TeacherParams(
        high=ng.load_params(d / "high.npz"),
        low={c: ng.load_params(d / f"low_{c}.npz") for c in man["classes"]},
        value=ng.load_params(d / "value.npz"),
    )


def pretrain_manifest(env_config: EnvConfig, cfg: TeacherPretrainConfig) -> dict:
    payload = {"env": env_config.to_dict(), "pretrain": dataclasses.asdict(cfg)}
    return {"config_hash": config_hash(payload), **payload}
