"""Evaluation protocol and teacher/student state-distribution diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import STAY, make_env
from .student import Student
from .teacher import Teacher, value_inputs

CURVE_FIELDS = ("epoch", "timestep", "success_rate", "steps_taken", "suboptimal_demo_rate",
                "teacher_success_rate")
CURVE_SCHEMA_VERSION = 1


# ---------------------------------------------------------------- policies

class TeacherPolicy:
    def __init__(self, teacher: Teacher, deterministic=False):
        self.teacher = teacher
        self.deterministic = deterministic
        self.cache = None

    def reset(self):
        self.cache = None

    def act(self, env, obs, rng):
        st = self.teacher.act(env, self.cache, rng, self.deterministic)
        self.cache = st.subgoals
        return st.actions


class StudentPolicy:
    def __init__(self, student: Student, deterministic=False):
        self.student = student
        self.deterministic = deterministic
        self.hidden = None

    def reset(self):
        self.hidden = self.student.initial_hidden()

    def act(self, env, obs, rng):
        a, _, self.hidden = self.student.act(obs, self.hidden, rng, self.deterministic)
        return a


class ConstantPolicy:
    """Every agent repeats one action (STAY by default)."""

    def __init__(self, action: int = STAY):
        self.action = action

    def reset(self):
        pass

    def act(self, env, obs, rng):
        return np.full(env.config.n_agents, self.action, dtype=np.int64)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    success_rate: float
    steps_taken: float
    episodes: int
    seeds: list
    per_seed: list = field(default_factory=list)  # (seed, success_rate, steps_taken)

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate, "steps_taken": self.steps_taken,
                "episodes": self.episodes, "seeds": list(self.seeds),
                "per_seed": [list(r) for r in self.per_seed]}


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode, 7]).generate_state(1)[0])


def run_episode(policy, env, seed: int, rng) -> tuple:
    """Returns (success, steps counted).  Failures count the full horizon."""
    _, obs = env.reset(seed=seed)
    policy.reset()
    done = False
    while not done:
        res = env.step(policy.act(env, obs, rng))
        obs, done = res.observations, res.done
    ok = bool(env.success())
    return ok, (env.t if ok else env.config.max_steps)


def evaluate(policy, env_config, episodes: int = 50, seeds=(0, 1, 2)) -> EvalReport:
    """Success rate and mean steps over ``episodes`` fresh episodes per seed."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    seeds = list(seeds)
    env = make_env(env_config)
    per_seed, succ, steps = [], [], []
    for s in seeds:
        rng = np.random.default_rng([s, 11])
        ok_s, st_s = [], []
        for ep in range(episodes):
            ok, n = run_episode(policy, env, episode_seed(s, ep), rng)
            ok_s.append(ok)
            st_s.append(n)
        per_seed.append((s, float(np.mean(ok_s)), float(np.mean(st_s))))
        succ += ok_s
        steps += st_s
    return EvalReport(float(np.mean(succ)), float(np.mean(steps)), episodes, seeds, per_seed)


# ---------------------------------------------------------------- state samples

def collect_states(policy, env_config, n_states: int, seed: int = 0) -> np.ndarray:
    """Pooled agent-target features of the global observations visited by ``policy``."""
    env = make_env(env_config)
    rng = np.random.default_rng([seed, 13])
    rows, ep = [], 0
    while len(rows) < n_states:
        _, obs = env.reset(seed=episode_seed(seed, 100000 + ep))
        policy.reset()
        ep += 1
        done = False
        while not done and len(rows) < n_states:
            jobs = env.global_observe()
            rows.append(value_inputs([jobs], env.classes)[0, :-1])  # drop the time feature
            res = env.step(policy.act(env, obs, rng))
            obs, done = res.observations, res.done
    return np.asarray(rows)


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray  # (k,)
    total_variance: float
    rank_deficient: bool

    def project(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance if self.total_variance > 0 else \
            np.zeros_like(self.explained_variance)


def power_iteration_pca(x, dims: int = 2, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> PCAResult:
    """Top principal directions by power iteration with deflation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < dims + 1:
        raise ValueError(f"need at least {dims + 1} samples of shape (N, D)")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    comps, lams = [], []
    work = cov.copy()
    for _ in range(min(dims, x.shape[1])):
        v = rng.standard_normal(x.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            w /= nw
            # project out directions already found to keep the basis orthogonal
            for c in comps:
                w -= (w @ c) * c
            w /= np.linalg.norm(w)
            diff = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
            v = w
            if diff < tol:
                break
        lam = float(v @ cov @ v)
        if lam <= 1e-12 * max(total, 1e-300):
            break
        comps.append(v)
        lams.append(lam)
        work = work - lam * np.outer(v, v)
    rank_def = len(comps) < dims
    k = len(comps)
    return PCAResult(mean, np.asarray(comps).reshape(k, x.shape[1]), np.asarray(lams), total, rank_def)


def pca_project(samples: dict, dims: int = 2, seed: int = 0) -> tuple:
    """Fit one basis on the union of the named sample sets and project each.

    Returns ``({name: (N_name, k) points}, PCAResult)``.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in samples.items()}
    widths = {a.shape[1] for a in arrays.values()}
    if len(widths) != 1:
        raise ValueError("sample sets differ in dimensionality")
    fit = power_iteration_pca(np.concatenate(list(arrays.values())), dims, seed=seed)
    return {k: fit.project(a) for k, a in arrays.items()}, fit


def histogram_kl(teacher_points, student_points, bins: int = 50, eps: float = 1e-6) -> float:
    """KL(student || teacher) between smoothed 2-D histograms on a shared box."""
    p_t = np.asarray(teacher_points, dtype=np.float64).reshape(-1, 2)
    p_s = np.asarray(student_points, dtype=np.float64).reshape(-1, 2)
    if len(p_t) == 0 or len(p_s) == 0:
        raise ValueError("both point sets must be non-empty")
    both = np.concatenate([p_t, p_s])
    lo, hi = both.min(axis=0), both.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    box = [(lo[0], hi[0]), (lo[1], hi[1])]
    ht, _, _ = np.histogram2d(p_t[:, 0], p_t[:, 1], bins=bins, range=box)
    hs, _, _ = np.histogram2d(p_s[:, 0], p_s[:, 1], bins=bins, range=box)
    qt = ht / ht.sum() + eps
    qs = hs / hs.sum() + eps
    qt /= qt.sum()
    qs /= qs.sum()
    return max(float(np.sum(qs * np.log(qs / qt))), 0.0)


def divergence_report(teacher_states, student_states, bins: int = 50) -> dict:
    pts, fit = pca_project({"teacher": teacher_states, "student": student_states})
    if pts["teacher"].shape[1] < 2:
        pad = lambda a: np.pad(a, ((0, 0), (0, 2 - a.shape[1])))
        pts = {k: pad(v) for k, v in pts.items()}
    kl = histogram_kl(pts["teacher"], pts["student"], bins)
    return {"kl": kl, "direction": "KL(student || teacher)", "bins": bins,
            "n_teacher": len(teacher_states), "n_student": len(student_states),
            "explained_ratio": fit.explained_ratio.tolist(), "rank_deficient": fit.rank_deficient}


# ---------------------------------------------------------------- curves

def write_curve(path, rows, append: bool = False) -> None:
    """Learning-curve CSV; missing fields are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        if new:
            fh.write(f"# schema {CURVE_SCHEMA_VERSION}\n")
            w.writeheader()
        for r in rows:
            w.writerow(r)


def read_curve(path) -> list:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))
