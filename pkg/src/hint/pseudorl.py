"""Teacher refinement on spliced student/teacher trajectories.

Each episode picks a switch point t' uniformly in 1..H.  The frozen
student acts for steps 1..t', the teacher from t'+1 on.  Steps go into a
buffer of ``n`` consecutive transitions (it may span episodes); on a full
buffer V-trace targets are computed, the teacher's value head is regressed
onto them and the high-level policy takes an importance-weighted policy
gradient step.  The low-level executors and the student never change.

To give student steps a teacher log-probability, the teacher's high level
keeps running in the background during the student prefix: it samples a
subgoal set at every k-boundary exactly as if it were acting, and the
teacher's log-prob of the student's joint action is the subgoal log-prob
(on refresh steps) plus the executors' log-prob of the student's actions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from .envs import make_env
from .student import Student
from .teacher import Teacher, bits_logprob, high_logits, stack_features, value_graph, value_inputs

log = logging.getLogger(__name__)

STUDENT, TEACHER = "student", "teacher"


@dataclass
class PseudoConfig:
    n: int = 200
    gamma: float = 0.9
    n_pseudo: int = 10
    lr_value: float = 1e-4
    lr_policy: float = 1e-4
    ratio_clip: float | None = None  # None: plain ratio pi_T / pi_S

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_pseudo < 0:
            raise ValueError("n_pseudo must be non-negative")
        if self.lr_value <= 0 or self.lr_policy <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class MixedStep:
    jobs: object
    actions: np.ndarray
    reward: float
    behavior_logp: float
    tag: str
    done: bool
    sampled: dict  # teacher subgoal sample live at this step
    refreshed: bool  # the subgoal sample was drawn at this step
    low_logp: float  # executors' log-prob of the executed joint action
    next_jobs: object = None


@dataclass
class MixedTrajectory:
    steps: list
    switch: int
    success: bool = False

    def __len__(self):
        return len(self.steps)


@dataclass
class VTraceBatch:
    vs: np.ndarray
    rhos: np.ndarray
    cs: np.ndarray
    deltas: np.ndarray
    advantages: np.ndarray


def rollout_mixed(env, student: Student, teacher: Teacher, seed: int, rng: np.random.Generator,
                  switch: int | None = None) -> MixedTrajectory:
    """One spliced episode.  ``switch`` overrides the sampled t'."""
    H = env.config.max_steps
    t_switch = int(rng.integers(1, H + 1)) if switch is None else int(switch)
    _, obs = env.reset(seed=seed)
    hidden = student.initial_hidden()
    cache = None
    steps = []
    t = 0
    done = False
    jobs = env.global_observe()
    while not done:
        t += 1
        if t <= t_switch:
            refreshed = cache is None or cache.age >= teacher.k
            if refreshed:
                _, cache = teacher.high_level_policy(jobs, rng)
            else:
                cache = cache.copy()
            actions, lps, hidden = student.act(obs, hidden, rng)
            _, low = teacher.joint_logprob(env, cache, actions, include_high=False)
            cache.age += 1
            behavior, tag = float(lps.sum()), STUDENT
        else:
            st = teacher.act(env, cache, rng, jobs=jobs)
            cache, refreshed = st.subgoals, st.refreshed
            actions, low, behavior, tag = st.actions, st.low_logprob, st.logprob, TEACHER
        res = env.step(actions)
        done = res.done
        next_jobs = env.global_observe()
        steps.append(MixedStep(jobs, np.asarray(actions), res.team_reward, behavior, tag, done,
                               {c: b.copy() for c, b in cache.sampled.items()}, refreshed, float(low),
                               next_jobs))
        jobs, obs = next_jobs, res.observations
    return MixedTrajectory(steps, t_switch, bool(env.success()))


def vtrace_targets(values, bootstrap_value: float, rewards, discounts, log_rhos) -> VTraceBatch:
    """V-trace targets for one segment.

    ``values[t] = V(o_t)``; ``discounts[t]`` is gamma for a continuing step
    and 0 after a terminal one; ``log_rhos[t] = log pi_T(a_t|o_t) - log mu(a_t|o_t)``.
    The target after the last step is ``bootstrap_value``.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = np.asarray(discounts, dtype=np.float64)
    log_rhos = np.asarray(log_rhos, dtype=np.float64)
    if np.any(np.isnan(log_rhos)) or np.any(log_rhos == np.inf):
        raise ValueError("behavior log-prob of an executed action is -inf or NaN")
    rhos = np.minimum(1.0, np.exp(np.minimum(log_rhos, 0.0)))
    cs = rhos.copy()
    if not np.all(rhos > 0):
        raise ValueError("target policy gives zero probability to an executed action")
    T = len(values)
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rhos * (rewards + discounts * next_values - values)
    acc = 0.0
    corr = np.zeros(T)
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + discounts[t] * cs[t] * acc
        corr[t] = acc
    vs = values + corr
    vs_next = np.append(vs[1:], bootstrap_value)
    adv = rewards + discounts * vs_next - values
    out = VTraceBatch(vs, rhos, cs, deltas, adv)
    for name in ("vs", "deltas", "advantages"):
        if not np.all(np.isfinite(getattr(out, name))):
            raise ng.NonFiniteError(f"non-finite V-trace {name}")
    return out


def value_loss(P_value, vin, targets):
    """Mean squared error between V(o_t) and the (constant) targets."""
    v = value_graph(P_value, vin)
    return ng.mean(ng.square(ng.sub(v, np.asarray(targets, dtype=np.float64))), name="value_loss")


def teacher_logp_graph(P_high, teacher: Teacher, steps):
    """log pi_T(a_t|o_t) for every step as a Tensor (T,); only the subgoal
    part depends on the high-level parameters."""
    feats = stack_features([s.jobs for s in steps], teacher.classes)
    logits = high_logits(P_high, feats, teacher.classes)
    bits = {c: np.stack([s.sampled[c] for s in steps]) for c in teacher.classes}
    hl = bits_logprob(logits, bits, teacher.classes)
    refreshed = np.array([float(s.refreshed) for s in steps])
    low = np.array([s.low_logp for s in steps])
    return ng.add(ng.mul(hl, refreshed), low, name="teacher_logp")


def policy_objective(teacher_logp, student_mask, behavior_logp, advantages, ratio_clip=None):
    """Importance-weighted policy-gradient surrogate.

    ``teacher_logp`` is a Tensor (T,) depending on the high-level parameters;
    student-tagged rows are weighted by exp(log pi_T - log pi_S) evaluated
    as a constant, teacher-tagged rows by 1.  Advantages are constants.
    """
    lt = ng.as_tensor(teacher_logp)
    mask = np.asarray(student_mask, dtype=bool)
    w = np.ones(len(mask))
    if mask.any():
        w[mask] = np.exp(lt.data[mask] - np.asarray(behavior_logp, dtype=np.float64)[mask])
        if ratio_clip is not None:
            w = np.minimum(w, ratio_clip)
    coef = w * np.asarray(advantages, dtype=np.float64)
    if not np.all(np.isfinite(coef)):
        raise ng.NonFiniteError("non-finite importance-weighted advantage")
    return ng.mean(ng.mul(lt, coef), name="policy_objective")


@dataclass
class PseudoStats:
    updates: int = 0
    skipped: int = 0
    episodes: int = 0
    steps: int = 0
    value_losses: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    student_fraction: list = field(default_factory=list)


class PseudoLearner:
    """Holds the step buffer and optimizer states across epochs."""

    def __init__(self, teacher: Teacher, config: PseudoConfig):
        self.teacher = teacher
        self.config = config
        self.buffer = []
        self.opt_high = ng.OptState.for_params(teacher.params.high)
        self.opt_value = ng.OptState.for_params(teacher.params.value)

    def push(self, step: MixedStep, stats: PseudoStats) -> None:
        self.buffer.append(step)
        if len(self.buffer) >= self.config.n:
            self.update(self.buffer, stats)
            self.buffer = []

    def update(self, steps, stats: PseudoStats) -> None:
        cfg, teacher = self.config, self.teacher
        params = teacher.params
        classes = teacher.classes
        vin = value_inputs([s.jobs for s in steps], classes)
        last = steps[-1]
        with ng.no_grad():
            values = value_graph(params.value.tensors(), vin).data
            boot = 0.0 if last.done else float(
                value_graph(params.value.tensors(), value_inputs([last.next_jobs], classes)).data[0])
            lt_now = teacher_logp_graph(params.high.tensors(), teacher, steps).data
        rewards = np.array([s.reward for s in steps])
        discounts = cfg.gamma * (1.0 - np.array([s.done for s in steps], dtype=np.float64))
        mu = np.array([s.behavior_logp for s in steps])
        student_mask = np.array([s.tag == STUDENT for s in steps])
        try:
            vt = vtrace_targets(values, boot, rewards, discounts, lt_now - mu)
            gv = ng.evaluate_with_gradients(lambda P: value_loss(P, vin, vt.vs), params.value)
            gh = ng.evaluate_with_gradients(
                lambda P: policy_objective(teacher_logp_graph(P, teacher, steps), student_mask, mu,
                                           vt.advantages, cfg.ratio_clip), params.high)
            if not (math.isfinite(gv.value) and math.isfinite(gh.value)):
                raise ng.NonFiniteError("non-finite refinement loss")
        except (ng.NonFiniteError, ValueError) as exc:
            log.warning("refinement step skipped: %s", exc)
            stats.skipped += 1
            return
        ng.adam_step(params.value, gv, self.opt_value, cfg.lr_value)
        ng.adam_step(params.high, gh, self.opt_high, cfg.lr_policy, maximize=True)
        stats.updates += 1
        stats.value_losses.append(gv.value)
        stats.objectives.append(gh.value)
        stats.student_fraction.append(float(student_mask.mean()))


def pseudo_update(teacher: Teacher, env_config, student: Student, config: PseudoConfig,
                  rng: np.random.Generator, learner: PseudoLearner | None = None,
                  seeds=None) -> tuple:
    """Run ``config.n_pseudo`` spliced episodes, updating the teacher's high
    level and value head in place.  Returns ``(learner, PseudoStats)``; pass
    the learner back in to keep a partly filled buffer across calls."""
    if learner is None:
        learner = PseudoLearner(teacher, config)
    learner.teacher = teacher
    learner.config = config
    env = make_env(env_config)
    stats = PseudoStats()
    for e in range(config.n_pseudo):
        seed = int(rng.integers(2**31)) if seeds is None else int(seeds[e])
        traj = rollout_mixed(env, student, teacher, seed, rng)
        for step in traj.steps:
            learner.push(step, stats)
        stats.episodes += 1
        stats.steps += len(traj)
    return learner, stats

