"""Interactive data collection with a performance-based filter.

The student drives the episode.  At every step the teacher is asked what
it would do; that answer is checked by restoring a snapshot of the current
state into a separate environment, applying the teacher's action and
letting the teacher finish the episode.  The pair is kept only if that
lookahead ends in success.

The lookahead never touches the environment the student is acting in, and
it draws randomness from its own seeded stream.  Whether queries are made
or not, the student's episode is the same.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import SnapshotError, make_env
from .student import Student, obs_by_class
from .teacher import Subgoals, Teacher
from .trajectory import Trajectory, read_trajectories, write_trajectories

log = logging.getLogger(__name__)


@dataclass
class FilterResult:
    action: np.ndarray
    teacher_logp: float
    accepted: bool
    success: bool
    lookahead_steps: int
    votes: int = 0


@dataclass
class QueryConfig:
    use_filter: bool = True
    votes_needed: int = 1  # m of k lookaheads must succeed
    votes_total: int = 1
    deterministic_teacher: bool = False

    def __post_init__(self):
        if not 1 <= self.votes_needed <= self.votes_total:
            raise ValueError("need 1 <= votes_needed <= votes_total")


def lookahead_seed(base_seed: int, query_index: int, vote: int = 0) -> int:
    """Seed of one lookahead rollout; distinct per query and per vote."""
    return int(np.random.SeedSequence([base_seed, query_index, vote]).generate_state(1)[0])


def simulate_teacher(env, teacher: Teacher, first_action, cache: Subgoals | None, seed: int,
                     deterministic: bool = False) -> tuple:
    """Apply ``first_action`` then roll the teacher to the end on ``env``.

    ``env`` is consumed.  Returns (success, steps taken).
    """
    env.reseed(seed)
    rng = np.random.default_rng(seed)
    res = env.step(first_action)
    steps = 1
    while not res.done:
        st = teacher.act(env, cache, rng, deterministic=deterministic)
        cache = st.subgoals
        res = env.step(st.actions)
        steps += 1
    return bool(env.success()), steps


def query_and_filter(env, teacher: Teacher, cache: Subgoals | None, rng: np.random.Generator,
                     base_seed: int, query_index: int, config: QueryConfig | None = None,
                     scratch=None):
    """Ask the teacher for an action at the current state and vet it.

    ``rng`` is the stream used to sample the queried action; lookaheads use
    seeds derived from ``(base_seed, query_index)``.  Returns
    ``(FilterResult, teacher subgoal cache after the query)``.
    """
    config = config or QueryConfig()
    step = teacher.act(env, cache, rng, deterministic=config.deterministic_teacher)
    token = env.snapshot()
    sim = scratch if scratch is not None else make_env(env.config)
    wins, steps = 0, 0
    for vote in range(config.votes_total):
        sim.restore(token)
        ok, n = simulate_teacher(sim, teacher, step.actions, step.subgoals.copy(),
                                 lookahead_seed(base_seed, query_index, vote),
                                 config.deterministic_teacher)
        wins += ok
        steps = n if vote == 0 else steps
    success = wins >= config.votes_needed
    accepted = success if config.use_filter else True
    return FilterResult(step.actions, step.logprob, accepted, success, steps, wins), step.subgoals


def collect_episode(env, student: Student, teacher: Teacher, seed: int, config: QueryConfig | None = None,
                    student_rng=None, query_rng=None, episode: int = 0, query: bool = True):
    """One student-driven episode with a teacher query at every step.

    Returns ``(Trajectory, [FilterResult, ...])``.  The trajectory holds
    every observation (needed to thread the student's recurrent state);
    rejected steps have ``accepted = False``.  With ``query=False`` no
    teacher is consulted and the trajectory carries only the student's
    own actions (used to check non-interference).
    """
    config = config or QueryConfig()
    student_rng = np.random.default_rng(seed) if student_rng is None else student_rng
    query_rng = np.random.default_rng([seed, 1]) if query_rng is None else query_rng
    _, obs = env.reset(seed=seed)
    hidden = student.initial_hidden()
    cache = None
    scratch = make_env(env.config)
    steps_obs = {c: [] for c in student.spec.classes}
    actions, tlogp, accepted, executed, rewards, results = [], [], [], [], [], []
    done, t = False, 0
    while not done:
        for c, x in obs_by_class(student.spec, obs).items():
            steps_obs[c].append(x[0])
        if query:
            try:
                fr, cache = query_and_filter(env, teacher, cache, query_rng, seed, t, config, scratch)
            except SnapshotError as exc:
                log.warning("query discarded at step %d: %s", t, exc)
                fr = None
        else:
            fr = None
        a, _, hidden = student.act(obs, hidden, student_rng)
        res = env.step(a)
        if fr is not None:
            results.append(fr)
            actions.append(fr.action)
            tlogp.append(fr.teacher_logp)
            accepted.append(fr.accepted)
        else:
            actions.append(np.zeros_like(a))
            tlogp.append(0.0)
            accepted.append(False)
        executed.append(a)
        rewards.append(res.team_reward)
        obs, done = res.observations, res.done
        t += 1
    tr = Trajectory(
        obs={c: np.asarray(v) for c, v in steps_obs.items()},
        actions=np.asarray(actions), teacher_logp=np.asarray(tlogp), accepted=np.asarray(accepted),
        episode=episode, partition="recent", executed=np.asarray(executed), rewards=np.asarray(rewards),
        success=bool(env.success()),
    )
    return tr, results


def teacher_demonstration(env, teacher: Teacher, seed: int, student_spec, episode: int = 0,
                          rng=None, deterministic=False) -> Trajectory:
    """A teacher-driven episode recorded in student observation space."""
    rng = np.random.default_rng([seed, 2]) if rng is None else rng
    _, obs = env.reset(seed=seed)
    cache = None
    steps_obs = {c: [] for c in student_spec.classes}
    actions, tlogp, rewards = [], [], []
    done = False
    while not done:
        for c, x in obs_by_class(student_spec, obs).items():
            steps_obs[c].append(x[0])
        st = teacher.act(env, cache, rng, deterministic=deterministic)
        cache = st.subgoals
        res = env.step(st.actions)
        actions.append(st.actions)
        tlogp.append(st.logprob)
        rewards.append(res.team_reward)
        obs, done = res.observations, res.done
    T = len(actions)
    return Trajectory(
        obs={c: np.asarray(v) for c, v in steps_obs.items()},
        actions=np.asarray(actions), teacher_logp=np.asarray(tlogp), accepted=np.ones(T, dtype=bool),
        episode=episode, partition="initial", executed=np.asarray(actions), rewards=np.asarray(rewards),
        success=bool(env.success()),
    )


def suboptimal_demo_rate(results) -> float:
    """Fraction of queries whose teacher lookahead did not succeed."""
    results = list(results)
    if not results:
        return 0.0
    return sum(not r.success for r in results) / len(results)


class AggregatedDataset:
    """Fixed initial demonstrations plus a FIFO ring of recent filtered episodes."""

    def __init__(self, initial, budget: int):
        initial = tuple(initial)
        if budget < len(initial):
            raise ValueError("budget smaller than the initial partition")
        for tr in initial:
            tr.partition = "initial"
            for arr in (tr.actions, tr.teacher_logp, tr.accepted, *tr.obs.values()):
                arr.flags.writeable = False
        self._initial = initial
        self.budget = budget
        self.recent = deque(maxlen=max(budget - len(initial), 0))
        self._next_episode = 0

    @property
    def initial(self) -> tuple:
        return self._initial

    @property
    def capacity(self) -> int:
        return self.recent.maxlen

    def __len__(self) -> int:
        return len(self._initial) + len(self.recent)

    def aggregate(self, tr: Trajectory) -> "AggregatedDataset":
        if self.capacity == 0:
            return self
        tr.partition = "recent"
        tr.episode = self._next_episode
        self._next_episode += 1
        self.recent.append(tr)
        return self

    def training_sample(self, rng: np.random.Generator) -> list:
        """All initial trajectories plus recent ones drawn until their accepted
        step count matches the initial partition's (1:1 by steps)."""
        out = list(self._initial)
        target = sum(tr.n_pairs for tr in self._initial)
        pool = [tr for tr in self.recent if tr.n_pairs > 0]
        if not pool:
            return out
        if target == 0:
            return out + pool
        got = 0
        for i in rng.permutation(len(pool)):
            if got >= target:
                break
            out.append(pool[i])
            got += pool[i].n_pairs
        return out

    def pairs(self) -> int:
        return sum(tr.n_pairs for tr in self._initial) + sum(tr.n_pairs for tr in self.recent)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        write_trajectories(tmp, list(self._initial) + list(self.recent))
        tmp.replace(path)
        (path.parent / (path.name + ".meta")).write_text(
            f"{self.budget} {self._next_episode}\n")

    @classmethod
    def load(cls, path) -> "AggregatedDataset":
        path = Path(path)
        budget, nxt = (int(x) for x in (path.parent / (path.name + ".meta")).read_text().split())
        trs = read_trajectories(path)
        ds = cls([t for t in trs if t.partition == "initial"], budget)
        for tr in trs:
            if tr.partition == "recent":
                ds.recent.append(tr)
        ds._next_episode = nxt
        return ds
