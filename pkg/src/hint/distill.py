"""Knowledge distillation from teacher demonstrations into the student.

The loss over a buffer of (observation, teacher action) pairs is

    L = mean_t [ log pi_T(a_t|o_t) - log pi_S(a_t|o_t) ]  -/+  alpha * mean_t H(pi_S(.|o_t))

where the teacher log-probabilities are constants recorded at query time.
With the default ``entropy_sign="bonus"`` the entropy term is subtracted,
so minimising L keeps the student's policy spread out; ``"penalty"``
adds it instead.

Trajectories are replayed with the recurrent state threaded through every
step.  Several trajectories are processed side by side for speed; accepted
steps enter the buffer in (step, trajectory) order and the buffer is
flushed with one Adam step exactly when it holds ``capacity`` pairs.
Whatever is left at the end of a pass is dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from .student import Student, forward, joint_logprob_and_entropy, zero_hidden

log = logging.getLogger(__name__)

ENTROPY_SIGNS = ("bonus", "penalty")


@dataclass
class DistillConfig:
    alpha: float = 0.01
    lr: float = 1e-4
    capacity: int = 200
    entropy_sign: str = "bonus"
    group: int = 16  # trajectories replayed side by side
    passes: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ValueError(f"entropy_sign must be one of {ENTROPY_SIGNS}")
        if self.group < 1:
            raise ValueError("group must be at least 1")


@dataclass
class DistillStats:
    updates: int = 0
    pairs_seen: int = 0
    pairs_dropped: int = 0
    skipped: int = 0
    losses: list = field(default_factory=list)


def kd_loss(teacher_logp, student_logp, entropy, alpha: float, entropy_sign: str = "bonus"):
    """Distillation loss for one buffer.

    ``teacher_logp`` is treated as a constant even if a Tensor is passed.
    ``student_logp`` and ``entropy`` may be Tensors (for training) or arrays.
    """
    tl = np.asarray(teacher_logp.data if isinstance(teacher_logp, ng.Tensor) else teacher_logp,
                    dtype=np.float64).reshape(-1)
    sl = ng.reshape(ng.as_tensor(student_logp), (-1,))
    ent = ng.reshape(ng.as_tensor(entropy), (-1,))
    n = tl.size
    if n == 0:
        raise ValueError("kd_loss needs a non-empty batch")
    if sl.shape[0] != n or ent.shape[0] != n:
        raise ValueError("teacher log-probs, student log-probs and entropies differ in length")
    if not (np.all(np.isfinite(tl)) and np.all(np.isfinite(sl.data))):
        raise ng.NonFiniteError("kd_loss got non-finite log-probabilities")
    if entropy_sign not in ENTROPY_SIGNS:
        raise ValueError(f"entropy_sign must be one of {ENTROPY_SIGNS}")
    gap = ng.mean(ng.sub(ng.Tensor(tl), sl))
    reg = ng.mul(ng.mean(ent), alpha if entropy_sign == "penalty" else -alpha)
    return ng.add(gap, reg, name="kd_loss")


def _fresh_view(params: ng.ParamSet) -> ng.ParamView:
    # copies, so graphs built before an in-place Adam step keep their weights
    return ng.ParamView({k: ng.Tensor(v.copy(), requires_grad=True, name=k)
                         for k, v in params.entries.items()})


def _stack_step(group, t, spec):
    B = len(group)
    obs = {}
    for c, n, d in zip(spec.classes, spec.counts, spec.obs_dims):
        x = np.zeros((B, n, d))
        for b, tr in enumerate(group):
            if t < len(tr):
                x[b] = tr.obs[c][t]
        obs[c] = x
    acts = np.zeros((B, spec.n_agents), dtype=np.int64)
    for b, tr in enumerate(group):
        if t < len(tr):
            acts[b] = tr.actions[t]
    return obs, acts


def kd_update(student: Student, trajectories, config: DistillConfig, opt: ng.OptState | None = None,
              rng: np.random.Generator | None = None, max_updates: int | None = None):
    """One or more passes of buffered distillation over ``trajectories``.

    Updates ``student.params`` in place.  ``rng`` shuffles trajectory order
    (steps inside a trajectory keep their order).  Returns
    ``(opt_state, DistillStats)``.
    """
    trajectories = [tr for tr in trajectories]
    if not trajectories or sum(len(tr) for tr in trajectories) == 0:
        raise ValueError("kd_update needs a non-empty dataset")
    spec = student.spec
    params = student.params
    opt = ng.OptState.for_params(params) if opt is None else opt
    stats = DistillStats()
    cap = config.capacity

    for _ in range(config.passes):
        order = list(range(len(trajectories)))
        if rng is not None:
            rng.shuffle(order)
        views = [_fresh_view(params)]
        chunks = []  # (logp Tensor, entropy Tensor, teacher logp array, rows)
        filled = 0
        for g0 in range(0, len(order), config.group):
            group = [trajectories[i] for i in order[g0:g0 + config.group]]
            hidden = zero_hidden(spec, len(group))
            T = max(len(tr) for tr in group)
            for t in range(T):
                obs, acts = _stack_step(group, t, spec)
                logits, hidden, _ = forward(views[-1], spec, obs, hidden, student.comm_enabled)
                rows = [b for b, tr in enumerate(group) if t < len(tr) and tr.accepted[t]]
                if not rows:
                    continue
                lp, ent = joint_logprob_and_entropy(logits, acts, spec)
                tl = np.array([tr.teacher_logp[t] if t < len(tr) else 0.0 for tr in group])
                stats.pairs_seen += len(rows)
                while rows:
                    take = rows[:cap - filled]
                    rows = rows[len(take):]
                    chunks.append((lp, ent, tl, take))
                    filled += len(take)
                    if filled == cap:
                        _flush(chunks, views, params, opt, config, stats)
                        chunks, filled = [], 0
                        views = [views[-1], _fresh_view(params)]
                        hidden = {c: ng.Tensor(h.data) for c, h in hidden.items()}
                        if max_updates is not None and stats.updates >= max_updates:
                            return opt, stats
        stats.pairs_dropped += filled
    return opt, stats


def _flush(chunks, views, params, opt, config, stats) -> None:
    idx = lambda rows: np.asarray(rows, dtype=np.int64)
    sl = ng.concat([ng.take(lp, idx(r)) for lp, _, _, r in chunks], axis=0)
    ent = ng.concat([ng.take(e, idx(r)) for _, e, _, r in chunks], axis=0)
    tl = np.concatenate([t[idx(r)] for _, _, t, r in chunks])
    for view in views:
        for p in view.values():
            p.grad = None
    try:
        loss = kd_loss(tl, sl, ent, config.alpha, config.entropy_sign)
        loss.backward()
    except ng.NonFiniteError as exc:
        log.warning("distillation step skipped: %s", exc)
        stats.skipped += 1
        return
    grads = {}
    for view in views:
        for k, p in view.items():
            if p.grad is not None:
                grads[k] = grads[k] + p.grad if k in grads else p.grad.copy()
    ng.adam_step(params, grads, opt, config.lr)
    stats.updates += 1
    stats.losses.append(float(loss.data))


def behavior_clone(student: Student, dataset, iterations: int, config: DistillConfig,
                   opt: ng.OptState | None = None, rng: np.random.Generator | None = None):
    """Distillation on a fixed set of teacher demonstrations.

    Runs passes of :func:`kd_update` until exactly ``iterations`` updates
    have been taken.
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    stats = DistillStats()
    one_pass = DistillConfig(**{**config.__dict__, "passes": 1})
    while stats.updates < iterations:
        opt, s = kd_update(student, dataset, one_pass, opt, rng, max_updates=iterations - stats.updates)
        if s.updates == 0:
            raise ValueError("dataset holds fewer accepted pairs than one buffer")
        stats.updates += s.updates
        stats.pairs_seen += s.pairs_seen
        stats.pairs_dropped += s.pairs_dropped
        stats.skipped += s.skipped
        stats.losses.extend(s.losses)
    return opt, stats


def mean_entropy(student: Student, trajectories) -> float:
    """Average joint policy entropy over every step of ``trajectories``."""
    total, count = 0.0, 0
    with ng.no_grad():
        for tr in trajectories:
            hidden = zero_hidden(student.spec, 1)
            for t in range(len(tr)):
                obs = {c: o[t][None] for c, o in tr.obs.items()}
                logits, hidden, _ = forward(student.params.tensors(), student.spec, obs, hidden,
                                            student.comm_enabled)
                for l in logits.values():
                    lp = ng.log_softmax(l).data
                    total += float(-(np.exp(lp) * lp).sum())
                count += 1
    return total / max(count, 1)


def dataset_loss(student: Student, trajectories, alpha: float = 0.0, entropy_sign: str = "bonus") -> float:
    """kd_loss over every accepted pair of ``trajectories`` without updating."""
    tl, sl, ent = [], [], []
    with ng.no_grad():
        for tr in trajectories:
            hidden = zero_hidden(student.spec, 1)
            for t in range(len(tr)):
                obs = {c: o[t][None] for c, o in tr.obs.items()}
                logits, hidden, _ = forward(student.params.tensors(), student.spec, obs, hidden,
                                            student.comm_enabled)
                if tr.accepted[t]:
                    lp, e = joint_logprob_and_entropy(logits, tr.actions[t][None], student.spec)
                    tl.append(tr.teacher_logp[t])
                    sl.append(lp.data[0])
                    ent.append(e.data[0])
        return float(kd_loss(np.array(tl), np.array(sl), np.array(ent), alpha, entropy_sign).data)


WARM_START_FRACTIONS = (0.25, 0.5)


def warm_start(student: Student, teacher, env_config, budget: int, fraction: float, iterations: int,
               config: DistillConfig, seed: int = 0):
    """Behavior-clone ``student`` on ``fraction * budget`` teacher-only episodes.

    Returns ``(opt_state, stats, demonstrations)``.
    """
    from .dagger import teacher_demonstration
    from .envs import make_env

    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = int(round(fraction * budget))
    if n < 1:
        raise ValueError("warm start needs at least one demonstration")
    env = make_env(env_config)
    rng = np.random.default_rng([seed, 7])
    demos = [teacher_demonstration(env, teacher, int(rng.integers(2**31)), student.spec, episode=i, rng=rng)
             for i in range(n)]
    opt, stats = behavior_clone(student, demos, iterations, config, rng=np.random.default_rng(seed))
    return opt, stats, demos
