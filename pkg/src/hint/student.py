"""Decentralized student policies with one round of attention messaging.

Per agent: flattened local observation -> class encoder -> gated recurrent
cell -> attention over teammates' hidden states -> class decoder -> action
logits.  Agents of the same class share weights.  The joint policy is the
product of the per-agent policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .envs import make_env

COMM_MODES = ("none", "homogeneous", "heterogeneous")


@dataclass(frozen=True)
class StudentSpec:
    classes: tuple
    counts: tuple
    obs_dims: tuple
    n_actions: tuple
    hidden: int = 32
    message: int = 16
    comm: str = "heterogeneous"

    def __post_init__(self):
        if self.comm not in COMM_MODES:
            raise ValueError(f"comm mode must be one of {COMM_MODES}")

    @property
    def n_agents(self) -> int:
        return sum(self.counts)

    def dims(self) -> dict:
        return dict(zip(self.classes, self.obs_dims))

    def actions(self) -> dict:
        return dict(zip(self.classes, self.n_actions))


def spec_for(env_config, comm="heterogeneous", hidden=32, message=16) -> StudentSpec:
    env = make_env(env_config)
    _, obs = env.reset(seed=0)
    dims = {}
    for o in obs:
        dims.setdefault(o.agent_class, o.flat().size)
    classes = env.classes
    return StudentSpec(
        classes=tuple(classes),
        counts=(env_config.n_type1, env_config.n_type2),
        obs_dims=tuple(dims[c] for c in classes),
        n_actions=tuple(env.n_actions(c) for c in classes),
        hidden=hidden, message=message, comm=comm,
    )


def init_student(spec: StudentSpec, seed: int = 0) -> ng.ParamSet:
    rng = np.random.default_rng(seed)
    ps = ng.ParamSet("student")
    hd, md = spec.hidden, spec.message
    for c, d, na in zip(spec.classes, spec.obs_dims, spec.n_actions):
        ng.init_mlp(ps, f"enc.{c}", [d, hd, hd], rng)
        ng.init_gru(ps, f"gru.{c}", hd, hd, rng)
        ng.init_mlp(ps, f"dec.{c}", [hd + md, hd, na], rng)
    b = math.sqrt(1.0 / hd)
    if spec.comm == "heterogeneous":
        for dst in spec.classes:
            ps.add(f"att.q.{dst}", rng.uniform(-b, b, (hd, md)))
            for src in spec.classes:
                ps.add(f"att.k.{src}.{dst}", rng.uniform(-b, b, (hd, md)))
                ps.add(f"att.v.{src}.{dst}", rng.uniform(-b, b, (hd, md)))
    elif spec.comm == "homogeneous":
        for name in ("q", "k", "v"):
            ps.add(f"att.{name}", rng.uniform(-b, b, (hd, md)))
    return ps


def zero_hidden(spec: StudentSpec, batch: int = 1) -> dict:
    return {c: np.zeros((batch, n, spec.hidden)) for c, n in zip(spec.classes, spec.counts)}


def obs_by_class(spec: StudentSpec, observations) -> dict:
    """List of AgentObservation (agent order) -> {class: (1, n_c, d_c)}."""
    out = {c: [] for c in spec.classes}
    for o in observations:
        out[o.agent_class].append(o.flat())
    return {c: np.asarray(v)[None] for c, v in out.items()}


def forward(P, spec: StudentSpec, obs: dict, hidden: dict, comm_enabled=True):
    """One decision step for a batch of teams.

    ``obs[c]`` is (B, n_c, d_c); ``hidden[c]`` is (B, n_c, H) array or Tensor.
    Returns ``(logits, new_hidden, attention_weights)`` keyed by class.
    """
    h_new = {}
    for c in spec.classes:
        x = ng.mlp(obs[c], P, f"enc.{c}", 2, final_act=True)
        h_new[c] = ng.gru_cell(x, ng.as_tensor(hidden[c]), P, f"gru.{c}", name=f"gru.{c}")
    B = obs[spec.classes[0]].shape[0]
    n = spec.n_agents
    messages, weights = {}, {}
    if spec.comm == "none" or not comm_enabled or n == 1:
        for c, cnt in zip(spec.classes, spec.counts):
            messages[c] = ng.Tensor(np.zeros((B, cnt, spec.message)))
    else:
        offsets = np.cumsum((0,) + spec.counts)
        for ci, c in enumerate(spec.classes):
            if spec.comm == "heterogeneous":
                q = ng.matmul(h_new[c], P[f"att.q.{c}"])
                k = ng.concat([ng.matmul(h_new[s], P[f"att.k.{s}.{c}"]) for s in spec.classes], axis=1)
                v = ng.concat([ng.matmul(h_new[s], P[f"att.v.{s}.{c}"]) for s in spec.classes], axis=1)
            else:
                q = ng.matmul(h_new[c], P["att.q"])
                k = ng.concat([ng.matmul(h_new[s], P["att.k"]) for s in spec.classes], axis=1)
                v = ng.concat([ng.matmul(h_new[s], P["att.v"]) for s in spec.classes], axis=1)
            mask = np.ones((spec.counts[ci], n), dtype=bool)
            for a in range(spec.counts[ci]):
                mask[a, offsets[ci] + a] = False
            messages[c], weights[c] = ng.attention(q, k, v, mask=mask, name=f"att.{c}")
    logits = {}
    for c in spec.classes:
        z = ng.concat([h_new[c], messages[c]], axis=-1)
        logits[c] = ng.mlp(z, P, f"dec.{c}", 2)
    return logits, h_new, weights


def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Student:
    """Convenience wrapper pairing a spec with its parameters."""

    def __init__(self, spec: StudentSpec, params: ng.ParamSet, comm_enabled=True):
        self.spec = spec
        self.params = params
        self.comm_enabled = comm_enabled

    def initial_hidden(self, batch: int = 1) -> dict:
        return zero_hidden(self.spec, batch)

    def distributions(self, observations, hidden):
        """Per-class log-probabilities (n_c, A_c) and the next hidden state."""
        obs = obs_by_class(self.spec, observations)
        with ng.no_grad():
            logits, h_new, _ = forward(self.params.tensors(), self.spec, obs, hidden, self.comm_enabled)
        logp = {c: _log_softmax_np(logits[c].data[0]) for c in self.spec.classes}
        return logp, {c: h.data for c, h in h_new.items()}

    def act(self, observations, hidden, rng, deterministic=False):
        """Sample a joint action.  Returns (actions, per-agent log-probs, new hidden)."""
        logp, h_new = self.distributions(observations, hidden)
        actions = np.zeros(self.spec.n_agents, dtype=np.int64)
        lps = np.zeros(self.spec.n_agents)
        i = 0
        for c in self.spec.classes:
            for row in logp[c]:
                p = np.exp(row)
                a = int(np.argmax(row)) if deterministic else int(rng.choice(len(row), p=p / p.sum()))
                actions[i] = a
                lps[i] = row[a]
                i += 1
        return actions, lps, h_new

    def logprob(self, obs_seq, act_seq) -> np.ndarray:
        """Joint log pi_S(a_t | o_t) along a sequence, hidden state threaded from zeros."""
        if len(obs_seq) != len(act_seq):
            raise ValueError(f"sequence length mismatch: {len(obs_seq)} observations, {len(act_seq)} actions")
        hidden = self.initial_hidden()
        out = np.zeros(len(obs_seq))
        for t, (o, a) in enumerate(zip(obs_seq, act_seq)):
            logp, hidden = self.distributions(o, hidden)
            out[t] = sum(logp[c][j, a[i]] for c, j, i in _agent_slots(self.spec))
        return out

    def entropy(self, observations, hidden) -> float:
        logp, _ = self.distributions(observations, hidden)
        return float(sum(-(np.exp(l) * l).sum() for l in logp.values()))


def _agent_slots(spec: StudentSpec):
    i = 0
    for c, n in zip(spec.classes, spec.counts):
        for j in range(n):
            yield c, j, i
            i += 1


def student_act(observations, hidden, student: Student, rng, deterministic=False):
    return student.act(observations, hidden, rng, deterministic)


def student_logprob(obs_seq, act_seq, student: Student) -> np.ndarray:
    return student.logprob(obs_seq, act_seq)


def student_entropy(observations, hidden, student: Student) -> float:
    return student.entropy(observations, hidden)


def joint_logprob_and_entropy(logits: dict, actions: np.ndarray, spec: StudentSpec):
    """Graph pieces for training: per-row joint log-prob and joint entropy, shape (B,).

    ``actions`` is (B, n_agents) in agent order.
    """
    lp_total, ent_total = None, None
    offset = 0
    for c, cnt in zip(spec.classes, spec.counts):
        l = logits[c]  # (B, n_c, A)
        B, _, A = l.shape
        logp = ng.log_softmax(l)
        flat = ng.reshape(logp, (B * cnt, A))
        idx = np.asarray(actions[:, offset:offset + cnt]).reshape(-1)
        chosen = ng.reshape(ng.pick(flat, idx), (B, cnt))
        lp = ng.total(chosen, axis=1)
        ent = ng.mul(ng.total(ng.mul(ng.exp(logp), logp), axis=(1, 2)), -1.0)
        lp_total = lp if lp_total is None else ng.add(lp_total, lp)
        ent_total = ent if ent_total is None else ng.add(ent_total, ent)
        offset += cnt
    return lp_total, ent_total
