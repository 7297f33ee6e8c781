import math

import numpy as np
import pytest

from hint import numgrad as ng
from hint.envs import make_env, preset
from hint.student import (Student, forward, init_student, joint_logprob_and_entropy, obs_by_class, spec_for,
                          zero_hidden)


def make_student(name="fc-medium", comm="heterogeneous", seed=0, comm_enabled=True):
    cfg = preset(name)
    spec = spec_for(cfg, comm)
    return cfg, Student(spec, init_student(spec, seed), comm_enabled)


def uniform(student):
    for c in student.spec.classes:
        student.params.entries[f"dec.{c}.w1"][:] = 0.0
        student.params.entries[f"dec.{c}.b1"][:] = 0.0
    return student


def random_obs(spec, rng, batch=1):
    return {c: rng.normal(size=(batch, n, d)) for c, n, d in zip(spec.classes, spec.counts, spec.obs_dims)}


def episode(cfg, student, seed=0, steps=15):
    env = make_env(cfg)
    obs_list, act_list, lp_list = [], [], []
    _, obs = env.reset(seed=seed)
    hidden = student.initial_hidden()
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        a, lps, hidden = student.act(obs, hidden, rng)
        obs_list.append(obs)
        act_list.append(a)
        lp_list.append(lps)
        res = env.step(a)
        obs = res.observations
        if res.done:
            break
    return obs_list, act_list, lp_list


def test_joint_logprob_is_sum_of_agent_logprobs():
    cfg, st = make_student()
    env = make_env(cfg)
    _, obs = env.reset(seed=0)
    logp, _ = st.distributions(obs, st.initial_hidden())
    a, lps, _ = st.act(obs, st.initial_hidden(), np.random.default_rng(0))
    per_agent = [logp[c][j, a[i]] for i, (c, j) in
                 enumerate((c, j) for c, n in zip(st.spec.classes, st.spec.counts) for j in range(n))]
    np.testing.assert_array_equal(lps, per_agent)
    assert st.logprob([obs], [a])[0] == sum(per_agent)


def test_uniform_single_agent_logprob_and_entropy():
    spec = spec_for(preset("fc-easy"))
    spec = type(spec)(spec.classes[:1], (1,), spec.obs_dims[:1], (5,), comm="none")
    st = uniform(Student(spec, init_student(spec, 0)))
    obs = random_obs(spec, np.random.default_rng(0))
    logits, _, _ = forward(st.params.tensors(), spec, obs, zero_hidden(spec))
    lp, ent = joint_logprob_and_entropy(logits, np.array([[3]]), spec)
    assert lp.data[0] == pytest.approx(-math.log(5), abs=1e-12)
    assert ent.data[0] == pytest.approx(math.log(5), abs=1e-12)


def test_two_uniform_agents_logprob_and_entropy():
    cfg, st = make_student("marine-easy")
    spec = type(st.spec)(st.spec.classes, (1, 1), st.spec.obs_dims, st.spec.n_actions)
    st = uniform(Student(spec, init_student(spec, 0)))
    obs = random_obs(spec, np.random.default_rng(1))
    logits, _, _ = forward(st.params.tensors(), spec, obs, zero_hidden(spec))
    lp, ent = joint_logprob_and_entropy(logits, np.array([[0, 4]]), spec)
    assert spec.n_actions == (5, 5)
    assert lp.data[0] == pytest.approx(-2 * math.log(5), abs=1e-12)
    assert ent.data[0] == pytest.approx(2 * math.log(5), abs=1e-12)


def test_deterministic_policy_has_zero_entropy():
    cfg, st = make_student("marine-easy")
    for c in st.spec.classes:
        st.params.entries[f"dec.{c}.w1"][:] = 0.0
        st.params.entries[f"dec.{c}.b1"][:] = 0.0
        st.params.entries[f"dec.{c}.b1"][0] = 800.0
    _, obs = make_env(cfg).reset(seed=0)
    assert st.entropy(obs, st.initial_hidden()) == pytest.approx(0.0, abs=1e-12)


def test_entropy_bounds_and_normalisation():
    cfg, st = make_student("fc-hard", seed=3)
    env = make_env(cfg)
    _, obs = env.reset(seed=2)
    logp, _ = st.distributions(obs, st.initial_hidden())
    for l in logp.values():
        np.testing.assert_allclose(np.exp(l).sum(axis=1), 1.0, atol=1e-12)
    h = st.entropy(obs, st.initial_hidden())
    assert 0.0 <= h <= sum(n * math.log(a) for n, a in zip(st.spec.counts, st.spec.n_actions))


@pytest.mark.parametrize("comm", ["heterogeneous", "homogeneous"])
def test_attention_weights_sum_to_one(comm):
    cfg, st = make_student("fc-medium", comm)
    obs = random_obs(st.spec, np.random.default_rng(0), batch=3)
    _, _, weights = forward(st.params.tensors(), st.spec, obs, zero_hidden(st.spec, 3))
    offsets = dict(zip(st.spec.classes, np.cumsum((0,) + st.spec.counts)))
    for c, w in weights.items():
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
        # an agent does not attend to itself
        offset = offsets[c]
        for a in range(w.shape[1]):
            assert np.all(w.data[:, a, offset + a] == 0.0)


@pytest.mark.parametrize("comm,enabled", [("none", True), ("heterogeneous", False)])
def test_decentralised_without_communication(comm, enabled):
    cfg, st = make_student("fc-medium", comm, comm_enabled=enabled)
    rng = np.random.default_rng(0)
    obs = random_obs(st.spec, rng)
    hidden = {c: rng.normal(size=h.shape) for c, h in zero_hidden(st.spec).items()}
    base, _, _ = forward(st.params.tensors(), st.spec, obs, hidden, enabled)
    other = {c: o.copy() for c, o in obs.items()}
    other["perception"][0, 1] += rng.normal(size=other["perception"].shape[-1]) * 3.0
    pert, _, _ = forward(st.params.tensors(), st.spec, other, hidden, enabled)
    np.testing.assert_array_equal(base["perception"].data[0, 0], pert["perception"].data[0, 0])
    np.testing.assert_array_equal(base["action"].data, pert["action"].data)
    assert not np.array_equal(base["perception"].data[0, 1], pert["perception"].data[0, 1])


def test_communication_couples_agents():
    cfg, st = make_student("fc-medium", "heterogeneous")
    rng = np.random.default_rng(0)
    obs = random_obs(st.spec, rng)
    base, _, _ = forward(st.params.tensors(), st.spec, obs, zero_hidden(st.spec))
    obs["perception"][0, 1] += 3.0
    pert, _, _ = forward(st.params.tensors(), st.spec, obs, zero_hidden(st.spec))
    assert not np.allclose(base["action"].data, pert["action"].data)


@pytest.mark.parametrize("comm", ["none", "homogeneous", "heterogeneous"])
def test_permuting_same_class_agents_permutes_outputs(comm):
    cfg, st = make_student("fc-medium", comm, seed=4)
    rng = np.random.default_rng(1)
    obs = random_obs(st.spec, rng)
    hidden = {c: rng.normal(size=h.shape) * 0.5 for c, h in zero_hidden(st.spec).items()}
    perm = [2, 0, 1]
    obs_p = dict(obs, action=obs["action"][:, perm])
    hid_p = dict(hidden, action=hidden["action"][:, perm])
    a, ha, _ = forward(st.params.tensors(), st.spec, obs, hidden)
    b, hb, _ = forward(st.params.tensors(), st.spec, obs_p, hid_p)
    np.testing.assert_allclose(b["action"].data, a["action"].data[:, perm], atol=1e-12)
    np.testing.assert_allclose(hb["action"].data, ha["action"].data[:, perm], atol=1e-12)
    np.testing.assert_allclose(b["perception"].data, a["perception"].data, atol=1e-12)


def test_replay_reproduces_recorded_logprobs():
    cfg, st = make_student("marine-medium", seed=2)
    obs, acts, lps = episode(cfg, st, seed=3, steps=25)
    replay = st.logprob(obs, acts)
    np.testing.assert_allclose(replay, [l.sum() for l in lps], atol=1e-12)
    np.testing.assert_array_equal(replay, st.logprob(obs, acts))


def test_logprob_length_mismatch_rejected():
    cfg, st = make_student("marine-easy")
    obs, acts, _ = episode(cfg, st, steps=4)
    with pytest.raises(ValueError, match="length"):
        st.logprob(obs, acts[:-1])


def test_hidden_state_carries_memory():
    cfg, st = make_student("marine-easy", seed=1)
    env = make_env(cfg)
    _, obs = env.reset(seed=0)
    rng = np.random.default_rng(0)
    h0 = st.initial_hidden()
    _, _, h1 = st.act(obs, h0, rng)
    l0, _ = st.distributions(obs, h0)
    l1, _ = st.distributions(obs, h1)
    assert not np.allclose(l0["routing"], l1["routing"])


def test_classes_share_weights():
    cfg, st = make_student("fc-medium")
    names = st.params.names()
    assert not any(n.startswith("enc.action.1") for n in names)
    assert {n.split(".")[1] for n in names if n.startswith("enc.")} == {"perception", "action"}


def test_non_finite_observation_rejected():
    cfg, st = make_student("marine-easy")
    obs = random_obs(st.spec, np.random.default_rng(0))
    obs["routing"][0, 0, 0] = np.inf
    with pytest.raises(ng.NonFiniteError):
        forward(st.params.tensors(), st.spec, obs, zero_hidden(st.spec))


def test_bad_comm_mode_rejected():
    with pytest.raises(ValueError):
        spec_for(preset("fc-easy"), comm="gossip")


def test_obs_by_class_shapes():
    cfg, st = make_student("fc-hard")
    _, obs = make_env(cfg).reset(seed=0)
    grouped = obs_by_class(st.spec, obs)
    assert {c: g.shape for c, g in grouped.items()} == {
        c: (1, n, d) for c, n, d in zip(st.spec.classes, st.spec.counts, st.spec.obs_dims)}
