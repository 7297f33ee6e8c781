import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ChainMDP, vtrace_sum_oracle
from hint import numgrad as ng
from hint.envs import make_env, preset
from hint.pseudorl import (STUDENT, TEACHER, PseudoConfig, PseudoLearner, PseudoStats, policy_objective,
                           pseudo_update, rollout_mixed, teacher_logp_graph, value_loss, vtrace_targets)
from hint.student import Student, init_student, spec_for
from hint.teacher import Teacher, init_teacher, value_input_width, value_inputs


def n_step_return(rewards, discounts, bootstrap):
    out = np.zeros(len(rewards))
    for t in range(len(rewards)):
        total, scale = 0.0, 1.0
        for j in range(t, len(rewards)):
            total += scale * rewards[j]
            scale *= discounts[j]
        out[t] = total + scale * bootstrap
    return out


# ---------------------------------------------------------------- V-trace

@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1), st.floats(0.5, 0.99))
def test_on_policy_targets_are_n_step_returns(n, seed, gamma):
    rng = np.random.default_rng(seed)
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    discounts = gamma * (rng.random(n) > 0.1)
    boot = float(rng.normal())
    vt = vtrace_targets(values, boot, rewards, discounts, np.zeros(n))
    np.testing.assert_allclose(vt.vs, n_step_return(rewards, discounts, boot), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(vt.rhos, 1.0)
    np.testing.assert_array_equal(vt.cs, 1.0)


def test_truncated_weights():
    vt = vtrace_targets(np.zeros(3), 0.0, np.ones(3), np.full(3, 0.9), np.log([2.5, 0.3, 1.0]))
    np.testing.assert_allclose(vt.rhos, [1.0, 0.3, 1.0])
    np.testing.assert_allclose(vt.cs, [1.0, 0.3, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=30))
def test_weights_stay_in_unit_interval(log_rhos):
    n = len(log_rhos)
    vt = vtrace_targets(np.zeros(n), 1.0, np.ones(n), np.full(n, 0.9), np.array(log_rhos))
    assert np.all(vt.rhos > 0) and np.all(vt.rhos <= 1)
    assert np.all(vt.cs > 0) and np.all(vt.cs <= 1)


def test_impossible_behavior_action_rejected():
    with pytest.raises(ValueError):
        vtrace_targets(np.zeros(2), 0.0, np.zeros(2), np.full(2, 0.9), np.array([0.0, np.inf]))
    with pytest.raises(ValueError):
        vtrace_targets(np.zeros(2), 0.0, np.zeros(2), np.full(2, 0.9), np.array([np.nan, 0.0]))


def test_chain_mdp_matches_summation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        mdp = ChainMDP(rng)
        n = int(rng.integers(1, 12))
        states, actions = mdp.sample(rng, int(rng.integers(3)), n)
        rewards = [mdp.reward[s, a] for s, a in zip(states, actions)]
        log_rhos = [math.log(mdp.pi[s, a]) - math.log(mdp.mu[s, a]) for s, a in zip(states, actions)]
        vt = vtrace_targets(mdp.V[states[:-1]], mdp.V[states[-1]], rewards, np.full(n, mdp.gamma), log_rhos)
        oracle = vtrace_sum_oracle(mdp.V, states, actions, rewards, mdp.pi, mdp.mu, mdp.gamma)
        np.testing.assert_allclose(vt.vs, oracle, rtol=0, atol=1e-10)


def vtrace_operator(mdp, V, n):
    """Exact expectation of v_0 under the behavior policy from every start state."""
    out = np.zeros(3)
    for s0 in range(3):
        for acts in itertools.product((0, 1), repeat=n):
            states, p = [s0], 1.0
            for a in acts:
                p *= mdp.mu[states[-1], a]
                states.append(mdp.next_state(states[-1], a))
            rewards = [mdp.reward[s, a] for s, a in zip(states, acts)]
            log_rhos = [math.log(mdp.pi[s, a] / mdp.mu[s, a]) for s, a in zip(states, acts)]
            vt = vtrace_targets(V[states[:-1]], V[states[-1]], rewards, np.full(n, mdp.gamma), log_rhos)
            out[s0] += p * vt.vs[0]
    return out


@pytest.mark.parametrize("seed", range(3))
def test_vtrace_operator_contracts_on_chain_mdp(seed):
    mdp = ChainMDP(np.random.default_rng(seed))
    V = mdp.V.copy()
    gaps = [np.inf]
    while gaps[-1] > 1e-10 and len(gaps) < 3000:
        nxt = vtrace_operator(mdp, V, 4)
        gaps.append(np.abs(nxt - V).max())
        V = nxt
    assert gaps[-1] <= 1e-10
    # sup-norm step sizes never grow after the first application
    assert all(b <= a + 1e-13 for a, b in zip(gaps[2:], gaps[3:]))


# ---------------------------------------------------------------- value loss

def constant_value(classes, c):
    ps = ng.ParamSet("teacher_value")
    ng.init_mlp(ps, "v", [value_input_width(classes), 4, 1], np.random.default_rng(0))
    ps.entries["v.w1"][:] = 0.0
    ps.entries["v.b1"][:] = c
    return ps


def test_value_loss_single_step():
    classes = ("routing", "logistic")
    vin = np.zeros((1, value_input_width(classes)))
    assert value_loss(constant_value(classes, 1.0).tensors(), vin, [3.0]).data == pytest.approx(4.0)
    assert value_loss(constant_value(classes, 3.0).tensors(), vin, [3.0]).data == 0.0


def test_value_loss_gradient():
    classes = ("routing", "logistic")
    rng = np.random.default_rng(0)
    ps = ng.ParamSet("teacher_value")
    ng.init_mlp(ps, "v", [value_input_width(classes), 5, 1], rng)
    vin = rng.normal(size=(6, value_input_width(classes)))
    targets = rng.normal(size=6)
    assert ng.grad_check(lambda P: value_loss(P, vin, targets), ps, h=1e-3, order=4) < 1e-4


# ---------------------------------------------------------------- policy objective

def tabular_objective(states, actions, mask, mu, adv, ratio_clip=None):
    def graph(P):
        logp = ng.log_softmax(P["logits"])
        lt = ng.pick(ng.take(logp, np.asarray(states)), np.asarray(actions))
        return policy_objective(lt, mask, mu, adv, ratio_clip)
    return graph


def test_policy_gradient_matches_hand_summed_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mdp = ChainMDP(rng)
        logits = rng.normal(size=(3, 2))
        pi = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        n = 12
        states, actions = mdp.sample(rng, 1, n)
        states = states[:-1]
        mask = rng.random(n) < 0.5
        mu = np.array([math.log(mdp.mu[s, a]) for s, a in zip(states, actions)])
        adv = rng.normal(size=n)
        ps = ng.ParamSet("teacher_high", {"logits": logits})
        g = ng.evaluate_with_gradients(tabular_objective(states, actions, mask, mu, adv), ps)
        oracle = np.zeros((3, 2))
        value = 0.0
        for t in range(n):
            s, a = states[t], actions[t]
            w = pi[s, a] / mdp.mu[s, a] if mask[t] else 1.0
            value += w * adv[t] * math.log(pi[s, a]) / n
            oracle[s] += w * adv[t] * (np.eye(2)[a] - pi[s]) / n
        assert g.value == pytest.approx(value, abs=1e-10)
        np.testing.assert_allclose(g.grads["logits"], oracle, rtol=0, atol=1e-10)


def test_all_teacher_batch_is_plain_policy_gradient():
    lt = ng.Tensor(np.log([0.2, 0.5, 0.7]), requires_grad=True)
    adv = np.array([1.0, -2.0, 0.5])
    out = policy_objective(lt, np.zeros(3, dtype=bool), np.zeros(3), adv)
    assert out.data == pytest.approx(np.mean(lt.data * adv), abs=1e-15)
    out.backward()
    np.testing.assert_allclose(lt.grad, adv / 3)


def test_ratio_clip_knob():
    lt = ng.Tensor(np.log([0.9]))
    assert policy_objective(lt, [True], np.log([0.1]), [1.0]).data == pytest.approx(9 * math.log(0.9))
    assert policy_objective(lt, [True], np.log([0.1]), [1.0], ratio_clip=1.0).data == pytest.approx(math.log(0.9))


# ---------------------------------------------------------------- mixed rollouts

@pytest.fixture(scope="module")
def fc_setup():
    cfg = preset("fc-easy")
    spec = spec_for(cfg)
    teacher = Teacher(cfg, init_teacher(make_env(cfg), 0))
    return cfg, Student(spec, init_student(spec, 0)), teacher


def test_switch_point_splits_tags(fc_setup):
    cfg, student, teacher = fc_setup
    env = make_env(cfg)
    rng = np.random.default_rng(0)
    for switch in (1, 3, 7):
        tr = rollout_mixed(env, student, teacher, 5, rng, switch=switch)
        tags = [s.tag for s in tr.steps]
        assert tags == [STUDENT] * min(switch, len(tags)) + [TEACHER] * (len(tags) - min(switch, len(tags)))
    tr = rollout_mixed(env, student, teacher, 5, rng, switch=cfg.max_steps)
    assert all(s.tag == STUDENT for s in tr.steps)
    assert tr.steps[-1].done


def test_switch_point_uniform_in_range(fc_setup):
    cfg, student, teacher = fc_setup
    small = Teacher(cfg.__class__(**{**cfg.to_dict(), "max_steps": 4}), teacher.params)
    env = make_env(small.config)
    rng = np.random.default_rng(1)
    seen = [rollout_mixed(env, student, small, 0, rng).switch for _ in range(200)]
    assert set(seen) == {1, 2, 3, 4}


def test_teacher_rows_are_on_policy(fc_setup):
    cfg, student, teacher = fc_setup
    tr = rollout_mixed(make_env(cfg), student, teacher, 3, np.random.default_rng(2), switch=2)
    with ng.no_grad():
        lt = teacher_logp_graph(teacher.params.high.tensors(), teacher, tr.steps).data
    for s, l in zip(tr.steps, lt):
        assert np.isfinite(s.behavior_logp) and s.behavior_logp <= 0
        if s.tag == TEACHER:
            assert l == pytest.approx(s.behavior_logp, abs=1e-10)


def test_zero_advantage_gives_zero_gradient(fc_setup):
    cfg, student, teacher = fc_setup
    tr = rollout_mixed(make_env(cfg), student, teacher, 3, np.random.default_rng(2), switch=4)
    mask = np.array([s.tag == STUDENT for s in tr.steps])
    mu = np.array([s.behavior_logp for s in tr.steps])
    g = ng.evaluate_with_gradients(
        lambda P: policy_objective(teacher_logp_graph(P, teacher, tr.steps), mask, mu, np.zeros(len(mask))),
        teacher.params.high)
    for v in g.grads.values():
        assert not np.any(v)


def test_pseudo_update_freezes_student_and_executors(fc_setup):
    cfg, student, _ = fc_setup
    teacher = Teacher(cfg, init_teacher(make_env(cfg), 1))
    before = teacher.params.copy()
    phi = student.params.copy()
    learner, stats = pseudo_update(teacher, cfg, student, PseudoConfig(n=20, n_pseudo=4),
                                   np.random.default_rng(0))
    assert stats.updates >= 1 and stats.episodes == 4
    assert student.params.equal(phi)
    for c in before.low:
        assert teacher.params.low[c].equal(before.low[c])
    assert not teacher.params.high.equal(before.high)
    assert not teacher.params.value.equal(before.value)


def test_buffer_spans_episodes(fc_setup):
    cfg, student, _ = fc_setup
    teacher = Teacher(cfg, init_teacher(make_env(cfg), 1))
    learner, stats = pseudo_update(teacher, cfg, student, PseudoConfig(n=7, n_pseudo=3),
                                   np.random.default_rng(9), seeds=[11, 12, 13])
    assert stats.updates == stats.steps // 7 and len(learner.buffer) == stats.steps % 7
    # a second call keeps filling the same buffer
    carried = len(learner.buffer)
    learner, more = pseudo_update(teacher, cfg, student, PseudoConfig(n=7, n_pseudo=2),
                                  np.random.default_rng(10), learner=learner)
    assert more.updates == (carried + more.steps) // 7


def test_non_finite_update_skipped(fc_setup, caplog):
    cfg, student, _ = fc_setup
    teacher = Teacher(cfg, init_teacher(make_env(cfg), 1))
    tr = rollout_mixed(make_env(cfg), student, teacher, 0, np.random.default_rng(0), switch=2)
    tr.steps[0].behavior_logp = -np.inf
    before = teacher.params.copy()
    stats = PseudoStats()
    PseudoLearner(teacher, PseudoConfig()).update(tr.steps, stats)
    assert stats.skipped == 1 and stats.updates == 0
    assert teacher.params.high.equal(before.high) and teacher.params.value.equal(before.value)
    assert "skipped" in caplog.text


def test_config_defaults_and_validation():
    c = PseudoConfig()
    assert (c.n, c.gamma, c.lr_value, c.lr_policy) == (200, 0.9, 1e-4, 1e-4)
    for bad in (dict(n=0), dict(gamma=1.0), dict(lr_policy=0.0), dict(n_pseudo=-1)):
        with pytest.raises(ValueError):
            PseudoConfig(**bad)


def test_value_inputs_per_step_shape(fc_setup):
    cfg, student, teacher = fc_setup
    tr = rollout_mixed(make_env(cfg), student, teacher, 0, np.random.default_rng(0), switch=2)
    vin = value_inputs([s.jobs for s in tr.steps], teacher.classes)
    assert vin.shape == (len(tr), value_input_width(teacher.classes))


def test_degraded_coordinator_recovers_on_fc_easy():
    from conftest import cached_teacher
    from hint.metrics import TeacherPolicy, evaluate

    cfg = preset("fc-easy")
    spec = spec_for(cfg)
    pretrained, _ = cached_teacher("fc-easy")
    reference = evaluate(TeacherPolicy(Teacher(cfg, pretrained)), cfg, 50, (0,)).success_rate
    for seed in range(3):
        params = pretrained.copy()
        params.high = init_teacher(make_env(cfg), 100 + seed).high
        teacher = Teacher(cfg, params)
        student = Student(spec, init_student(spec, seed))
        rng = np.random.default_rng(seed)
        learner = None
        for _ in range(10):
            learner, _ = pseudo_update(teacher, cfg, student, PseudoConfig(), rng, learner)
        recovered = evaluate(TeacherPolicy(teacher), cfg, 50, (0,)).success_rate
        assert recovered >= reference - 0.10
