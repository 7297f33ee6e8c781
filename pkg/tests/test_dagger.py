import numpy as np
import pytest

from conftest import demo_trajectories, toy_oracle, toy_states
from hint.dagger import (AggregatedDataset, FilterResult, QueryConfig, collect_episode, lookahead_seed,
                         query_and_filter, suboptimal_demo_rate, teacher_demonstration)
from hint.envs import SnapshotError, make_env, preset
from hint.student import Student, init_student, spec_for
from hint.teacher import Teacher, init_teacher


def fr(success, accepted=None):
    return FilterResult(np.zeros(2, dtype=np.int64), -1.0, success if accepted is None else accepted, success, 3)


# ---------------------------------------------------------------- filter on the toy

def test_toy_filter_matches_exact_simulation_oracle(toy_teacher):
    cfg, teacher = toy_teacher
    env = make_env(cfg)
    results, oracle = [], []
    for q, key in enumerate(toy_states(env)):
        before = env.snapshot()
        res, _ = query_and_filter(env, teacher, None, np.random.default_rng([q, 1]), 77, q)
        assert env.snapshot() == before
        action, ok = toy_oracle(env, teacher, [q, 1], lookahead_seed(77, q))
        np.testing.assert_array_equal(res.action, action)
        assert res.accepted == ok, key
        results.append(res)
        oracle.append(ok)
    assert 0 < sum(oracle) < len(oracle)
    assert suboptimal_demo_rate(results) == sum(not o for o in oracle) / len(oracle)


def test_toy_stranded_router_is_rejected(toy_teacher):
    cfg, teacher = toy_teacher
    env = make_env(cfg)
    n = 0
    for q, (dest, rpos, lpos, fuel) in enumerate(toy_states(env)):
        if fuel == 0 and abs(rpos[0] - lpos[0]) + abs(rpos[1] - lpos[1]) >= 2:
            res, _ = query_and_filter(env, teacher, None, np.random.default_rng(q), 5, q)
            assert not res.accepted and not res.success
            n += 1
    assert n > 0


def destination_seeking(teacher):
    """Copy of ``teacher`` whose coordinator always assigns routing agents their destination."""
    from hint.teacher import Teacher as T

    params = teacher.params.copy()
    h = params.high.entries
    for name in h:
        if name.startswith("score.") or name.startswith("enc.routing."):
            h[name][:] = 0.0
    h["enc.routing.w0"][10, 0] = 5.0  # destination flag -> encoding unit 0
    h["score.w0"][0, 0] = 3.0
    h["score.w1"][0, 0] = 100.0
    h["score.b1"][:] = -40.0
    return T(teacher.config, params)


def test_full_acceptance_when_teacher_always_succeeds(toy_teacher):
    cfg, teacher = toy_teacher
    teacher = destination_seeking(teacher)
    env = make_env(cfg)
    results = []
    for q, (dest, rpos, lpos, fuel) in enumerate(toy_states(env)):
        if fuel >= abs(rpos[0] - dest[0]) + abs(rpos[1] - dest[1]):
            res, _ = query_and_filter(env, teacher, None, np.random.default_rng(q), 5, q,
                                      QueryConfig(deterministic_teacher=True))
            results.append(res)
    assert len(results) > 100
    assert suboptimal_demo_rate(results) == 0.0


def test_toy_episode_rate_equals_oracle_over_visited_states(toy_teacher):
    cfg, teacher = toy_teacher
    spec = spec_for(cfg)
    student = Student(spec, init_student(spec, 3))
    env = make_env(cfg)
    for seed in range(5):
        tr, results = collect_episode(env, student, teacher, seed)
        # replay the executed actions; the oracle consumes the query stream in the same order
        replay = make_env(cfg)
        replay.reset(seed=seed)
        qrng = np.random.default_rng([seed, 1])
        oracle = []
        for t, a in enumerate(tr.executed):
            action, ok = toy_oracle(replay, teacher, qrng, lookahead_seed(seed, t))
            np.testing.assert_array_equal(action, tr.actions[t])
            oracle.append(ok)
            replay.step(a)
        np.testing.assert_array_equal(tr.accepted, oracle)
        assert suboptimal_demo_rate(results) == sum(not o for o in oracle) / len(oracle)


# ---------------------------------------------------------------- episodes

@pytest.fixture(scope="module")
def fc_pair():
    cfg = preset("fc-easy")
    spec = spec_for(cfg)
    return cfg, Student(spec, init_student(spec, 1)), Teacher(cfg, init_teacher(make_env(cfg), 2))


def test_queries_do_not_disturb_the_student_episode(fc_pair):
    cfg, student, teacher = fc_pair
    env = make_env(cfg)
    a, _ = collect_episode(env, student, teacher, seed=4)
    b, _ = collect_episode(env, student, teacher, seed=4, query=False)
    np.testing.assert_array_equal(a.executed, b.executed)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    for c in a.obs:
        np.testing.assert_array_equal(a.obs[c], b.obs[c])
    assert a.success == b.success


def test_vanilla_dagger_without_filter(fc_pair):
    cfg, student, teacher = fc_pair
    env = make_env(cfg)
    tr, results = collect_episode(env, student, teacher, seed=6, config=QueryConfig(use_filter=False))
    assert tr.n_pairs == len(tr) == len(results)
    # the lookahead is still run, so the suboptimal rate stays observable
    filtered, _ = collect_episode(env, student, teacher, seed=6)
    assert [r.success for r in results] == list(filtered.accepted)


def test_all_rejected_episode_is_empty_but_counted(fc_pair, monkeypatch):
    cfg, student, teacher = fc_pair
    import hint.dagger as dg
    monkeypatch.setattr(dg, "simulate_teacher", lambda *a, **k: (False, 1))
    env = make_env(cfg)
    tr, results = collect_episode(env, student, teacher, seed=1)
    assert tr.n_pairs == 0 and len(tr) > 0
    assert suboptimal_demo_rate(results) == 1.0
    ds = AggregatedDataset([], budget=5)
    ds.aggregate(tr)
    assert len(ds) == 1 and ds.pairs() == 0


def test_snapshot_failure_discards_query(fc_pair, caplog):
    cfg, student, teacher = fc_pair
    env = make_env(cfg)

    def broken():
        raise SnapshotError("disk on fire")

    env.snapshot = broken
    tr, results = collect_episode(env, student, teacher, seed=2)
    assert results == [] and tr.n_pairs == 0
    assert "discarded" in caplog.text


def test_rate_extremes():
    assert suboptimal_demo_rate([fr(True)] * 4) == 0.0
    assert suboptimal_demo_rate([fr(False)] * 3) == 1.0
    assert suboptimal_demo_rate([]) == 0.0
    assert suboptimal_demo_rate([fr(True), fr(False), fr(False), fr(True)]) == 0.5


def test_majority_votes_config():
    with pytest.raises(ValueError):
        QueryConfig(votes_needed=3, votes_total=2)
    with pytest.raises(ValueError):
        QueryConfig(votes_needed=0)


def test_lookahead_seeds_distinct():
    seeds = {lookahead_seed(0, q, v) for q in range(50) for v in range(3)}
    assert len(seeds) == 150
    assert lookahead_seed(3, 4) == lookahead_seed(3, 4)


def test_teacher_demonstration_records_every_step(fc_pair):
    cfg, student, teacher = fc_pair
    demo = teacher_demonstration(make_env(cfg), teacher, 3, student.spec)
    assert demo.partition == "initial" and demo.n_pairs == len(demo)
    np.testing.assert_array_equal(demo.actions, demo.executed)
    assert np.all(demo.teacher_logp < 0)


# ---------------------------------------------------------------- aggregation

@pytest.fixture
def trajs(marine_easy):
    cfg, spec = marine_easy
    return demo_trajectories(cfg, spec, 30, seed=0, max_len=6)


def test_initial_partition_immutable_under_aggregation(trajs):
    initial = trajs[:4]
    copies = [(t.actions.copy(), t.teacher_logp.copy(), {c: o.copy() for c, o in t.obs.items()}) for t in initial]
    ds = AggregatedDataset(initial, budget=10)
    for i in range(1000):
        ds.aggregate(trajs[4 + i % 26])
        assert len(ds.recent) <= ds.capacity
        assert len(ds) <= ds.budget
    for t, (a, lp, obs) in zip(ds.initial, copies):
        np.testing.assert_array_equal(t.actions, a)
        np.testing.assert_array_equal(t.teacher_logp, lp)
        for c in obs:
            np.testing.assert_array_equal(t.obs[c], obs[c])
    with pytest.raises(ValueError):
        ds.initial[0].teacher_logp[0] = 0.0


def test_recent_partition_is_fifo(trajs):
    ds = AggregatedDataset(trajs[:2], budget=5)
    for t in trajs[2:12]:
        ds.aggregate(t)
    assert [t.episode for t in ds.recent] == [7, 8, 9]
    assert list(ds.recent) == trajs[9:12]


def test_budget_must_hold_initial(trajs):
    with pytest.raises(ValueError):
        AggregatedDataset(trajs[:5], budget=4)


def test_training_sample_balances_initial_and_recent(trajs):
    ds = AggregatedDataset(trajs[:5], budget=30)
    for t in trajs[5:]:
        ds.aggregate(t)
    target = sum(t.n_pairs for t in trajs[:5])
    sample = ds.training_sample(np.random.default_rng(0))
    assert sample[:5] == list(ds.initial)
    recent = sample[5:]
    got = sum(t.n_pairs for t in recent)
    assert got >= target and got - recent[-1].n_pairs < target


def test_dataset_round_trip(tmp_path, trajs):
    ds = AggregatedDataset(trajs[:3], budget=8)
    for t in trajs[3:10]:
        ds.aggregate(t)
    ds.save(tmp_path / "d.jsonl")
    back = AggregatedDataset.load(tmp_path / "d.jsonl")
    assert back.budget == 8 and len(back) == len(ds)
    for a, b in zip(list(ds.initial) + list(ds.recent), list(back.initial) + list(back.recent)):
        assert (a.partition, a.episode) == (b.partition, b.episode)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.accepted, b.accepted)
        np.testing.assert_allclose(a.teacher_logp, b.teacher_logp, rtol=0, atol=0)
        for c in a.obs:
            np.testing.assert_array_equal(a.obs[c], b.obs[c])
    nxt = trajs[10]
    back.aggregate(nxt)
    assert nxt.episode == 7
