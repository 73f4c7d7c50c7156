import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schedtree.distill import (Dataset, DecisionRecord, FidelityUndefinedError, IRLPolicy, collect_trajectory,
                               dagger_train, filter_critical, fidelity, irl_select, replay_decisions)
from schedtree.dqn import DQNModel, QNetwork, TrainConfig, train_dqn
from schedtree.dtree import FitConfig, FitError, Tree, fit_cart
from schedtree.policies import FeatureSpec, PolicyContractError, make_candidates
from schedtree.simcore import ClusterState
from schedtree.workload import Job, SyntheticConfig, generate_synthetic

SPEC = FeatureSpec(600.0)


def linear_teacher(weights, spec=SPEC):
    """A 'network' whose Q is a fixed linear function of the features."""
    return DQNModel(QNetwork([np.asarray(weights, dtype=float)[:, None]], [np.zeros(1)]), spec)


def leaf_tree(value=0.0, d=3):
    return Tree([-1], [0.0], [value], [1], d)


def cands_of(jobs, state=None):
    return make_candidates(jobs, state or ClusterState(8), SPEC)


def dataset(qlens):
    n = len(qlens)
    return Dataset(np.zeros((n, 3)), np.asarray(qlens), np.arange(n, dtype=float), np.zeros(n, dtype=int))


def test_filter_critical_examples():
    assert filter_critical(dataset([1, 3, 4, 7]), 3).queue_len.tolist() == [4, 7]
    d = dataset([1, 2, 5])
    assert len(filter_critical(d, 0)) == len(d)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), max_size=40), st.integers(-1, 20))
def test_filter_critical_subset_and_idempotent(qlens, threshold):
    d = dataset(qlens)
    once = filter_critical(d, threshold)
    assert set(once.teacher_q.tolist()) <= set(d.teacher_q.tolist())
    assert filter_critical(once, threshold).teacher_q.tolist() == once.teacher_q.tolist()


def test_irl_select_examples():
    tree = fit_cart([[0.0, 0, 0], [1.0, 0, 0]], [0.2, 0.8], FitConfig(1))
    pol = IRLPolicy(tree, SPEC, threshold=3, fallback="fcfs")
    jobs = [Job(1, 0, 5, 600, 1), Job(2, 1, 5, 600, 8)]
    c = cands_of(jobs)
    assert irl_select(pol, c, 10) == 1  # tree prefers the wide job
    assert irl_select(pol, c, 2) == 0  # not critical: FCFS
    tied = IRLPolicy(leaf_tree(), SPEC)
    assert irl_select(tied, cands_of([Job(1, 9, 5, 600, 1), Job(2, 4, 5, 600, 1)]), 10) == 1
    with pytest.raises(PolicyContractError):
        irl_select(pol, cands_of([]), 5)


def test_irl_policy_names_and_checks():
    assert IRLPolicy(leaf_tree(), SPEC, -1).name == "dagger"
    assert IRLPolicy(leaf_tree(), SPEC).name == "irl"
    with pytest.raises(ValueError):
        IRLPolicy(leaf_tree(d=4), SPEC)
    with pytest.raises(ValueError):
        IRLPolicy(leaf_tree(), SPEC, fallback="random")


def burst(n, procs=4, runtime=100):
    return [Job(i + 1, 0, runtime + i, 600, procs) for i in range(n)]


def test_one_sample_per_candidate():
    # 3 one-node jobs on an idle 8-node cluster: the first decision sees all 3
    recs = replay_decisions(linear_teacher([0, 0, 0]).policy(), linear_teacher([0, 0, 0]),
                            [Job(i, 0, 10, 600, 1) for i in (1, 2, 3)], 8)
    assert [len(r.features) for r in recs] == [3, 2, 1]
    data = collect_trajectory(linear_teacher([0, 0, 0]).policy(), linear_teacher([0, 0, 0]),
                              [Job(i, 0, 10, 600, 1) for i in (1, 2, 3)], 8)
    assert len(data) == 6
    assert data.queue_len.tolist() == [3, 3, 3, 2, 2, 1]


def test_empty_queue_instants_add_nothing():
    teacher = linear_teacher([0, 0, 0])
    jobs = [Job(1, 0, 10, 600, 1), Job(2, 100, 10, 600, 1)]  # second arrives after the first is done
    data = collect_trajectory(teacher.policy(), teacher, jobs, 8)
    assert len(data) == 2 and set(data.queue_len.tolist()) == {1}


def test_student_visits_new_states():
    # Teacher prefers small jobs, the constant tree starts in FCFS order.
    # Which job runs first changes the utilization seen at the next decision.
    teacher = linear_teacher([-1.0, 0, 0])
    jobs = [Job(1, 0, 10, 600, 6), Job(2, 0, 10, 600, 2), Job(3, 1, 10, 600, 2)]
    base = collect_trajectory(teacher.policy(), teacher, jobs, 8)
    student = IRLPolicy(leaf_tree(), SPEC, threshold=-1)
    new = collect_trajectory(student, teacher, jobs, 8, iteration=1)
    seen = {tuple(x) for x in base.features}
    assert any(tuple(x) not in seen for x in new.features)
    assert set(new.iteration.tolist()) == {1}


def test_fidelity_exact_teacher_tree():
    teacher = linear_teacher([1.0, 0, 0])
    jobs = burst(12, procs=1) + [Job(20 + i, 0, 50, 600, 2 ** (i % 4)) for i in range(12)]
    jobs.sort(key=lambda j: j.order_key)
    recs = replay_decisions(teacher.policy(), teacher, jobs, 8)
    X = np.vstack([r.features for r in recs])
    q = np.concatenate([r.teacher_q for r in recs])
    tree = fit_cart(X, q, FitConfig(12))
    assert fidelity(tree, teacher, records=recs, threshold=3) == 1.0


def test_fidelity_constant_tree_two_candidates():
    # Two candidates, a narrow and a wide job; the teacher always wants the
    # wide one, a constant tree always takes the earlier submit.  Over both
    # submit orders they agree exactly once.
    teacher = linear_teacher([1.0, 0, 0])
    X = np.array([[0.125, 0.5, 0.5], [0.5, 0.5, 0.5]])
    recs = []
    for submit in ([0, 1], [1, 0]):
        q = teacher.q_values(X)
        chosen = int(np.argmax(q))
        recs.append(DecisionRecord(X, np.array(submit), np.array([1, 2]), 5, q, chosen))
    expected = np.mean([np.argmin(r.submit) == r.chosen for r in recs])
    assert expected == 0.5
    assert fidelity(leaf_tree(), teacher, records=recs, threshold=3) == expected


def test_fidelity_undefined_without_critical_states():
    teacher = linear_teacher([0, 0, 0])
    with pytest.raises(FidelityUndefinedError):
        fidelity(leaf_tree(), teacher, [Job(1, 0, 10, 600, 1)], 8, threshold=3)


def test_dataset_csv_round_trip(tmp_path):
    d = Dataset(np.array([[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]]), np.array([4, 5]), np.array([-1.5, 2.0]),
                np.array([0, 1]), ("job_size", "requested_time", "utilization"))
    again = Dataset.from_csv(d.to_csv())
    assert again.to_csv() == d.to_csv()
    assert again.names == d.names


@pytest.fixture(scope="module")
def small_teacher():
    trace = generate_synthetic(SyntheticConfig(n_jobs=200, mean_interarrival=120, seed=3))
    model, _ = train_dqn(trace, 64, TrainConfig(episodes=3, batch_size=16, seed=0))
    return model, trace


def test_dagger_train_report_and_growth(small_teacher):
    model, trace = small_teacher
    res = dagger_train(model, trace, 64, n_iter=3, fit_cfg=FitConfig(6))
    assert [r["iteration"] for r in res.report] == [1, 2, 3]
    sizes = [r["dataset_size"] for r in res.report]
    assert all(b > a for a, b in zip(sizes, sizes[1:]))
    assert set(res.dataset.iteration.tolist()) == {0, 1, 2, 3}
    assert res.method == "IRL" and res.tree is res.trees[-1]
    header = res.report_csv().splitlines()[0]
    assert header.startswith("iteration,method,threshold,max_depth,dataset_size")
    for row in res.report:
        assert 0.0 <= row["fidelity"] <= 1.0


def test_dagger_comparator_and_one_shot(small_teacher):
    model, trace = small_teacher
    res = dagger_train(model, trace, 64, n_iter=1, fit_cfg=FitConfig(6), threshold=-1)
    assert res.method == "DAgger"
    # one iteration without filtering is plain imitation of the teacher trajectory
    recs = replay_decisions(model.policy(), model, trace, 64)
    X = np.vstack([r.features for r in recs])
    q = np.concatenate([r.teacher_q for r in recs])
    assert res.tree.structure() == fit_cart(X, q, FitConfig(6)).structure()


def test_dagger_keep_best(small_teacher):
    model, trace = small_teacher
    res = dagger_train(model, trace, 64, n_iter=3, fit_cfg=FitConfig(6), keep="best")
    fids = [r["fidelity"] for r in res.report]
    assert res.tree is res.trees[int(np.argmax(fids))]


def test_dagger_errors(small_teacher):
    model, trace = small_teacher
    with pytest.raises(ValueError):
        dagger_train(model, trace, 64, n_iter=0)
    with pytest.raises(FitError):
        dagger_train(model, trace, 64, n_iter=1, threshold=10**6)


def test_recorder_rejects_mismatched_spec(small_teacher):
    model, trace = small_teacher
    other = IRLPolicy(leaf_tree(), FeatureSpec(1.0))
    with pytest.raises(ValueError):
        replay_decisions(other, model, trace, 64)
