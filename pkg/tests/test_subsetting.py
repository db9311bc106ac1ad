import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knnsubsets.dataset import Dataset, FeatureSpec, make_local_structures
from knnsubsets.knn_space import NeighborIndex
from knnsubsets.subsetting import (
    ConfigError,
    PoolModel,
    SubsetCandidate,
    SubsettingConfig,
    SubsettingResult,
    discover_next_subset,
    grow_closure,
    grow_subset,
    penalty,
    regularized_error,
    run,
    score_candidate,
    subset_knn_accuracy,
)


# -- penalty and score -------------------------------------------------------

def test_penalty_golden_values():
    assert penalty(250, 250, 0.125, 0.3) == 0
    assert penalty(50, 250, 0.125, 0.3) == 25
    assert abs(penalty(300, 250, 0.125, 0.3) - 15) < 1e-12


def test_score_of_small_accurate_subset():
    cfg = SubsettingConfig(sst=250, alpha_l=0.125, alpha_u=0.3)
    cand = SubsetCandidate(tuple(range(50)), 0, 3, 98.0, 0.0, 0.0, (50,))
    assert score_candidate(cand, cfg) == 27
    assert cand.penalty == 25
    assert regularized_error(50, 98.0, cfg) == 27


@given(st.integers(1, 2000), st.integers(1, 1000), st.floats(0, 5), st.floats(0, 5))
def test_penalty_shape(size, sst, al, au):
    p = penalty(size, sst, al, au)
    assert p >= 0
    if size == sst:
        assert p == 0
    if size < sst:
        assert p == al * (sst - size)
    if size > sst:
        assert p == au * (size - sst)


def test_penalty_rejects_empty():
    with pytest.raises(ValueError):
        penalty(0, 10, 0.1, 0.1)


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"alpha_l": -0.1}, {"alpha_u": -1}, {"coverage_target": 0}, {"coverage_target": 1.2},
    {"seed_fraction": 0}, {"k_schedule": ()}, {"k_schedule": ((0.1, 3),)},
    {"k_schedule": ((0, 3), (0.5, 3))}, {"k_schedule": ((0, 3), (0.5, 5), (0.4, 7))},
    {"k_schedule": ((0, 3), (1.0, 5))}, {"sst": 0}, {"accuracy_source": "both"},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SubsettingConfig(**kw)


def test_config_schedule_lookup_and_roundtrip():
    cfg = SubsettingConfig()
    assert [cfg.k_for(c) for c in (0, 0.2, 0.25, 0.69, 0.7, 0.85, 0.99)] == [3, 3, 5, 5, 7, 9, 9]
    assert SubsettingConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        SubsettingConfig.from_dict({"sst": 10, "bogus": 1})


# -- growth ------------------------------------------------------------------

def test_growth_walkthrough_graph():
    # seed A, K=3; red instances B, X1 and X2 are eliminated
    graph = {
        "A": ["B", "C", "D"], "C": ["A", "C2", "C3"], "D": ["A", "D1", "B"],
        "C2": ["C", "C3", "X1"], "C3": ["C", "C2", "D1"], "D1": ["D", "X2", "C3"],
        "B": ["A", "X1", "X2"], "X1": ["B", "C2", "X2"], "X2": ["B", "D1", "X1"],
    }
    red = {"B", "X1", "X2"}
    got = grow_closure("A", graph.__getitem__, lambda n: n not in red)
    assert got == {"A", "C", "D", "C2", "C3", "D1"}


def brute_closure(X, y, pool, seed, k):
    pool = sorted(pool)
    f = X.shape[1]

    def knn(q):
        d = sorted((math.sqrt(((X[q] - X[i]) ** 2).sum() / f), i) for i in pool if i != q)
        return [i for _, i in d[:k]]

    def hit(q):
        nb = knn(q)
        counts = {}
        for i in nb:
            counts[y[i]] = counts.get(y[i], 0) + 1
        top = max(counts.values())
        return next(y[i] for i in nb if counts[y[i]] == top) == y[q]

    members, todo = {seed}, [seed]
    while todo:
        q = todo.pop()
        for j in knn(q):
            if j not in members and hit(j):
                members.add(j)
                todo.append(j)
    return members, hit


def test_grow_subset_matches_brute_force():
    sd = make_local_structures(cluster_count=2, per_cluster_size=40, class_count=3, noise_rate=0.2, rng_seed=1)
    ds = sd.dataset
    rng = np.random.default_rng(0)
    pool = np.sort(rng.choice(ds.m, 60, replace=False))
    pm = PoolModel(ds, pool, 3)
    for seed in pm.hits()[:10]:
        want, hit = brute_closure(ds.matrix, ds.labels, pool.tolist(), int(seed), 3)
        assert grow_subset(int(seed), pm) == want
    miss = [i for i in pool if not pm.is_hit(i)]
    if miss:
        with pytest.raises(ValueError):
            grow_subset(int(miss[0]), pm)


def test_subset_knn_accuracy_refits_on_members():
    X = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [9.0]])
    y = np.array([1, 1, 2, 2, 2, 1])
    idx = NeighborIndex(X)
    # members {0,1,2} with k=1: 0->1 ok, 1->0 ok, 2->1 wrong
    assert abs(subset_knn_accuracy(idx, [0, 1, 2], y, 1, 2) - 200 / 3) < 1e-12
    assert subset_knn_accuracy(idx, [5], y, 3, 2) == 100.0


def test_best_candidate_is_global_minimum():
    sd = make_local_structures(cluster_count=2, per_cluster_size=40, class_count=2, noise_rate=0.1, rng_seed=3)
    ds = sd.dataset
    cfg = SubsettingConfig(sst=30, seed_fraction=1.0, accuracy_source="pool")
    pool = np.arange(ds.m)
    best = discover_next_subset(ds, pool, cfg, 3, np.random.default_rng(0))
    pm = PoolModel(ds, pool, 3)
    keys = []
    for seed in pm.hits():
        members = grow_subset(int(seed), pm)
        err = penalty(len(members), 30, cfg.alpha_l, cfg.alpha_u)
        keys.append((err, -len(members), int(seed)))
    err, neg, seed = min(keys)
    assert (best.regularized_error, -best.size, best.seed_id) == (err, neg, seed)
    assert best.knn_accuracy == 100.0


# -- outer loop --------------------------------------------------------------

def check_result(ds, result, proper=True):
    result.validate()
    taken = np.zeros(ds.m, dtype=bool)
    pool = np.arange(ds.m)
    for s, it in zip(result.subsets, result.iterations):
        members = set(s.members)
        assert s.seed_id in members
        assert len(members) == s.size
        if proper:
            assert s.size < ds.m
        assert np.unique(ds.labels[list(members)]).size <= ds.class_count
        assert not taken[list(members)].any()
        pm = PoolModel(ds, pool, s.k_used)
        assert it["k"] == s.k_used
        for i in members:
            assert pm.is_hit(i)
            for j in pm.neighbor_ids(i):
                if pm.is_hit(int(j)):
                    assert int(j) in members
        taken[list(members)] = True
        pool = np.flatnonzero(~taken)
    assert sorted(result.remainder) == pool.tolist()


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]), st.floats(0, 0.3),
       st.integers(10, 80), st.sampled_from([0.3, 0.6, 0.9]))
def test_run_invariants(seed, classes, noise, sst, target):
    sd = make_local_structures(cluster_count=3, per_cluster_size=60, class_count=classes,
                               noise_rate=noise, rng_seed=seed)
    cfg = SubsettingConfig(sst=sst, coverage_target=target, rng_seed=seed,
                           k_schedule=((0, 3), (0.5, 5)))
    result = run(sd.dataset, cfg)
    check_result(sd.dataset, result)
    if result.stop_reason == "coverage_target":
        assert result.coverage >= target


def test_run_deterministic_and_serializable():
    ds = make_local_structures(cluster_count=3, per_cluster_size=80, rng_seed=2).dataset
    cfg = SubsettingConfig(sst=60, rng_seed=5)
    a, b = run(ds, cfg), run(ds, cfg)
    assert a.to_json() == b.to_json()
    back = SubsettingResult.from_dict(json.loads(a.to_json()))
    assert back.to_json() == a.to_json()
    assert back.dataset_hash == ds.content_hash()


def test_run_stops_when_pool_smaller_than_k():
    X = np.arange(10, dtype=float)[:, None]
    ds = Dataset((FeatureSpec("x"),), X, np.array([1] * 10), 1)
    result = run(ds, SubsettingConfig(sst=3, coverage_target=1.0, k_schedule=((0, 3),)))
    assert result.subsets
    # one class in one connected run: the whole dataset is a single closure
    check_result(ds, result, proper=False)
    assert result.stop_reason in ("pool_smaller_than_k", "coverage_target")


def test_run_stops_without_hits():
    # duplicated points with opposite labels: every leave-self-out 1-NN prediction is wrong
    X2 = np.repeat(np.arange(6, dtype=float), 2)[:, None]
    ds = Dataset((FeatureSpec("x"),), X2, np.array([1, 2] * 6), 2)
    result = run(ds, SubsettingConfig(k_schedule=((0, 1),)))
    assert result.subsets == []
    assert result.stop_reason == "no_positive_hits"
    assert sorted(result.remainder) == list(range(12))


def test_result_validate_catches_overlap():
    r = SubsettingResult([SubsetCandidate((0, 1), 0, 3, 100.0, 0, 0, ()),
                          SubsetCandidate((1, 2), 1, 3, 100.0, 0, 0, ())], (3,), [], "x", 4)
    with pytest.raises(ValueError):
        r.validate()
