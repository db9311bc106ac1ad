import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knnsubsets.cart import (
    TreeError,
    fit_tree,
    node_features,
    primary_split_candidates,
    root_feature,
    root_split_proportions,
)
from knnsubsets.dataset import Dataset, FeatureSpec, make_local_structures


def numeric_ds(X, y, class_count=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y)
    feats = tuple(FeatureSpec(f"f{j}") for j in range(X.shape[1]))
    return Dataset(feats, X, y, class_count or int(y.max()))


def gini_term(counts):
    n = sum(counts)
    return Fraction(0) if n == 0 else Fraction(n) - Fraction(sum(c * c for c in counts), n)


def oracle_tree(X, y, C, cp, min_node, min_leaf):
    """Exhaustive greedy tree over every (feature, midpoint) split, exact arithmetic."""
    root_counts = [int(np.sum(y == c)) for c in range(1, C + 1)]
    root_risk = len(y) - max(root_counts)

    def grow(rows):
        counts = [int(np.sum(y[rows] == c)) for c in range(1, C + 1)]
        n = len(rows)
        node = {"counts": counts}
        if n < min_node or n < 2 * min_leaf or max(counts) == n:
            return node
        parent = gini_term(counts)
        best = None
        for f in range(X.shape[1]):
            vals = sorted(set(X[rows, f].tolist()))
            for a, b in zip(vals, vals[1:]):
                t = (a + b) / 2
                left = [r for r in rows if X[r, f] < t]
                right = [r for r in rows if X[r, f] >= t]
                if len(left) < min_leaf or len(right) < min_leaf:
                    continue
                lc = [int(np.sum(y[left] == c)) for c in range(1, C + 1)]
                rc = [int(np.sum(y[right] == c)) for c in range(1, C + 1)]
                gain = parent - gini_term(lc) - gini_term(rc)
                if best is None or gain > best[0]:
                    best = (gain, f, t, left, right, lc, rc)
        if best is None or best[0] <= 0:
            return node
        gain, f, t, left, right, lc, rc = best
        drop = (n - max(counts)) - (len(left) - max(lc)) - (len(right) - max(rc))
        if drop < cp * root_risk:
            return node
        node.update(feature=f, threshold=t, left=grow(left), right=grow(right))
        return node

    return grow(list(range(len(y))))


def tree_shape(tree):
    def visit(node):
        out = {"counts": [int(c) for c in node.class_counts]}
        if not node.is_leaf:
            out.update(feature=node.rule.feature, threshold=node.rule.threshold,
                       left=visit(node.left), right=visit(node.right))
        return out
    return visit(tree.root)


TOYS = [
    ([1, 2, 3, 4, 5, 6, 7, 8], [1, 1, 1, 2, 2, 2, 2, 2]),
    ([1, 2, 3, 4, 5, 6, 7, 8, 9, 10], [1, 1, 2, 2, 2, 1, 1, 3, 3, 3]),
    ([3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8], [1, 2, 1, 2, 1, 3, 2, 3, 1, 1, 1, 3]),
]


@pytest.mark.parametrize("x, y", TOYS)
@pytest.mark.parametrize("cp", [0.0, 0.1, 0.3])
def test_tree_matches_oracle_1d(x, y, cp):
    ds = numeric_ds(x, y)
    tree = fit_tree(ds, np.arange(ds.m), cp=cp, min_node=2, min_leaf=1)
    assert tree_shape(tree) == oracle_tree(ds.columns, ds.labels, ds.class_count, cp, 2, 1)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("cp, min_node, min_leaf", [(0.0, 2, 1), (0.05, 6, 2), (0.2, 4, 1)])
def test_tree_matches_oracle_2d(seed, cp, min_node, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 12, size=(30, 2)).astype(float)
    y = 1 + (X[:, 0] > 5).astype(int) + (X[:, 1] > 7).astype(int)
    flip = rng.choice(30, 4, replace=False)
    y[flip] = rng.integers(1, 4, size=4)
    ds = numeric_ds(X, y, 3)
    tree = fit_tree(ds, np.arange(ds.m), cp=cp, min_node=min_node, min_leaf=min_leaf)
    assert tree_shape(tree) == oracle_tree(ds.columns, ds.labels, 3, cp, min_node, min_leaf)


def test_cp_monotone_on_synthetic():
    ds = make_local_structures(rng_seed=0).dataset
    counts = [fit_tree(ds, np.arange(ds.m), cp=cp).node_count for cp in (0.01, 0.015, 0.02, 0.025, 0.05)]
    assert counts == sorted(counts, reverse=True)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.2), st.floats(0, 0.2))
def test_cp_monotone_property(seed, a, b):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    y = rng.integers(1, 4, size=80)
    ds = numeric_ds(X, y, 3)
    lo, hi = sorted((a, b))
    assert fit_tree(ds, np.arange(80), cp=lo, min_node=4).node_count >= \
        fit_tree(ds, np.arange(80), cp=hi, min_node=4).node_count


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_cp_zero_fits_training_data(seed, classes):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 2))
    y = rng.integers(1, classes + 1, size=40)
    ds = numeric_ds(X, y, classes)
    tree = fit_tree(ds, np.arange(40), cp=0.0, min_node=1)
    assert np.all(tree.predict_ids(ds, np.arange(40)) == y)


def test_split_improvements_respect_cp():
    ds = make_local_structures(rng_seed=1).dataset
    cp = 0.02
    tree = fit_tree(ds, np.arange(ds.m), cp=cp)
    root_risk = tree.root.risk
    for node in tree.iter_nodes():
        if not node.is_leaf:
            assert node.improvement > 0
            assert node.risk - node.left.risk - node.right.risk >= cp * root_risk - 1e-9


def test_permuted_rows_give_identical_tree():
    sd = make_local_structures(cluster_count=3, per_cluster_size=80, rng_seed=4)
    ds = sd.dataset
    perm = np.random.default_rng(0).permutation(ds.m)
    other = Dataset(ds.features, ds.columns[perm], ds.labels[perm], ds.class_count)
    a = fit_tree(ds, np.arange(ds.m), cp=0.01)
    b = fit_tree(other, np.arange(ds.m), cp=0.01)
    da, db = a.to_dict(), b.to_dict()
    assert da == db


def test_prediction_is_total():
    ds = make_local_structures(cluster_count=2, per_cluster_size=50, rng_seed=0).dataset
    tree = fit_tree(ds, np.arange(ds.m), cp=0.0, min_node=2)
    X = np.random.default_rng(1).normal(scale=100, size=(500, ds.columns.shape[1]))
    pred = tree.predict_many(X)
    assert set(pred.tolist()) <= set(range(1, ds.class_count + 1))
    assert [tree.predict(x) for x in X[:20]] == pred[:20].tolist()


def test_fit_errors():
    ds = numeric_ds([1, 2, 3], [1, 2, 1])
    with pytest.raises(TreeError):
        fit_tree(ds, [], cp=0.01)
    with pytest.raises(TreeError):
        fit_tree(ds, [0, 1], cp=-1)


# -- categorical splits ------------------------------------------------------

def cat_ds(codes, y, n_cats, C):
    spec = FeatureSpec("c", "categorical", tuple(f"v{i}" for i in range(n_cats)))
    return Dataset((spec,), np.asarray(codes, dtype=float)[:, None], np.asarray(y), C)


def best_subset_gain(codes, y, C):
    cats = sorted(set(codes))
    counts = {c: [sum(1 for a, b in zip(codes, y) if a == c and b == k) for k in range(1, C + 1)] for c in cats}
    total = [sum(counts[c][k] for c in cats) for k in range(C)]
    best = None
    for r in range(1, len(cats)):
        for left in itertools.combinations(cats, r):
            lc = [sum(counts[c][k] for c in left) for k in range(C)]
            rc = [total[k] - lc[k] for k in range(C)]
            gain = gini_term(total) - gini_term(lc) - gini_term(rc)
            best = gain if best is None or gain > best else best
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(2, 4))
def test_categorical_split_is_optimal(seed, n_cats, C):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, n_cats, size=40)
    y = rng.integers(1, C + 1, size=40)
    if np.unique(codes).size < 2 or np.unique(y).size < 2:
        return
    ds = cat_ds(codes, y, n_cats, C)
    cands = primary_split_candidates(ds, np.arange(40), min_node=2, min_leaf=1)
    want = best_subset_gain(codes.tolist(), y.tolist(), C)
    if want <= 0:
        assert cands == []
        return
    assert abs(cands[0].improvement - float(want)) < 1e-9


def test_categorical_direction_and_unseen_routing():
    codes = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
    y = [1, 1, 1, 2, 2, 2, 1, 1, 1, 1]
    ds = cat_ds(codes, y, 4, 2)
    tree = fit_tree(ds, np.arange(10), cp=0.0, min_node=2, min_leaf=1)
    rule = tree.root.rule
    assert rule.direction_string(ds.features[0]) in ("LRL-", "RLR-")
    # category 3 never reached the root: it follows the larger child
    big_left = tree.root.left.n >= tree.root.right.n
    assert bool(rule.goes_left([3.0])[0]) == big_left
    assert tree.predict([3.0]) == 1


# -- inspection --------------------------------------------------------------

def test_leaf_tree_inspection():
    ds = numeric_ds([1, 2, 3], [1, 1, 1])
    tree = fit_tree(ds, np.arange(3))
    assert node_features(tree) == set()
    assert root_feature(tree) is None
    with pytest.raises(TreeError):
        root_split_proportions(tree, ds, np.arange(3))


def test_stump_inspection():
    X = np.column_stack([np.arange(10.0), np.zeros(10)])
    ds = Dataset((FeatureSpec("RSBP"), FeatureSpec("AGE")), X, np.array([1] * 5 + [2] * 5), 2)
    tree = fit_tree(ds, np.arange(10), min_node=2, min_leaf=1)
    assert node_features(tree) == {"RSBP"}
    assert root_feature(tree) == "RSBP"
    assert root_split_proportions(tree, ds, np.arange(10)) == (0.5, 0.5)
    left, right = root_split_proportions(tree, ds, [0, 1, 2, 9])
    assert left + right == 1


def test_primary_candidates_ranking():
    rng = np.random.default_rng(0)
    y = np.array([1] * 30 + [2] * 30)
    good = y + rng.normal(scale=0.1, size=60)
    X = np.column_stack([rng.normal(size=60), good, good, rng.normal(size=60)])
    ds = numeric_ds(X, y, 2)
    cands = primary_split_candidates(ds, np.arange(60))
    assert [c.feature for c in cands[:2]] == ["f1", "f2"]
    assert cands[0].improvement == cands[1].improvement
    imps = [c.improvement for c in cands]
    assert imps == sorted(imps, reverse=True)


def test_primary_candidates_match_brute_force():
    sd = make_local_structures(cluster_count=2, per_cluster_size=40, rng_seed=3)
    ds = sd.dataset
    ids = np.arange(ds.m)
    cands = primary_split_candidates(ds, ids, min_node=2, min_leaf=1)
    oracle = oracle_tree(ds.columns, ds.labels, ds.class_count, 0.0, 2, 1)
    assert cands[0].feature == ds.features[oracle["feature"]].name
    assert abs(cands[0].rule.threshold - oracle["threshold"]) < 1e-12


def test_primary_candidates_degenerate():
    ds = numeric_ds([1, 2, 3], [1, 1, 1], 2)
    assert primary_split_candidates(ds, np.arange(3)) == []
    with pytest.raises(TreeError):
        primary_split_candidates(ds, [0])


def test_json_stable_field_order():
    ds = make_local_structures(cluster_count=2, per_cluster_size=40, rng_seed=0).dataset
    tree = fit_tree(ds, np.arange(ds.m), cp=0.01, min_node=4)
    doc = json.loads(tree.to_json())
    assert list(doc) == ["cp", "criterion", "min_node", "min_leaf", "node_count", "root"]
    if "feature" in doc["root"]:
        assert list(doc["root"]) == ["feature", "kind", "threshold", "improvement", "class_counts", "left", "right"]
    assert tree.to_json() == fit_tree(ds, np.arange(ds.m), cp=0.01, min_node=4).to_json()


def test_entropy_criterion():
    ds = numeric_ds([1, 2, 3, 4, 5, 6], [1, 1, 1, 2, 2, 2])
    tree = fit_tree(ds, np.arange(6), min_node=2, min_leaf=1, criterion="entropy")
    assert tree.root.rule.threshold == 3.5
    assert abs(tree.root.improvement - 6.0) < 1e-12
    with pytest.raises(TreeError):
        fit_tree(ds, np.arange(6), min_node=2, criterion="mse")
