"""Recursive-partitioning classification trees with complexity-parameter
pruning, plus the inspection helpers used by the reports.

Splits are chosen by impurity decrease (Gini by default).  A split is kept
only when it lowers the node's misclassification count by at least
``cp * root_risk``, where ``root_risk`` is the misclassification count of the
tree's root; otherwise the node becomes a leaf.  Because the choice of split
does not depend on ``cp``, raising ``cp`` can only cut branches.
"""

import itertools
import json
from dataclasses import dataclass

import numpy as np

MAX_EXHAUSTIVE_CATEGORIES = 8
_EPS = 1e-9


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class SplitRule:
    feature: int
    kind: str
    threshold: float = None
    left_categories: tuple = ()
    right_categories: tuple = ()
    unseen_left: bool = True

    def goes_left(self, values):
        """Boolean mask for an array of feature values."""
        values = np.asarray(values, dtype=float)
        if self.kind == "numeric":
            return values < self.threshold
        codes = values.astype(np.int64)
        left = np.isin(codes, self.left_categories)
        if self.unseen_left:
            left |= ~np.isin(codes, self.right_categories)
        return left

    def describe(self, spec):
        if self.kind == "numeric":
            return f"{spec.name} < {self.threshold:.6g}"
        return f"{spec.name} splits as {self.direction_string(spec)}"

    def direction_string(self, spec):
        """One letter per declared category: L, R, or ``-`` when unseen at the node."""
        if self.kind == "numeric":
            return "LR"
        out = []
        for code in range(len(spec.categories)):
            out.append("L" if code in self.left_categories else "R" if code in self.right_categories else "-")
        return "".join(out)


@dataclass
class TreeNode:
    class_counts: np.ndarray
    rule: SplitRule = None
    left: "TreeNode" = None
    right: "TreeNode" = None
    improvement: float = 0.0

    @property
    def is_leaf(self):
        return self.rule is None

    @property
    def n(self):
        return int(self.class_counts.sum())

    @property
    def predicted(self):
        return int(np.argmax(self.class_counts)) + 1

    @property
    def risk(self):
        return self.n - int(self.class_counts.max())


def impurity_terms(counts, criterion="gini"):
    """``n * impurity`` for each row of a ``(..., C)`` count array."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum(axis=-1)
    if criterion == "gini":
        with np.errstate(invalid="ignore", divide="ignore"):
            out = n - (counts ** 2).sum(axis=-1) / n
    elif criterion == "entropy":
        with np.errstate(invalid="ignore", divide="ignore"):
            p = counts / n[..., None]
            logs = np.where(counts > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
            out = -(counts * logs).sum(axis=-1)
    else:
        raise TreeError(f"unknown criterion {criterion!r}")
    return np.where(n > 0, out, 0.0)


def _best_numeric(x, y, class_count, min_leaf, criterion, parent_term):
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    onehot = np.zeros((n, class_count))
    onehot[np.arange(n), ys] = 1.0
    left = np.cumsum(onehot, axis=0)[:-1]
    total = onehot.sum(axis=0)
    right = total - left
    nl = np.arange(1, n)
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid.any():
        return None
    gain = parent_term - impurity_terms(left, criterion) - impurity_terms(right, criterion)
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    lo, hi = xs[i], xs[i + 1]
    threshold = (lo + hi) / 2.0
    if not lo < threshold <= hi:
        threshold = hi
    return float(gain[i]), threshold, left[i], right[i]


def _exhaustive_left_sets(cats):
    """Every proper left set that contains the lowest observed category."""
    rest = cats[1:]
    for r in range(0, len(cats) - 1):
        for combo in itertools.combinations(rest, r):
            yield (cats[0],) + combo


def _best_categorical(x, y, class_count, min_leaf, criterion, parent_term):
    codes = x.astype(np.int64)
    cats = tuple(int(c) for c in np.unique(codes))
    if len(cats) < 2:
        return None
    counts = np.zeros((len(cats), class_count))
    np.add.at(counts, (np.searchsorted(cats, codes), y), 1.0)
    total = counts.sum(axis=0)
    node_major = int(np.argmax(total))
    if class_count == 2 or len(cats) > MAX_EXHAUSTIVE_CATEGORIES:
        # Breiman ordering: for two classes the optimum is a prefix of this order.
        share = counts[:, 0 if class_count == 2 else node_major] / counts.sum(axis=1)
        order = sorted(range(len(cats)), key=lambda i: (share[i], cats[i]))
        candidates = []
        for cut in range(1, len(cats)):
            left = tuple(sorted(cats[i] for i in order[:cut]))
            if cats[0] not in left:
                left = tuple(sorted(set(cats) - set(left)))
            candidates.append(left)
    else:
        candidates = list(_exhaustive_left_sets(cats))
    best = None
    pos = {c: i for i, c in enumerate(cats)}
    for left in candidates:
        lc = counts[[pos[c] for c in left]].sum(axis=0)
        rc = total - lc
        if lc.sum() < min_leaf or rc.sum() < min_leaf:
            continue
        gain = float(parent_term - impurity_terms(lc, criterion) - impurity_terms(rc, criterion))
        key = (-gain, left)
        if best is None or key < best[0]:
            right = tuple(c for c in cats if c not in left)
            best = (key, gain, left, right, lc, rc)
    if best is None:
        return None
    _, gain, left, right, lc, rc = best
    return gain, left, right, lc, rc


def best_split(columns, y, features, class_count, min_leaf, criterion="gini", feature_subset=None):
    """Best split of one node per feature.

    ``y`` holds 0-based classes.  Returns a list indexed like ``features`` of
    ``(gain, SplitRule)`` or ``None`` where the feature offers no valid split.
    """
    parent = np.bincount(y, minlength=class_count).astype(float)
    parent_term = float(impurity_terms(parent, criterion))
    out = []
    for j, spec in enumerate(features):
        if feature_subset is not None and j not in feature_subset:
            out.append(None)
            continue
        x = columns[:, j]
        if spec.kind == "categorical":
            res = _best_categorical(x, y, class_count, min_leaf, criterion, parent_term)
            if res is None:
                out.append(None)
                continue
            gain, left, right, lc, rc = res
            rule = SplitRule(j, "categorical", left_categories=left, right_categories=right,
                             unseen_left=bool(lc.sum() >= rc.sum()))
        else:
            res = _best_numeric(x, y, class_count, min_leaf, criterion, parent_term)
            if res is None:
                out.append(None)
                continue
            gain, threshold, lc, rc = res
            rule = SplitRule(j, "numeric", threshold=threshold)
        out.append((gain, rule, lc, rc))
    return out


def _choose(per_feature):
    best = None
    for item in per_feature:
        if item is None:
            continue
        if best is None or item[0] > best[0]:
            best = item
    return best


@dataclass
class TreeModel:
    root: TreeNode
    cp: float
    features: tuple
    class_count: int
    training_ids: tuple
    min_node: int
    min_leaf: int
    criterion: str = "gini"

    @property
    def node_count(self):
        return sum(1 for node in self.iter_nodes() if not node.is_leaf)

    @property
    def leaf_count(self):
        return sum(1 for node in self.iter_nodes() if node.is_leaf)

    def iter_nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (len(self.features),):
            raise TreeError(f"expected {len(self.features)} feature values, got shape {x.shape}")
        node = self.root
        while not node.is_leaf:
            node = node.left if node.rule.goes_left(x[node.rule.feature:node.rule.feature + 1])[0] else node.right
        return node.predicted

    def predict_many(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.features):
            raise TreeError(f"expected rows of {len(self.features)} feature values")
        out = np.empty(X.shape[0], dtype=np.int64)
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.predicted
                continue
            go = node.rule.goes_left(X[idx, node.rule.feature])
            stack.append((node.left, idx[go]))
            stack.append((node.right, idx[~go]))
        return out

    def predict_ids(self, dataset, ids):
        return self.predict_many(dataset.columns[np.asarray(ids, dtype=np.int64)])

    def to_dict(self):
        def visit(node):
            if node.is_leaf:
                return {"class_counts": [int(c) for c in node.class_counts], "predicted": node.predicted}
            r = node.rule
            d = {"feature": self.features[r.feature].name, "kind": r.kind}
            if r.kind == "numeric":
                d["threshold"] = r.threshold
            else:
                d["left_categories"] = [self.features[r.feature].categories[c] for c in r.left_categories]
            d["improvement"] = node.improvement
            d["class_counts"] = [int(c) for c in node.class_counts]
            d["left"] = visit(node.left)
            d["right"] = visit(node.right)
            return d
        return {"cp": self.cp, "criterion": self.criterion, "min_node": self.min_node,
                "min_leaf": self.min_leaf, "node_count": self.node_count, "root": visit(self.root)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


def default_min_leaf(min_node):
    return max(1, int(round(min_node / 3)))


def fit_tree(dataset, ids, cp=0.01, min_node=20, min_leaf=None, criterion="gini"):
    """Grow a classification tree on the instances ``ids`` of ``dataset``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise TreeError("cannot fit a tree on an empty id set")
    if cp < 0:
        raise TreeError("cp must be non-negative")
    min_leaf = default_min_leaf(min_node) if min_leaf is None else min_leaf
    X = dataset.columns[ids]
    y = dataset.labels[ids] - 1
    C = dataset.class_count
    features = dataset.features
    root_counts = np.bincount(y, minlength=C)
    root_risk = ids.size - int(root_counts.max())
    required = cp * root_risk

    def grow(rows):
        counts = np.bincount(y[rows], minlength=C)
        node = TreeNode(counts)
        n = rows.size
        if n < min_node or n < 2 * min_leaf or counts.max() == n:
            return node
        best = _choose(best_split(X[rows], y[rows], features, C, min_leaf, criterion))
        if best is None:
            return node
        gain, rule, lc, rc = best
        risk_drop = (n - counts.max()) - (lc.sum() - lc.max()) - (rc.sum() - rc.max())
        if gain <= _EPS or risk_drop < required - _EPS:
            return node
        go = rule.goes_left(X[rows, rule.feature])
        node.rule = rule
        node.improvement = gain
        node.left = grow(rows[go])
        node.right = grow(rows[~go])
        return node

    root = grow(np.arange(ids.size))
    return TreeModel(root, cp, tuple(features), C, tuple(int(i) for i in ids), min_node, min_leaf, criterion)


def predict(tree, x):
    return tree.predict(x)


def node_features(tree):
    return {tree.features[n.rule.feature].name for n in tree.iter_nodes() if not n.is_leaf}


def root_feature(tree):
    if tree.root.is_leaf:
        return None
    return tree.features[tree.root.rule.feature].name


@dataclass(frozen=True)
class SplitCandidate:
    feature: str
    rule: SplitRule
    improvement: float
    description: str


def primary_split_candidates(dataset, ids, min_node=20, min_leaf=None, criterion="gini"):
    """Best root split of every feature, ranked by improvement (ties: lower feature index)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise TreeError("need at least two instances")
    y = dataset.labels[ids] - 1
    if np.unique(y).size < 2:
        return []
    min_leaf = default_min_leaf(min_node) if min_leaf is None else min_leaf
    per = best_split(dataset.columns[ids], y, dataset.features, dataset.class_count, min_leaf, criterion)
    ranked = [(-item[0], j, item[1]) for j, item in enumerate(per) if item is not None and item[0] > _EPS]
    ranked.sort(key=lambda t: (t[0], t[1]))
    return [SplitCandidate(dataset.features[j].name, rule, -neg, rule.describe(dataset.features[j]))
            for neg, j, rule in ranked]


def root_split_proportions(tree, dataset, ids):
    """Fractions of ``ids`` routed left and right by the root split."""
    if tree.root.is_leaf:
        raise TreeError("tree has no root split")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise TreeError("no instances to route")
    go = tree.root.rule.goes_left(dataset.columns[ids, tree.root.rule.feature])
    left = int(go.sum())
    return left / ids.size, (ids.size - left) / ids.size
