"""Accuracy, kappa, cross-validation, the random-subset baseline and the
whole-dataset versus per-subset tree comparison."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cart import fit_tree, node_features, root_feature, root_split_proportions
from .dataset import assign_folds
from .seeding import derive_seed

DEFAULT_FOLDS = 5
MAX_SIZE_REDRAWS = 100


class EvalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``C x C`` counts, rows actual class, columns predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise EvalError("confusion matrix must be square")
        if np.any(counts < 0):
            raise EvalError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, actual, predicted, class_count):
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(counts, (np.asarray(actual) - 1, np.asarray(predicted) - 1), 1)
        return cls(counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


def accuracy(confusion):
    if confusion.total == 0:
        raise EvalError("empty confusion matrix")
    return float(np.trace(confusion.counts) / confusion.total)


def kappa(confusion):
    """Cohen's kappa; 0 when chance agreement is already 1."""
    n = confusion.total
    if n == 0:
        raise EvalError("empty confusion matrix")
    p_o = np.trace(confusion.counts) / n
    p_e = float((confusion.counts.sum(axis=1) / n) @ (confusion.counts.sum(axis=0) / n))
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass(frozen=True)
class CVResult:
    fold_scores: tuple
    confusion: ConfusionMatrix = None

    @property
    def mean(self):
        return sum(self.fold_scores) / len(self.fold_scores)


def cross_validate(ids, folds, trainer, scorer):
    """Train on each fold's complement within ``ids`` and score on the fold.

    ``trainer(train_ids) -> model`` and ``scorer(model, test_ids) -> float``.
    Folds with no members among ``ids`` are skipped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    inside = set(ids.tolist())
    scores = []
    for f in range(folds.k):
        test = np.array([i for i in folds.members(f) if i in inside], dtype=np.int64)
        if test.size == 0:
            continue
        train = np.array([i for i in folds.complement(f) if i in inside], dtype=np.int64)
        if train.size == 0:
            raise EvalError(f"fold {f} leaves no training instances")
        scores.append(float(scorer(trainer(train), test)))
    if not scores:
        raise EvalError("no fold contains any of the ids")
    return CVResult(tuple(scores))


def tree_cv(dataset, ids, cp, folds=DEFAULT_FOLDS, seed=0, min_node=20, criterion="gini"):
    """Stratified k-fold CV of a tree on ``ids``, with pooled out-of-fold confusion.

    Fewer than ``folds`` instances fall back to leave-one-out; fewer than two
    give ``None``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        return None
    k = min(folds, ids.size)
    assignment = assign_folds(ids, k, seed, dataset.labels[ids])
    pooled = np.zeros((dataset.class_count, dataset.class_count), dtype=np.int64)

    def train(train_ids):
        return fit_tree(dataset, train_ids, cp=cp, min_node=min_node, criterion=criterion)

    def score(tree, test_ids):
        pred = tree.predict_ids(dataset, test_ids)
        truth = dataset.labels[test_ids]
        np.add.at(pooled, (truth - 1, pred - 1), 1)
        return float(np.mean(pred == truth))

    res = cross_validate(ids, assignment, train, score)
    return CVResult(res.fold_scores, ConfusionMatrix(pooled))


# -- random baseline ---------------------------------------------------------

@dataclass(frozen=True)
class BaselineSpec:
    mean: float
    std: float
    count: int
    rng_seed: int = 0

    @classmethod
    def from_result(cls, result, rng_seed=0):
        sizes = np.array(result.sizes(), dtype=float)
        if sizes.size == 0:
            raise EvalError("result has no subsets")
        std = float(np.std(sizes, ddof=1)) if sizes.size > 1 else 0.0
        return cls(float(np.mean(sizes)), std, int(sizes.size), rng_seed)

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "count": self.count, "rng_seed": self.rng_seed}


def random_baseline(pool, spec, rng=None):
    """Disjoint random subsets of ``pool`` whose sizes follow ``Normal(mean, std)``.

    Sizes are rounded and clamped to ``[2, pool size]``.  A size that does not
    fit in what is left of the pool (keeping two instances for each subset
    still to draw) is redrawn, and clamped after ``MAX_SIZE_REDRAWS`` tries.
    """
    pool = np.asarray(pool, dtype=np.int64)
    if spec.count < 1:
        raise EvalError("baseline needs at least one subset")
    if pool.size < 2 * spec.count:
        raise EvalError(f"pool of {pool.size} too small for {spec.count} subsets of at least 2")
    rng = np.random.default_rng(spec.rng_seed) if rng is None else rng

    def draw():
        return int(np.clip(np.rint(rng.normal(spec.mean, spec.std)), 2, pool.size))

    order = rng.permutation(pool)
    subsets, start = [], 0
    for i in range(spec.count):
        room = pool.size - start - 2 * (spec.count - i - 1)
        size = draw()
        tries = 0
        while size > room and tries < MAX_SIZE_REDRAWS:
            size = draw()
            tries += 1
        size = min(size, room)
        subsets.append(np.sort(order[start:start + size]))
        start += size
    return subsets


def baseline_subsets(dataset, result, seed):
    """The random baseline matched to ``result``, drawn from the whole dataset."""
    spec = BaselineSpec.from_result(result, derive_seed(seed, "baseline"))
    return spec, random_baseline(np.arange(dataset.m), spec)


# -- report ------------------------------------------------------------------

def _tree_row(dataset, tree, ids):
    ids = np.asarray(ids, dtype=np.int64)
    pred = tree.predict_ids(dataset, ids)
    left = right = None
    if not tree.root.is_leaf:
        left, right = root_split_proportions(tree, dataset, ids)
    return {
        "node_count": tree.node_count,
        "train_accuracy": float(np.mean(pred == dataset.labels[ids])),
        "root_feature": root_feature(tree),
        "root_left": left,
        "root_right": right,
        "node_features": sorted(node_features(tree)),
    }


def _cv_fields(cv):
    if cv is None:
        return {"cv_accuracy": None, "cv_folds": 0, "kappa": None}
    return {"cv_accuracy": cv.mean, "cv_folds": len(cv.fold_scores), "kappa": kappa(cv.confusion)}


def _mean(values):
    return float(np.mean(values)) if values else None


def subsets_to_target(sizes, m, target):
    """Number of subsets (in discovery order) whose union first reaches ``target``."""
    covered = 0
    for i, s in enumerate(sizes):
        covered += s
        if covered / m >= target:
            return i + 1
    return None


def summarize(rows, result):
    """Aggregates of one cp's per-subset rows; a pure function of the rows and result."""
    cvs = [r["cv_accuracy"] for r in rows if r["cv_accuracy"] is not None]
    sizes = [r["size"] for r in rows]
    target = result.config.get("coverage_target", 0.9) if result.config else 0.9
    return {
        "subset_count": len(rows),
        "scored_subsets": len(cvs),
        "mean_cv_accuracy": _mean(cvs),
        "cv_variance": float(np.var(cvs, ddof=1)) if len(cvs) > 1 else None,
        "mean_size": _mean(sizes),
        "mean_node_count": _mean([r["node_count"] for r in rows]),
        "subsets_to_target": subsets_to_target(sizes, result.m, target),
        "coverage": sum(sizes) / result.m,
        "remainder_size": result.m - sum(sizes),
    }


@dataclass
class ExperimentReport:
    meta: dict
    whole: list
    subsets: list
    summary: list
    feature_usage: list
    baseline: list
    baseline_spec: dict = None

    def to_dict(self):
        return {"meta": self.meta, "summary": self.summary, "whole": self.whole, "subsets": self.subsets,
                "feature_usage": self.feature_usage, "baseline_spec": self.baseline_spec,
                "baseline": self.baseline}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def plot_series(self):
        """Subset index against size and CV accuracy, with the baseline overlaid."""
        sizes = [{"subset": r["subset"], "size": r["size"]}
                 for r in self.subsets if r["cp"] == self.meta["cps"][0]]
        cv = [{"cp": r["cp"], "subset": r["subset"], "cv_accuracy": r["cv_accuracy"]} for r in self.subsets]
        overlay = []
        for cp in self.meta["cps"]:
            alg = [r["cv_accuracy"] for r in self.subsets if r["cp"] == cp]
            base = [r["cv_accuracy"] for r in self.baseline if r["cp"] == cp]
            for i in range(max(len(alg), len(base))):
                overlay.append({"cp": cp, "index": i + 1,
                                "algorithm_cv_accuracy": alg[i] if i < len(alg) else None,
                                "baseline_cv_accuracy": base[i] if i < len(base) else None})
        return {"plot_subset_size.csv": sizes, "plot_subset_cv.csv": cv, "plot_baseline_overlay.csv": overlay}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        tables = {"summary.csv": self.summary, "whole.csv": self.whole, "subsets.csv": self.subsets,
                  "feature_usage.csv": self.feature_usage}
        if self.baseline:
            tables["baseline.csv"] = self.baseline
        tables.update(self.plot_series())
        for name, rows in tables.items():
            write_table(out / name, rows)
        return sorted(tables) + ["report.json"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def write_table(path, rows):
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_cell(v) for v in r.values()])


def _usage_row(cp, name, tree, feature_names):
    used = node_features(tree)
    root = root_feature(tree)
    row = {"cp": cp, "model": name}
    for f in feature_names:
        row[f] = "root" if f == root else ("node" if f in used else "")
    return row


def compare_whole_vs_subsets(dataset, result, cps, folds=DEFAULT_FOLDS, seed=0, min_node=20,
                             criterion="gini", baseline=True):
    """Whole-dataset tree against one tree per discovered subset, for each cp.

    The whole-dataset tree used on a subset's members is the one trained on all
    instances, so that column is a training-set figure.  ``baseline`` adds
    random subsets with a matched size distribution.
    """
    if result.dataset_hash and result.dataset_hash != dataset.content_hash():
        raise EvalError("result was computed on a different dataset")
    if result.m != dataset.m:
        raise EvalError("result size does not match the dataset")
    cps = [float(c) for c in cps]
    if not cps:
        raise EvalError("at least one cp value is required")
    all_ids = np.arange(dataset.m)
    remainder = np.asarray(result.remainder, dtype=np.int64)
    spec, base_sets = None, []
    if baseline and result.subsets:
        spec, base_sets = baseline_subsets(dataset, result, seed)

    whole_rows, subset_rows, summary, usage, base_rows = [], [], [], [], []
    for cp in cps:
        def fit(ids):
            return fit_tree(dataset, ids, cp=cp, min_node=min_node, criterion=criterion)

        whole_tree = fit(all_ids)
        w = {"cp": cp}
        w.update(_tree_row(dataset, whole_tree, all_ids))
        w.update(_cv_fields(tree_cv(dataset, all_ids, cp, folds, derive_seed(seed, "whole-folds"),
                                    min_node, criterion)))
        w["remainder_size"] = int(remainder.size)
        w["remainder_accuracy"] = (float(np.mean(whole_tree.predict_ids(dataset, remainder)
                                                 == dataset.labels[remainder])) if remainder.size else None)
        whole_rows.append(w)
        usage.append(_usage_row(cp, "whole", whole_tree, dataset.feature_names))

        rows = []
        for i, s in enumerate(result.subsets):
            ids = np.asarray(s.members, dtype=np.int64)
            tree = fit(ids)
            r = {"cp": cp, "subset": i + 1, "size": int(ids.size),
                 "class_count": int(np.unique(dataset.labels[ids]).size)}
            r.update(_tree_row(dataset, tree, ids))
            r.update(_cv_fields(tree_cv(dataset, ids, cp, folds, derive_seed(seed, "subset-folds", i),
                                        min_node, criterion)))
            conf = ConfusionMatrix.from_labels(dataset.labels[ids], whole_tree.predict_ids(dataset, ids),
                                               dataset.class_count)
            r["whole_accuracy"] = accuracy(conf)
            r["whole_kappa"] = kappa(conf)
            rows.append(r)
            usage.append(_usage_row(cp, str(i + 1), tree, dataset.feature_names))
        subset_rows.extend(rows)

        brows = []
        for i, ids in enumerate(base_sets):
            tree = fit(ids)
            cv = tree_cv(dataset, ids, cp, folds, derive_seed(seed, "baseline-folds", i), min_node, criterion)
            brows.append({"cp": cp, "index": i + 1, "size": int(ids.size), "node_count": tree.node_count,
                          "cv_accuracy": None if cv is None else cv.mean})
        base_rows.extend(brows)

        agg = {"cp": cp, "whole_node_count": w["node_count"], "whole_cv_accuracy": w["cv_accuracy"],
               "whole_kappa": w["kappa"], "remainder_whole_accuracy": w["remainder_accuracy"]}
        agg.update(summarize(rows, result))
        bcv = [b["cv_accuracy"] for b in brows if b["cv_accuracy"] is not None]
        agg["baseline_mean_cv_accuracy"] = _mean(bcv)
        agg["baseline_mean_node_count"] = _mean([b["node_count"] for b in brows])
        summary.append(agg)

    meta = {"dataset_hash": dataset.content_hash(), "m": dataset.m, "cps": cps, "folds": folds,
            "seed": int(seed), "min_node": min_node, "criterion": criterion,
            "stop_reason": result.stop_reason, "subset_count": len(result.subsets)}
    return ExperimentReport(meta, whole_rows, subset_rows, summary, usage, base_rows,
                            None if spec is None else spec.to_dict())
