"""Tabular ingestion, encoding for distance computations, target binning,
cohort filtering, synthetic planted-structure data and fold assignment."""

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

KINDS = ("numeric", "categorical", "ordinal")


class DatasetError(ValueError):
    """Raised for malformed input tables and invalid dataset operations."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "numeric"
    categories: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        cats = tuple(str(c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        if self.kind == "numeric" and cats:
            raise DatasetError(f"feature {self.name!r}: numeric features take no categories")
        if self.kind != "numeric" and not cats:
            raise DatasetError(f"feature {self.name!r}: {self.kind} feature needs categories")
        if len(set(cats)) != len(cats):
            raise DatasetError(f"feature {self.name!r}: duplicate category labels")

    @property
    def is_categorical(self):
        return self.kind == "categorical"

    def code(self, value):
        try:
            return self.categories.index(value)
        except ValueError:
            raise KeyError(value) from None

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind}
        if self.categories:
            out["categories"] = list(self.categories)
        return out

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"name", "kind", "categories"}
        if unknown:
            raise DatasetError(f"feature spec has unknown keys {sorted(unknown)}")
        return cls(d["name"], d.get("kind", "numeric"), tuple(d.get("categories", ())))


def read_feature_specs(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc.get("features", [])
    return [FeatureSpec.from_dict(d) for d in doc]


def write_feature_specs(specs, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump([s.to_dict() for s in specs], fh, indent=2)
        fh.write("\n")


def encode_columns(features, columns, standardize=True):
    """Distance encoding of the per-feature value columns.

    Numeric columns are z-scored with the population standard deviation
    (constant columns become 0), ordinal codes are kept as integers and
    categorical codes are expanded one-hot.  Returns ``(matrix, names)``.
    """
    m = columns.shape[0]
    blocks, names = [], []
    for j, spec in enumerate(features):
        col = columns[:, j]
        if spec.kind == "numeric":
            if standardize:
                mean = col.mean()
                std = col.std()
                col = (col - mean) / std if std > 0 else np.zeros(m)
            blocks.append(col[:, None])
            names.append(spec.name)
        elif spec.kind == "ordinal":
            blocks.append(col[:, None])
            names.append(spec.name)
        else:
            onehot = np.zeros((m, len(spec.categories)))
            onehot[np.arange(m), col.astype(int)] = 1.0
            blocks.append(onehot)
            names.extend(f"{spec.name}={c}" for c in spec.categories)
    matrix = np.hstack(blocks) if blocks else np.zeros((m, 0))
    return np.ascontiguousarray(matrix, dtype=float), tuple(names)


@dataclass(frozen=True, eq=False)
class Dataset:
    """The instance universe: feature columns, distance encoding and labels.

    ``columns`` holds one column per feature (raw numeric values, 0-based
    category codes) and is what the trees split on; ``matrix`` is the encoded
    form used for distances.  Labels are class indices in ``1..class_count``.
    """

    features: tuple
    columns: np.ndarray
    labels: np.ndarray
    class_count: int
    standardize: bool = True
    class_names: tuple = ()
    original_ids: np.ndarray = None
    raw_rows: tuple = None
    matrix: np.ndarray = field(init=False, repr=False)
    encoded_names: tuple = field(init=False, repr=False)

    def __post_init__(self):
        features = tuple(self.features)
        columns = np.asarray(self.columns, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        m = labels.shape[0]
        if m < 1:
            raise DatasetError("dataset is empty")
        if columns.shape != (m, len(features)):
            raise DatasetError(f"columns shape {columns.shape} does not match {m} rows x {len(features)} features")
        if not np.all(np.isfinite(columns)):
            raise DatasetError("feature values must be finite")
        if labels.min() < 1 or labels.max() > self.class_count:
            raise DatasetError(f"labels must lie in [1, {self.class_count}]")
        for j, spec in enumerate(features):
            if spec.kind != "numeric":
                codes = columns[:, j]
                if np.any(codes != np.round(codes)) or codes.min() < 0 or codes.max() >= len(spec.categories):
                    raise DatasetError(f"feature {spec.name!r}: category codes out of range")
        original = np.arange(m) if self.original_ids is None else np.asarray(self.original_ids, dtype=np.int64)
        matrix, names = encode_columns(features, columns, self.standardize)
        for name, value in (("features", features), ("columns", columns), ("labels", labels),
                            ("original_ids", original), ("matrix", matrix), ("encoded_names", names),
                            ("class_names", tuple(self.class_names))):
            object.__setattr__(self, name, value)
        for arr in (columns, labels, original, matrix):
            arr.setflags(write=False)

    @property
    def m(self):
        return self.labels.shape[0]

    @property
    def instance_ids(self):
        return np.arange(self.m)

    @property
    def feature_names(self):
        return tuple(f.name for f in self.features)

    def class_histogram(self, ids=None):
        labels = self.labels if ids is None else self.labels[np.asarray(ids, dtype=np.int64)]
        return np.bincount(labels, minlength=self.class_count + 1)[1:]

    def raw_row(self, i):
        if self.raw_rows is not None:
            return dict(self.raw_rows[i])
        row = {}
        for j, spec in enumerate(self.features):
            v = self.columns[i, j]
            row[spec.name] = repr(float(v)) if spec.kind == "numeric" else spec.categories[int(v)]
        return row

    def content_hash(self):
        """SHA-256 over features, values and labels; identifies the data a result was computed on."""
        h = hashlib.sha256()
        h.update(json.dumps([f.to_dict() for f in self.features], sort_keys=True).encode())
        h.update(json.dumps([self.class_count, list(self.class_names), self.standardize]).encode())
        h.update(np.ascontiguousarray(self.columns, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BinningSpec:
    bin_count: int = 4
    lo: float = None
    hi: float = None

    def __post_init__(self):
        if self.bin_count < 2:
            raise DatasetError("bin_count must be at least 2")
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise DatasetError("binning range needs lo < hi")

    def resolved(self, values):
        """Fill a missing range from the observed minimum and maximum."""
        values = np.asarray(values, dtype=float)
        lo = float(values.min()) if self.lo is None else self.lo
        hi = float(values.max()) if self.hi is None else self.hi
        return BinningSpec(self.bin_count, lo, hi)


def bin_target(values, spec):
    """Map each value to one of ``bin_count`` equal-width classes.

    Bins are half-open ``[edge_i, edge_{i+1})`` except the last, which also
    takes ``hi``.  Class 1 is the lowest range.
    """
    if spec.lo is None or spec.hi is None:
        spec = spec.resolved(values)
    lo, hi, b = spec.lo, spec.hi, spec.bin_count
    out = []
    for v in values:
        v = float(v)
        if not lo <= v <= hi:
            raise DatasetError(f"value {v} outside binning range [{lo}, {hi}]")
        out.append(min(int(math.floor(b * (v - lo) / (hi - lo))) + 1, b))
    return out


def _label_classes(raw_labels):
    uniq = sorted(set(raw_labels))
    try:
        uniq = sorted(uniq, key=float)
    except ValueError:
        pass
    return tuple(uniq)


def load_csv(path, specs, label_column, binning=None, standardize=True, label_classes=None):
    """Read a headered CSV into a :class:`Dataset`.

    Rows keep file order and become instance ids ``0..m-1``.  The label column
    is either binned (``binning`` given) or mapped through ``label_classes``;
    by default its distinct values, numerically sorted when possible, become
    classes ``1..C``.  Errors name the offending line and column.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    specs = list(specs)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [s.name for s in specs if s.name not in header]
        if missing:
            raise DatasetError(f"{path}: header lacks feature columns {missing}")
        if label_column not in header:
            raise DatasetError(f"{path}: header lacks label column {label_column!r}")
        rows = list(reader)
    if not rows:
        raise DatasetError(f"{path}: table has no data rows")

    columns = np.empty((len(rows), len(specs)))
    raw_labels = []
    for r, row in enumerate(rows):
        line = r + 2
        if None in row or any(v is None for v in row.values()):
            raise DatasetError(f"{path}: line {line}: wrong number of fields")
        for j, spec in enumerate(specs):
            cell = row[spec.name].strip()
            if cell == "":
                raise DatasetError(f"{path}: line {line}, column {spec.name!r}: missing value")
            if spec.kind == "numeric":
                try:
                    columns[r, j] = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}: line {line}, column {spec.name!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(columns[r, j]):
                    raise DatasetError(f"{path}: line {line}, column {spec.name!r}: non-finite value {cell!r}")
            else:
                try:
                    columns[r, j] = spec.code(cell)
                except KeyError:
                    raise DatasetError(f"{path}: line {line}, column {spec.name!r}: unknown category {cell!r}") from None
        cell = row[label_column].strip()
        if cell == "":
            raise DatasetError(f"{path}: line {line}, column {label_column!r}: missing label")
        raw_labels.append(cell)

    if binning is not None:
        try:
            values = [float(v) for v in raw_labels]
        except ValueError as exc:
            raise DatasetError(f"{path}: label column {label_column!r} is not numeric: {exc}") from None
        labels = bin_target(values, binning.resolved(values))
        class_count = binning.bin_count
        class_names = ()
    else:
        classes = tuple(label_classes) if label_classes is not None else _label_classes(raw_labels)
        lookup = {c: i + 1 for i, c in enumerate(classes)}
        labels = []
        for r, v in enumerate(raw_labels):
            if v not in lookup:
                raise DatasetError(f"{path}: line {r + 2}, column {label_column!r}: unknown class {v!r}")
            labels.append(lookup[v])
        class_count = len(classes)
        class_names = classes
    raw_rows = tuple(tuple(row.items()) for row in rows)
    return Dataset(tuple(specs), columns, np.array(labels), class_count, standardize=standardize,
                   class_names=class_names, raw_rows=raw_rows)


def write_csv(dataset, path, label_column="label"):
    """Write feature values and labels; floats use ``repr`` so reloading is exact."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(dataset.feature_names) + [label_column])
        for i in range(dataset.m):
            row = []
            for j, spec in enumerate(dataset.features):
                v = dataset.columns[i, j]
                row.append(repr(float(v)) if spec.kind == "numeric" else spec.categories[int(v)])
            lab = int(dataset.labels[i])
            row.append(dataset.class_names[lab - 1] if dataset.class_names else lab)
            writer.writerow(row)


def filter_rows(dataset, predicate: Callable[[Mapping[str, str]], bool]):
    """Keep the rows whose raw record satisfies ``predicate``.

    The result is re-encoded over the kept rows and renumbered ``0..m'-1``;
    ``original_ids`` maps back to the source rows.  The class count is kept
    so class indices stay comparable with the source.
    """
    keep = np.array([bool(predicate(dataset.raw_row(i))) for i in range(dataset.m)])
    if not keep.any():
        raise DatasetError("filter removed every row")
    idx = np.flatnonzero(keep)
    raw = None if dataset.raw_rows is None else tuple(dataset.raw_rows[i] for i in idx)
    return Dataset(dataset.features, dataset.columns[idx], dataset.labels[idx], dataset.class_count,
                   standardize=dataset.standardize, class_names=dataset.class_names,
                   original_ids=dataset.original_ids[idx], raw_rows=raw)


# -- synthetic planted local structures --------------------------------------

@dataclass(frozen=True)
class ClusterRule:
    """Ground truth of one planted cluster: its centre and the local labelling rule.

    The rule looks at the sign of ``x[f] - centre[f]`` for each designated
    feature ``f``; the resulting cell index picks a class from ``cell_classes``.
    """

    center: tuple
    rule_features: tuple
    cell_classes: tuple

    def predict(self, x):
        cell = 0
        for f in self.rule_features:
            cell = 2 * cell + int(x[f] > self.center[f])
        return self.cell_classes[cell]

    def to_dict(self):
        return {"center": list(self.center), "rule_features": list(self.rule_features),
                "cell_classes": list(self.cell_classes)}


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    rules: tuple
    cluster_of: np.ndarray
    noisy_ids: np.ndarray
    params: dict

    def ground_truth(self):
        return {
            "parameters": dict(self.params),
            "clusters": [dict(r.to_dict(), size=int((self.cluster_of == c).sum())) for c, r in enumerate(self.rules)],
            "cluster_of": self.cluster_of.tolist(),
            "noisy_ids": self.noisy_ids.tolist(),
        }


def make_local_structures(cluster_count=8, per_cluster_size=375, class_count=4, noise_rate=0.15,
                          rng_seed=0, n_features=6, center_spread=20.0, min_separation=50.0, rule_scale=6.0,
                          lobe_offset=1.5):
    """Gaussian clusters, each labelled by its own rule over 1-2 features.

    Centres are drawn from ``N(0, center_spread^2)`` per feature and rejected
    until all pairs are at least ``min_separation`` apart (raw units, where the
    within-cluster spread is 1 on non-rule features and ``rule_scale`` on the
    cluster's rule features).  Two classes use one rule feature, three or four
    use two.  With ``lobe_offset > 0`` each point is shifted by
    ``+-lobe_offset * rule_scale`` (random sign) along every rule feature,
    which thins out the class boundaries.  A ``noise_rate`` fraction of
    labels is then replaced by a different class drawn uniformly.  Rows are shuffled so ids carry no
    cluster information.
    """
    if cluster_count < 2:
        raise DatasetError("cluster_count must be at least 2")
    if class_count < 2:
        raise DatasetError("class_count must be at least 2")
    if class_count > 4:
        raise DatasetError("local rules over at most two features represent at most 4 classes")
    if per_cluster_size < 1:
        raise DatasetError("per_cluster_size must be positive")
    if not 0 <= noise_rate < 1:
        raise DatasetError("noise_rate must lie in [0, 1)")
    n_rule = 1 if class_count == 2 else 2
    if n_features < n_rule:
        raise DatasetError(f"{class_count} classes need at least {n_rule} features")
    feature_sets = list(itertools.combinations(range(n_features), n_rule))
    n_cells = 2 ** n_rule
    rule_variants = len(feature_sets) * math.factorial(n_cells)
    if cluster_count > rule_variants:
        raise DatasetError(f"only {rule_variants} distinct rules exist for {n_features} features")

    rng = np.random.default_rng(rng_seed)
    for _ in range(10_000):
        centers = rng.normal(0.0, center_spread, size=(cluster_count, n_features))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if dist[np.triu_indices(cluster_count, 1)].min() >= min_separation:
            break
    else:
        raise DatasetError("could not place well-separated cluster centres; lower min_separation")

    order = rng.permutation(len(feature_sets))
    rules = []
    for c in range(cluster_count):
        feats = feature_sets[order[c % len(feature_sets)]]
        base = list(range(1, class_count + 1)) + list(rng.integers(1, class_count + 1, n_cells - class_count))
        cell_classes = tuple(int(v) for v in rng.permutation(base))
        rules.append(ClusterRule(tuple(float(v) for v in centers[c]), tuple(int(f) for f in feats), cell_classes))

    m = cluster_count * per_cluster_size
    cluster_of = np.repeat(np.arange(cluster_count), per_cluster_size)
    scale = np.ones((cluster_count, n_features))
    for c, r in enumerate(rules):
        scale[c, list(r.rule_features)] = rule_scale
    X = centers[cluster_of] + rng.normal(size=(m, n_features)) * scale[cluster_of]
    if lobe_offset:
        for c, r in enumerate(rules):
            rows = np.flatnonzero(cluster_of == c)
            for f in r.rule_features:
                signs = rng.choice([-1.0, 1.0], size=rows.size)
                X[rows, f] += signs * lobe_offset * rule_scale
    labels = np.array([rules[c].predict(x) for c, x in zip(cluster_of, X)], dtype=np.int64)

    n_noisy = int(round(noise_rate * m))
    noisy = np.sort(rng.choice(m, size=n_noisy, replace=False))
    shift = rng.integers(1, class_count, size=n_noisy)
    labels[noisy] = (labels[noisy] - 1 + shift) % class_count + 1

    perm = rng.permutation(m)
    inverse = np.empty(m, dtype=np.int64)
    inverse[perm] = np.arange(m)
    X, labels, cluster_of = X[perm], labels[perm], cluster_of[perm]
    noisy = np.sort(inverse[noisy])

    features = tuple(FeatureSpec(f"x{j}") for j in range(n_features))
    present = np.unique(labels)
    if present.size != class_count:
        raise DatasetError("generated labels miss a class; increase per_cluster_size")
    dataset = Dataset(features, X, labels, class_count)
    params = {"cluster_count": cluster_count, "per_cluster_size": per_cluster_size,
              "class_count": class_count, "noise_rate": noise_rate, "rng_seed": rng_seed,
              "n_features": n_features, "center_spread": center_spread,
              "min_separation": min_separation, "rule_scale": rule_scale, "lobe_offset": lobe_offset}
    return SyntheticData(dataset, tuple(rules), cluster_of, noisy, params)


def synth_local_structures(cluster_count=8, per_cluster_size=375, class_count=4, noise_rate=0.15, rng_seed=0, **kw):
    return make_local_structures(cluster_count, per_cluster_size, class_count, noise_rate, rng_seed, **kw).dataset


# -- folds -------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict
    k: int

    def __post_init__(self):
        sizes = self.sizes()
        if max(sizes) - min(sizes) > 1:
            raise DatasetError("fold sizes differ by more than one")

    def sizes(self):
        counts = [0] * self.k
        for f in self.fold_of.values():
            counts[f] += 1
        return counts

    def members(self, fold):
        return np.array(sorted(i for i, f in self.fold_of.items() if f == fold), dtype=np.int64)

    def complement(self, fold):
        return np.array(sorted(i for i, f in self.fold_of.items() if f != fold), dtype=np.int64)


def assign_folds(ids, k, rng_seed, labels=None):
    """Stratified ``k``-fold assignment of ``ids``.

    Ids are shuffled within each class, classes are laid end to end and dealt
    round-robin, so per-class counts and fold sizes both differ by at most one
    between folds.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if k < 2:
        raise DatasetError("fold count must be at least 2")
    if ids.size < k:
        raise DatasetError(f"cannot split {ids.size} instances into {k} folds")
    rng = np.random.default_rng(rng_seed)
    if labels is None:
        ordered = rng.permutation(ids)
    else:
        labels = np.asarray(labels)
        blocks = [rng.permutation(ids[labels == c]) for c in np.unique(labels)]
        ordered = np.concatenate(blocks)
    return FoldAssignment({int(i): pos % k for pos, i in enumerate(ordered)}, k)


def kfold_split(m, k, rng_seed, labels=None):
    return assign_folds(np.arange(m), k, rng_seed, labels)
