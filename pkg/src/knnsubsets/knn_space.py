"""Normalised Euclidean distance, exact neighbour search over an active
reference pool and a leave-self-out majority-vote KNN classifier."""

import numpy as np
from scipy.spatial.distance import cdist

DEFAULT_CACHE_LIMIT = 10_000


class KnnError(ValueError):
    pass


def distance(a, b):
    """``sqrt(sum_j (a_j - b_j)^2 / |f|)`` for two encoded feature vectors."""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    b = np.asarray(b, dtype=float).reshape(1, -1)
    if a.shape != b.shape:
        raise KnnError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] < 1:
        raise KnnError("vectors must have at least one feature")
    return float(np.sqrt(cdist(a, b, "sqeuclidean")[0, 0] / a.shape[1]))


def pairwise_distances(X, Y=None):
    """All-pairs :func:`distance`; bitwise identical to calling it pair by pair."""
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    return np.sqrt(cdist(X, Y, "sqeuclidean") / X.shape[1])


def _select_k(dist, k):
    """Positions of the ``k`` smallest entries, ascending, ties by position.

    Positions index an id-sorted reference array, so a tie falls to the lower id.
    """
    kth = np.partition(dist, k - 1)[k - 1]
    cand = np.flatnonzero(dist <= kth)
    order = np.lexsort((cand, dist[cand]))
    return cand[order[:k]]


def _select_k_rows(D, k):
    """Row-wise :func:`_select_k` for a 2-D distance block."""
    n = D.shape[0]
    kth = np.partition(D, k - 1, axis=1)[:, k - 1]
    rows, cols = np.nonzero(D <= kth[:, None])
    order = np.lexsort((cols, D[rows, cols], rows))
    rows, cols = rows[order], cols[order]
    starts = np.searchsorted(rows, np.arange(n))
    rank = np.arange(rows.size) - starts[rows]
    keep = rank < k
    return cols[keep].reshape(n, k)


class DistanceCache:
    """Full distance matrix of a dataset, computed once on first use.

    Above ``limit`` instances nothing is stored and rows are computed on demand.
    """

    def __init__(self, matrix, limit=DEFAULT_CACHE_LIMIT):
        self.matrix = np.asarray(matrix, dtype=float)
        self.limit = limit
        self._full = None

    @property
    def enabled(self):
        return self.matrix.shape[0] <= self.limit

    def block(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self.enabled:
            if self._full is None:
                self._full = pairwise_distances(self.matrix)
                self._full.setflags(write=False)
            return self._full[np.ix_(rows, cols)]
        return pairwise_distances(self.matrix[rows], self.matrix[cols])


class NeighborIndex:
    """Exact neighbour queries restricted to ``reference_ids``.

    The reference ids are kept sorted so that results do not depend on the
    order they were supplied in.  Indexes created with :meth:`restrict` share
    the parent's distance cache.
    """

    def __init__(self, matrix, reference_ids=None, cache=None, cache_limit=DEFAULT_CACHE_LIMIT):
        matrix = np.asarray(matrix, dtype=float)
        self.cache = cache if cache is not None else DistanceCache(matrix, cache_limit)
        if reference_ids is None:
            reference_ids = np.arange(matrix.shape[0])
        ref = np.unique(np.asarray(reference_ids, dtype=np.int64))
        if ref.size and (ref[0] < 0 or ref[-1] >= matrix.shape[0]):
            raise KnnError("reference id outside the dataset")
        self.reference_ids = ref
        self._tables = {}

    @property
    def size(self):
        return self.reference_ids.size

    def restrict(self, ids):
        return NeighborIndex(self.cache.matrix, ids, cache=self.cache)

    def position(self, ids):
        """Positions of reference members within ``reference_ids``."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.reference_ids, ids)
        ok = (pos < self.size) & (self.reference_ids[np.minimum(pos, self.size - 1)] == ids)
        if not np.all(ok):
            raise KnnError("id is not in the reference set")
        return pos

    def contains(self, i):
        pos = np.searchsorted(self.reference_ids, i)
        return bool(pos < self.size and self.reference_ids[pos] == i)

    def neighbors(self, query_id, k):
        """The ``k`` reference ids nearest to ``query_id``, excluding the query itself."""
        query_id = int(query_id)
        if not 0 <= query_id < self.cache.matrix.shape[0]:
            raise KnnError(f"query id {query_id} outside the dataset")
        if k in self._tables and self.contains(query_id):
            return self.reference_ids[self._tables[k][self.position([query_id])[0]]]
        d = self.cache.block([query_id], self.reference_ids)[0].copy()
        available = self.size
        if self.contains(query_id):
            d[self.position([query_id])[0]] = np.inf
            available -= 1
        if not 1 <= k <= available:
            raise KnnError(f"k={k} but only {available} candidate neighbours")
        return self.reference_ids[_select_k(d, k)]

    def neighbor_table(self, k):
        """Neighbour positions (not ids) for every reference member, shape ``(n, k)``."""
        if k in self._tables:
            return self._tables[k]
        if not 1 <= k <= self.size - 1:
            raise KnnError(f"k={k} but only {self.size - 1} candidate neighbours")
        D = np.array(self.cache.block(self.reference_ids, self.reference_ids))
        np.fill_diagonal(D, np.inf)
        table = _select_k_rows(D, k)
        table.setflags(write=False)
        self._tables[k] = table
        return table


def vote(neighbor_labels, class_count):
    """Majority class per row of an ``(n, k)`` label array ordered nearest first.

    A tied vote goes to the tied class whose member appears nearest.
    """
    L = np.atleast_2d(np.asarray(neighbor_labels, dtype=np.int64))
    n, k = L.shape
    rows = np.arange(n)
    counts = np.zeros((n, class_count + 1), dtype=np.int64)
    for j in range(k):
        counts[rows, L[:, j]] += 1
    tied = counts == counts.max(axis=1, keepdims=True)
    first = np.argmax(tied[rows[:, None], L], axis=1)
    return L[rows, first]


class KnnModel:
    """Plain majority-vote KNN over a :class:`NeighborIndex`.

    Predictions for reference members leave the member itself out.
    """

    def __init__(self, index, labels, k, class_count=None):
        self.index = index
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_count = int(self.labels.max()) if class_count is None else class_count
        if index.size == 0:
            raise KnnError("empty reference set")
        if not 1 <= k <= index.size:
            raise KnnError(f"k={k} exceeds reference size {index.size}")
        self.k = k
        self._train = None

    def predict(self, query_id):
        nb = self.index.neighbors(query_id, self.k)
        return int(vote(self.labels[nb][None, :], self.class_count)[0])

    def training_predictions(self):
        """Leave-self-out predictions aligned with ``index.reference_ids``."""
        if self._train is None:
            table = self.index.neighbor_table(self.k)
            nb_labels = self.labels[self.index.reference_ids[table]]
            self._train = vote(nb_labels, self.class_count)
            self._train.setflags(write=False)
        return self._train

    def positive_hits(self):
        ref = self.index.reference_ids
        return ref[self.training_predictions() == self.labels[ref]]

    def hit_mask(self):
        """Boolean per reference position: correctly classified leaving itself out."""
        ref = self.index.reference_ids
        return self.training_predictions() == self.labels[ref]


def knn_predict(model, query_id):
    return model.predict(query_id)


def positive_hits(model):
    return set(int(i) for i in model.positive_hits())


def neighbors(index, query_id, k):
    return [int(i) for i in index.neighbors(query_id, k)]
