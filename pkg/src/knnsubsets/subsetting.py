"""Bottom-up discovery of disjoint subsets of similar, correctly classified
instances in KNN space.

Each outer iteration fits a KNN model on the active pool, seeds candidate
subsets from a random share of its positive hits, grows every seed to closure
while dropping misclassified neighbours, scores the candidates by KNN error
plus a size penalty and removes the best one from the pool.
"""

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .knn_space import KnnModel, NeighborIndex

log = logging.getLogger(__name__)

PAPER_K_SCHEDULE = ((0.0, 3), (0.25, 5), (0.70, 7), (0.85, 9))


class ConfigError(ValueError):
    pass


class DiscoveryExhausted(RuntimeError):
    """No seed is available in the active pool."""


@dataclass(frozen=True)
class SubsettingConfig:
    sst: int = 250
    alpha_l: float = 0.125
    alpha_u: float = 0.3
    k_schedule: tuple = PAPER_K_SCHEDULE
    coverage_target: float = 0.90
    seed_fraction: float = 0.10
    rng_seed: int = 0
    accuracy_source: str = "subset"

    def __post_init__(self):
        sched = tuple((float(t), int(k)) for t, k in self.k_schedule)
        object.__setattr__(self, "k_schedule", sched)
        self.validate()

    def validate(self):
        if self.sst < 1:
            raise ConfigError("sst must be a positive instance count")
        if self.alpha_l < 0 or self.alpha_u < 0:
            raise ConfigError("alpha_l and alpha_u must be non-negative")
        if not 0 < self.coverage_target <= 1:
            raise ConfigError("coverage_target must lie in (0, 1]")
        if not 0 < self.seed_fraction <= 1:
            raise ConfigError("seed_fraction must lie in (0, 1]")
        if not self.k_schedule:
            raise ConfigError("k_schedule is empty")
        thresholds = [t for t, _ in self.k_schedule]
        ks = [k for _, k in self.k_schedule]
        if thresholds[0] != 0.0:
            raise ConfigError("k_schedule must start at coverage 0")
        if any(not 0 <= t < 1 for t in thresholds):
            raise ConfigError("k_schedule thresholds must lie in [0, 1)")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("k_schedule thresholds must be strictly increasing")
        if ks[0] < 1 or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("k_schedule K values must be positive and strictly increasing")
        if self.accuracy_source not in ("subset", "pool"):
            raise ConfigError("accuracy_source must be 'subset' or 'pool'")

    def k_for(self, coverage):
        k = self.k_schedule[0][1]
        for threshold, value in self.k_schedule:
            if threshold <= coverage:
                k = value
        return k

    def to_dict(self):
        d = asdict(self)
        d["k_schedule"] = [list(p) for p in self.k_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown subsetting keys {sorted(unknown)}")
        d = dict(d)
        if "k_schedule" in d:
            d["k_schedule"] = tuple(tuple(p) for p in d["k_schedule"])
        return cls(**d)


def penalty(size, sst, alpha_l, alpha_u):
    """Piecewise-linear size penalty, zero at ``size == sst``."""
    if size < 1:
        raise ValueError("subset size must be at least 1")
    if size <= sst:
        return alpha_l * (sst - size)
    return alpha_u * (size - sst)


def regularized_error(size, accuracy_percent, config):
    return (100.0 - accuracy_percent) + penalty(size, config.sst, config.alpha_l, config.alpha_u)


@dataclass
class SubsetCandidate:
    members: tuple
    seed_id: int
    k_used: int
    knn_accuracy: float
    penalty: float
    regularized_error: float
    class_histogram: tuple
    distinct_candidates: int = field(default=0, compare=False)

    @property
    def size(self):
        return len(self.members)

    def sort_key(self):
        return (self.regularized_error, -self.size, self.seed_id)

    def to_dict(self, index=None):
        d = {"index": index, "seed_id": self.seed_id, "k_used": self.k_used,
             "member_ids": list(self.members), "size": self.size,
             "class_histogram": list(self.class_histogram), "knn_accuracy": self.knn_accuracy,
             "penalty": self.penalty, "regularized_error": self.regularized_error}
        if index is None:
            del d["index"]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(i) for i in d["member_ids"]), int(d["seed_id"]), int(d["k_used"]),
                   float(d["knn_accuracy"]), float(d["penalty"]), float(d["regularized_error"]),
                   tuple(int(c) for c in d["class_histogram"]))


def score_candidate(candidate, config):
    """Fill ``penalty`` and ``regularized_error`` from size and KNN accuracy; returns the error."""
    candidate.penalty = penalty(candidate.size, config.sst, config.alpha_l, config.alpha_u)
    candidate.regularized_error = (100.0 - candidate.knn_accuracy) + candidate.penalty
    return candidate.regularized_error


def grow_closure(seed, neighbors_of, is_hit):
    """Grow ``seed`` through neighbour lists, keeping only hits, until nothing new appears.

    ``neighbors_of(i)`` yields the neighbours fetched for member ``i`` and
    ``is_hit(j)`` tells whether ``j`` survives the elimination step.
    """
    members = {seed}
    frontier = deque([seed])
    while frontier:
        i = frontier.popleft()
        for j in neighbors_of(i):
            if j not in members and is_hit(j):
                members.add(j)
                frontier.append(j)
    return members


class PoolModel:
    """KNN model of one outer iteration together with its hit mask."""

    def __init__(self, dataset, pool, k, base_index=None):
        base = NeighborIndex(dataset.matrix) if base_index is None else base_index
        self.index = base.restrict(pool)
        self.labels = dataset.labels
        self.class_count = dataset.class_count
        self.model = KnnModel(self.index, dataset.labels, k, dataset.class_count)
        self.k = k
        self.hit = self.model.hit_mask()

    @property
    def pool(self):
        return self.index.reference_ids

    def hits(self):
        return self.pool[self.hit]

    def is_hit(self, i):
        return bool(self.hit[self.index.position([i])[0]])

    def neighbor_ids(self, i, k=None):
        k = self.k if k is None else k
        table = self.index.neighbor_table(k)
        return self.pool[table[self.index.position([i])[0]]]


def grow_subset(seed, pool_model, k=None):
    """Closure of ``seed`` under K-neighbour expansion with misclassification elimination."""
    k = pool_model.k if k is None else k
    if not pool_model.is_hit(seed):
        raise ValueError(f"seed {seed} is not a positive hit")
    table = pool_model.index.neighbor_table(k)
    pool = pool_model.pool
    hit = pool_model.hit
    pos = {int(i): p for p, i in enumerate(pool)}
    members = grow_closure(pos[int(seed)], lambda p: table[p], lambda p: hit[p])
    return set(int(pool[p]) for p in members)


def subset_knn_accuracy(index, members, labels, k, class_count):
    """Leave-self-out KNN training accuracy (percent) of a model fitted on ``members`` alone."""
    members = np.asarray(sorted(members), dtype=np.int64)
    if members.size < 2:
        return 100.0
    sub = index.restrict(members)
    model = KnnModel(sub, labels, min(k, members.size - 1), class_count)
    return 100.0 * float(model.hit_mask().mean())


def discover_next_subset(dataset, pool, config, k, rng, base_index=None, pool_model=None):
    """Best-scoring subset grown from a random share of the pool's positive hits."""
    pool = np.unique(np.asarray(pool, dtype=np.int64))
    if pool.size <= k:
        raise DiscoveryExhausted(f"pool of {pool.size} cannot support K={k}")
    pm = pool_model or PoolModel(dataset, pool, k, base_index)
    hits = pm.hits()
    if hits.size == 0:
        raise DiscoveryExhausted("no positive hits in the active pool")
    n_seeds = math.ceil(config.seed_fraction * hits.size)
    seeds = np.sort(rng.choice(hits, size=n_seeds, replace=False))

    table = pm.index.neighbor_table(k)
    hit = pm.hit
    position = pm.index.position(seeds)
    scored = {}
    best = None
    for seed, p in zip(seeds, position):
        members = grow_closure(int(p), lambda q: table[q], lambda q: hit[q])
        key = tuple(sorted(members))
        if key not in scored:
            ids = pm.pool[list(key)]
            if config.accuracy_source == "subset":
                acc = subset_knn_accuracy(pm.index, ids, dataset.labels, k, dataset.class_count)
            else:
                acc = 100.0 * float(hit[list(key)].mean())
            scored[key] = (ids, acc)
        ids, acc = scored[key]
        cand = SubsetCandidate(tuple(int(i) for i in ids), int(seed), k, acc, 0.0, 0.0,
                               tuple(int(c) for c in dataset.class_histogram(ids)))
        score_candidate(cand, config)
        if best is None or cand.sort_key() < best.sort_key():
            best = cand
    best.distinct_candidates = len(scored)
    return best


@dataclass
class SubsettingResult:
    subsets: list
    remainder: tuple
    iterations: list
    stop_reason: str
    m: int
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""

    @property
    def coverage(self):
        return 1.0 - len(self.remainder) / self.m

    def sizes(self):
        return [s.size for s in self.subsets]

    def to_dict(self):
        return {
            "dataset_hash": self.dataset_hash,
            "m": self.m,
            "config": self.config,
            "subsets": [s.to_dict(i + 1) for i, s in enumerate(self.subsets)],
            "remainder_ids": list(self.remainder),
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls([SubsetCandidate.from_dict(s) for s in d["subsets"]],
                   tuple(int(i) for i in d["remainder_ids"]), list(d["iterations"]),
                   d["stop_reason"], int(d["m"]), dict(d.get("config", {})), d.get("dataset_hash", ""))

    def validate(self):
        """Raise if subsets overlap or subsets plus remainder do not partition the ids."""
        seen = np.zeros(self.m, dtype=np.int64)
        for s in self.subsets:
            if not s.members:
                raise ValueError("empty subset")
            np.add.at(seen, np.asarray(s.members), 1)
        np.add.at(seen, np.asarray(self.remainder, dtype=np.int64), 1)
        if not np.all(seen == 1):
            raise ValueError("subsets and remainder do not partition the instance ids")


def run(dataset, config):
    """Discover subsets until the coverage target is met or the pool is exhausted."""
    config.validate()
    m = dataset.m
    rng = np.random.default_rng(config.rng_seed)
    base = NeighborIndex(dataset.matrix)
    pool = np.arange(m)
    subsets, iterations = [], []
    stop = "coverage_target"
    while True:
        coverage = (m - pool.size) / m
        if coverage >= config.coverage_target:
            break
        k = config.k_for(coverage)
        if pool.size < k + 1:
            stop = "pool_smaller_than_k"
            log.info("stopping: pool of %d too small for K=%d", pool.size, k)
            break
        pm = PoolModel(dataset, pool, k, base)
        try:
            best = discover_next_subset(dataset, pool, config, k, rng, pool_model=pm)
        except DiscoveryExhausted as exc:
            stop = "no_positive_hits"
            log.info("stopping: %s", exc)
            break
        subsets.append(best)
        pool = np.setdiff1d(pool, np.asarray(best.members), assume_unique=True)
        iterations.append({
            "iteration": len(subsets), "k": k, "pool_size": int(pm.pool.size),
            "positive_hits": int(pm.hit.sum()), "seeds": math.ceil(config.seed_fraction * int(pm.hit.sum())),
            "distinct_candidates": best.distinct_candidates,
            "coverage_before": coverage, "coverage_after": (m - pool.size) / m,
            "winner_size": best.size, "winner_error": best.regularized_error,
        })
        log.debug("subset %d: size %d, K=%d, coverage %.3f", len(subsets), best.size, k, (m - pool.size) / m)
    return SubsettingResult(subsets, tuple(int(i) for i in pool), iterations, stop, m,
                            config.to_dict(), dataset.content_hash())
