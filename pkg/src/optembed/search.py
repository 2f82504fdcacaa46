"""Field-wise embedding-dimension search over a trained supernet.

A candidate is a vector ``d`` of kept leading columns per field. Candidates
inherit the supernet's weights, so evaluating one is a forward pass over the
validation set. The search keeps a top-k of the best masks ever seen and
breeds each new population from it by crossover and mutation.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import auc
from .model import apply_masks


@dataclass
class Candidate:
    dims: np.ndarray
    fitness: float = float("nan")
    order: int = -1  # discovery index; breaks fitness ties

    @property
    def key(self):
        return tuple(int(d) for d in self.dims)


@dataclass
class SearchParams:
    n_mutation: int = 10
    n_crossover: int = 10
    iterations: int = 30
    prob: float = 0.1
    topk: int = 15
    max_redraws: int = 10


@dataclass
class SearchResult:
    best: Candidate
    topk: list
    best_history: list  # best-ever fitness after each evaluation round
    log: list = field(default_factory=list)  # (round, index, dims, fitness)

    def write_log(self, path):
        with open(path, "w") as fh:
            for rnd, i, dims, fit in self.log:
                rec = {"iteration": rnd, "candidate": i, "mask": ",".join(map(str, dims)),
                       "fitness": fit}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def sample_dim_mask(rng, n, D):
    if D < 1:
        raise ValueError("D must be at least 1")
    return rng.integers(1, D + 1, size=n, dtype=np.int64)


def crossover(a, b, rng, cut=None):
    """Single-point crossover: ``a`` before the cut, ``b`` from it on."""
    a = np.asarray(getattr(a, "dims", a), dtype=np.int64)
    b = np.asarray(getattr(b, "dims", b), dtype=np.int64)
    n = len(a)
    if n < 2 or len(b) != n:
        raise ValueError(f"crossover needs two masks of equal length >= 2, got {len(a)} and {len(b)}")
    p = int(rng.integers(1, n)) if cut is None else int(cut)
    return np.concatenate([a[:p], b[p:]])


def mutate(c, rng, D, prob=0.1):
    """Each position is redrawn uniformly from 1..D with probability ``prob``."""
    d = np.array(getattr(c, "dims", c), dtype=np.int64)
    hit = rng.random(len(d)) < prob
    fresh = rng.integers(1, D + 1, size=len(d), dtype=np.int64)
    d[hit] = fresh[hit]
    return d


class SupernetEvaluator:
    """Validation AUC of a dimension mask under frozen supernet weights."""

    def __init__(self, model, E, m_e, schema, val, batch_size=4096):
        if len(val) == 0:
            raise ValueError("empty validation set")
        full = np.full(schema.n_fields, E.shape[1], dtype=np.int64)
        self.table = apply_masks(E, m_e, full, schema)
        self.table.setflags(write=False)
        self.model = model
        self.val = val
        self.batch_size = batch_size

    def __call__(self, dims):
        probs = self.model.predict(self.table, self.val.idx, np.asarray(dims, dtype=np.int64),
                                   batch_size=self.batch_size)
        return auc(self.val.labels, probs)


def evaluate_candidate(model, E, m_e, schema, dims, val, batch_size=4096):
    return SupernetEvaluator(model, E, m_e, schema, val, batch_size)(dims)


def evolutionary_search(fitness_fn, n, D, params, rng):
    """Maximise ``fitness_fn(dims)`` over ``{1..D}^n``.

    Each round evaluates the current population, merges it into the top-k
    (deduplicated by mask, ties broken by earlier discovery) and breeds
    ``n_crossover`` + ``n_mutation`` children from uniformly chosen top-k
    members. A final pass evaluates the last population.
    """
    cache = {}
    counter = [0]
    log = []
    topk = []
    history = []

    def evaluate(pop, rnd):
        for i, cand in enumerate(pop):
            if cand.key not in cache:
                cache[cand.key] = (float(fitness_fn(cand.dims)), counter[0])
                counter[0] += 1
            cand.fitness, cand.order = cache[cand.key]
            log.append((rnd, i, cand.key, cand.fitness))

    def merge(pop):
        seen = {c.key: c for c in topk}
        for c in pop:
            seen.setdefault(c.key, c)
        ranked = sorted(seen.values(), key=lambda c: (-c.fitness, c.order))
        topk[:] = ranked[:params.topk]
        history.append(topk[0].fitness)

    def fresh(make, taken):
        child = make()
        for _ in range(params.max_redraws):
            if tuple(child) not in taken:
                break
            child = make()
        taken.add(tuple(child))
        return Candidate(child)

    pop = [Candidate(sample_dim_mask(rng, n, D)) for _ in range(params.n_mutation + params.n_crossover)]
    for rnd in range(params.iterations):
        evaluate(pop, rnd)
        merge(pop)
        taken = {c.key for c in topk}
        children = []

        def cross():
            if len(topk) >= 2:
                i, j = rng.choice(len(topk), size=2, replace=False)
            else:
                i = j = 0
            return crossover(topk[i], topk[j], rng)

        def mut():
            return mutate(topk[int(rng.integers(len(topk)))], rng, D, params.prob)

        # single-point crossover is undefined for one field; mutate instead
        breed = cross if n >= 2 else mut
        for _ in range(params.n_crossover):
            children.append(fresh(breed, taken))
        for _ in range(params.n_mutation):
            children.append(fresh(mut, taken))
        pop = children
    evaluate(pop, params.iterations)
    merge(pop)
    return SearchResult(topk[0], list(topk), history, log)
