import json

import numpy as np
import pytest

from conftest import make_schema
from optembed.data import EncodedDataset
from optembed.metrics import auc
from optembed.model import CTRModel, apply_masks, full_dims
from optembed.nn import make_rng
from optembed.search import (Candidate, SearchParams, SupernetEvaluator, crossover,
                             evaluate_candidate, evolutionary_search, mutate, sample_dim_mask)
from oracles import pairwise_auc


def test_sample_d1_is_all_ones():
    assert sample_dim_mask(make_rng(0), 6, 1).tolist() == [1] * 6


def test_sample_uniform_within_3_sigma():
    D, N = 8, 10_000
    draws = sample_dim_mask(make_rng(1), N, D)
    counts = np.bincount(draws, minlength=D + 1)[1:]
    sigma = np.sqrt(N * (1 / D) * (1 - 1 / D))
    assert np.all(np.abs(counts - N / D) <= 3 * sigma)


def test_sample_same_seed_same_mask():
    assert np.array_equal(sample_dim_mask(make_rng(5), 8, 8), sample_dim_mask(make_rng(5), 8, 8))


def test_crossover_examples():
    a = np.array([3, 1, 4, 1])
    assert np.array_equal(crossover(a, a, make_rng(0)), a)
    assert crossover([1, 1, 1, 1], [8, 8, 8, 8], make_rng(0), cut=2).tolist() == [1, 1, 8, 8]


def test_crossover_positional_membership():
    r = make_rng(2)
    for _ in range(1000):
        n = int(r.integers(2, 9))
        a = r.integers(1, 9, size=n)
        b = r.integers(1, 9, size=n)
        c = crossover(a, b, r)
        assert np.all((c == a) | (c == b))
        # single cut: some prefix of a followed by the rest of b
        assert any(np.array_equal(c, np.r_[a[:p], b[p:]]) for p in range(1, n))


def test_crossover_needs_two_fields():
    with pytest.raises(ValueError):
        crossover([1], [2], make_rng(0))


def test_mutate_edge_cases():
    c = np.array([2, 5, 7])
    assert np.array_equal(mutate(c, make_rng(0), 8, prob=0.0), c)
    assert mutate([1, 1, 1], make_rng(0), 1, prob=1.0).tolist() == [1, 1, 1]
    assert c.tolist() == [2, 5, 7]  # parent untouched


def test_mutate_change_rate_within_3_sigma():
    r = make_rng(3)
    D, prob, N = 8, 0.1, 10_000
    parent = np.array([4, 4])
    changed = np.array([mutate(parent, r, D, prob) != parent for _ in range(N)])
    p = prob * (1 - 1 / D)
    sigma = np.sqrt(N * p * (1 - p))
    for pos in range(2):
        assert abs(changed[:, pos].sum() - N * p) <= 3 * sigma


def test_mutate_randomized_closed_form():
    r = make_rng(4)
    for _ in range(1000):
        n, D = int(r.integers(1, 9)), int(r.integers(1, 9))
        c = r.integers(1, D + 1, size=n)
        out = mutate(c, r, D, float(r.random()))
        assert out.shape == c.shape and out.min() >= 1 and out.max() <= D


def _tiny_supernet(seed=0):
    r = make_rng(seed)
    s = make_schema([4, 5, 3])
    model = CTRModel(3, 4, (6,), batchnorm=True, rng=r)
    E = r.normal(size=(s.total, 4))
    m_e = (r.random(s.total) < 0.8).astype(int)
    idx = np.stack([r.integers(lo, hi, size=200) for lo, hi in (s.field_range(i) for i in range(3))], 1)
    val = EncodedDataset((r.random(200) < 0.4).astype(np.int8), idx)
    for _ in range(3):
        model.forward(E, idx[:64], train=True)
    return model, E, m_e, s, val


def test_evaluator_is_pure_and_matches_oracle():
    model, E, m_e, s, val = _tiny_supernet()
    ev = SupernetEvaluator(model, E, m_e, s, val)
    dims = np.array([2, 4, 1])
    a = ev(dims)
    assert ev(dims) == a
    assert evaluate_candidate(model, E, m_e, s, dims, val) == a
    probs = model.predict(apply_masks(E, m_e, dims, s), val.idx, dims)
    assert abs(a - pairwise_auc(val.labels, probs)) < 1e-12


def test_full_mask_reproduces_supernet_auc():
    model, E, m_e, s, val = _tiny_supernet(1)
    full = full_dims(3, 4)
    probs = model.predict(apply_masks(E, m_e, full, s), val.idx, full)
    assert SupernetEvaluator(model, E, m_e, s, val)(full) == auc(val.labels, probs)


def test_evaluator_table_is_read_only():
    model, E, m_e, s, val = _tiny_supernet()
    ev = SupernetEvaluator(model, E, m_e, s, val)
    with pytest.raises(ValueError):
        ev.table[0, 0] = 1.0


def test_zero_iterations_returns_best_initial():
    res = evolutionary_search(lambda d: float(np.sum(d)), 4, 6, SearchParams(iterations=0), make_rng(0))
    init = [e for e in res.log if e[0] == 0]
    assert len(init) == 20
    assert res.best.fitness == max(f for *_, f in init)


def test_best_history_non_decreasing_and_topk_unique():
    noisy = make_rng(9)
    table = {}

    def fit(d):
        return table.setdefault(tuple(d), float(noisy.random()))
    res = evolutionary_search(fit, 8, 8, SearchParams(), make_rng(1))
    assert len(res.best_history) == 31
    assert all(b >= a for a, b in zip(res.best_history, res.best_history[1:]))
    keys = [c.key for c in res.topk]
    assert len(keys) == len(set(keys)) == 15
    fits = [c.fitness for c in res.topk]
    assert fits == sorted(fits, reverse=True)


def test_ties_broken_by_discovery_order():
    res = evolutionary_search(lambda d: 1.0, 3, 4, SearchParams(iterations=2), make_rng(0))
    assert res.best.order == 0
    assert [c.order for c in res.topk] == sorted(c.order for c in res.topk)


def test_fitness_cached_per_mask():
    calls = []

    def fit(d):
        calls.append(tuple(d))
        return -float(np.sum(d))
    evolutionary_search(fit, 2, 2, SearchParams(iterations=5), make_rng(0))
    assert len(calls) == len(set(calls)) <= 4


def test_single_field_uses_mutation_only():
    res = evolutionary_search(lambda d: float(d[0]), 1, 5, SearchParams(iterations=10), make_rng(0))
    assert res.best.key == (5,)


def test_search_deterministic_and_log(tmp_path):
    f = lambda d: -float(np.sum((np.asarray(d) - 3) ** 2))  # noqa: E731
    a = evolutionary_search(f, 5, 6, SearchParams(iterations=4), make_rng(7))
    b = evolutionary_search(f, 5, 6, SearchParams(iterations=4), make_rng(7))
    assert a.log == b.log
    path = tmp_path / "log.jsonl"
    a.write_log(path)
    recs = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(recs) == 5 * 20
    assert set(recs[0]) == {"iteration", "candidate", "mask", "fitness"}
    assert recs[0]["mask"] == ",".join(map(str, a.log[0][2]))


def test_candidate_key():
    assert Candidate(np.array([1, 2])).key == (1, 2)
