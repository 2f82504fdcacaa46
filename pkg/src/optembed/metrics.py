import numpy as np

from .nn import bce_loss


class MetricError(ValueError):
    pass


def auc(labels, scores):
    """Area under ROC from rank sums; tied scores share their mean rank."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise MetricError(f"labels {labels.shape} and scores {scores.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: only one class present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # 1-based ranks, averaged across runs of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    mean_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    # integer-valued until the final division, so exact
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(labels, scores):
    return float(bce_loss(labels, scores)[0])


def remaining_params(m_e, dims, schema):
    row_dims = np.repeat(np.asarray(dims, dtype=np.int64), schema.cardinalities)
    return int(row_dims[np.asarray(m_e) != 0].sum())


def sparsity(m_e, dims, schema, D):
    """1 - remaining / (|f| * D); a kept row of field i contributes dims[i]."""
    return 1.0 - remaining_params(m_e, dims, schema) / (schema.total * D)
