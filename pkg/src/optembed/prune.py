"""Learnable field-wise thresholds for pruning whole embedding rows.

A row survives when its L1 norm exceeds its field's threshold. The step
function has no useful derivative, so gradients pass through a long-tail
surrogate, which lets pruned rows receive a structure gradient and recover.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import AdamState, ShapeError


@dataclass
class ThresholdVector:
    t: np.ndarray
    adam: AdamState

    @classmethod
    def create(cls, n_fields, lr_t=1e-2, init=0.0):
        t = np.full(n_fields, float(init))
        return cls(t, AdamState.like(t, lr=lr_t))


def l1_norms(E):
    return kernels.l1_norms(E)


def unit_step(x):
    """1 where ``x > 0`` strictly, else 0."""
    return (np.asarray(x) > 0).astype(np.int8)


def longtail_H(x):
    """Surrogate derivative of the unit step.

    ``2 - 4|x|`` on ``|x| <= 0.4``, ``0.4`` on ``0.4 < |x| <= 1``, 0 beyond.
    """
    a = np.abs(np.asarray(x, dtype=np.float64))
    out = np.where(a <= 0.4, 2.0 - 4.0 * a, np.where(a <= 1.0, 0.4, 0.0))
    return out if out.ndim else float(out)


def threshold_gaps(E, t, row_fields):
    t = np.asarray(t, dtype=np.float64)
    return l1_norms(E) - t[row_fields]


def gen_embedding_mask(E, t, schema):
    row_fields = schema.row_fields()
    if E.shape[0] != len(row_fields):
        raise ShapeError(f"table has {E.shape[0]} rows, schema has {len(row_fields)}")
    if np.shape(t) != (schema.n_fields,):
        raise ShapeError(f"threshold vector has shape {np.shape(t)}, expected ({schema.n_fields},)")
    return unit_step(threshold_gaps(E, t, row_fields))


def masked_embed_grads(grad_hat, E, m_e, t, row_fields, n_fields=None):
    """Split embedding gradient and the matching threshold gradient.

    ``grad_hat`` is the gradient w.r.t. the masked rows ``E * m_e``; all
    arrays are aligned row-for-row (typically only the rows a batch touched)
    and ``row_fields[j]`` names the field of row ``j``.

    Per row ``j`` in field ``k`` with ``h = H(L1(e_j) - t_k)``::

        dE[j] = grad_hat[j] * m_e[j] + grad_hat[j] * E[j] * h * sign(E[j])
        dt[k] -= h * sum(grad_hat[j] * E[j])

    The first term is the performance gradient, the second the structure
    gradient. Returns ``(dE, dt)``.
    """
    grad_hat = np.asarray(grad_hat, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if grad_hat.shape != E.shape:
        raise ShapeError(f"grad {grad_hat.shape} and table {E.shape} differ")
    row_fields = np.asarray(row_fields, dtype=np.int64)
    if np.shape(m_e) != (E.shape[0],) or row_fields.shape != (E.shape[0],):
        raise ShapeError("m_e and row_fields need one entry per row")
    t = np.asarray(t, dtype=np.float64)
    n_fields = len(t) if n_fields is None else n_fields
    gap = l1_norms(E) - t[row_fields]
    return kernels.masked_embed_grads(grad_hat, E, np.asarray(m_e, dtype=np.float64), gap,
                                      row_fields, n_fields)


def sparse_reg(t):
    """Exponential penalty on low thresholds: value and gradient."""
    e = np.exp(-np.asarray(t, dtype=np.float64))
    return float(e.sum()), -e


@dataclass
class FieldNormReport:
    field: int
    feature_ids: np.ndarray
    frequencies: np.ndarray
    norms: np.ndarray
    correlation: float
    degenerate: bool


def pearson(x, y):
    """Pearson r, or ``(0.0, True)`` when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return 0.0, True
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0 or not np.isfinite(sx * sy):
        return 0.0, True
    return float((xc * yc).sum() / (sx * sy)), False


def norm_frequency_report(E, frequencies, schema, log_frequency=True, min_count=1):
    """Per field, the (frequency, L1 norm) pairs of rows seen at least
    ``min_count`` times in training, and their Pearson correlation.

    With ``log_frequency`` the correlation is taken against ``log(freq)``,
    which is how such scatter plots are usually drawn.
    """
    frequencies = np.asarray(frequencies)
    norms = l1_norms(E)
    out = []
    for i in range(schema.n_fields):
        lo, hi = schema.field_range(i)
        ids = np.arange(lo, hi)
        freq = frequencies[lo:hi]
        seen = freq >= min_count
        ids, freq, nrm = ids[seen], freq[seen], norms[lo:hi][seen]
        x = np.log(freq) if log_frequency else freq
        r, degenerate = pearson(x, nrm)
        out.append(FieldNormReport(i, ids, freq, nrm, r, degenerate))
    return out


def write_norm_frequency(path, reports, schema):
    with open(path, "w") as fh:
        fh.write("field\tfeature_id\tfrequency\tl1_norm\n")
        for rep in reports:
            name = schema.names[rep.field]
            for fid, freq, nrm in zip(rep.feature_ids, rep.frequencies, rep.norms):
                fh.write(f"{name}\t{int(fid)}\t{int(freq)}\t{float(nrm)!r}\n")
