"""Pure numpy versions of the per-row embedding kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
Accumulations run in the same order as the compiled loops so both backends
agree to rounding.
"""
import numpy as np


def gather_embeddings(table, idx, dims):
    """Concatenate the rows ``table[idx[b, f]]`` into a (B, n*D) matrix,
    zeroing column ``c`` of field ``f`` whenever ``c >= dims[f]``."""
    B, n = idx.shape
    D = table.shape[1]
    out = table[idx]
    dropped = np.arange(D)[None, :] >= dims[:, None]
    out[:, dropped] = 0.0
    return out.reshape(B, n * D)


def scatter_row_grads(dx, idx, dims, n_rows):
    """Sum the per-position gradients of ``gather_embeddings`` back onto rows."""
    B, n = idx.shape
    D = dx.shape[1] // n
    g = dx.reshape(B, n, D).copy()
    dropped = np.arange(D)[None, :] >= dims[:, None]
    g[:, dropped] = 0.0
    out = np.zeros((n_rows, D))
    np.add.at(out, idx.reshape(-1), g.reshape(B * n, D))
    return out


def l1_norms(table):
    return np.abs(table).sum(axis=1)


def _longtail(x):
    a = np.abs(x)
    return np.where(a <= 0.4, 2.0 - 4.0 * a, np.where(a <= 1.0, 0.4, 0.0))


def masked_embed_grads(grad_hat, emb, keep, gap, fields, n_fields):
    """Performance plus structure gradient for each row, and the threshold
    gradient accumulated per field. ``gap`` is ``L1(row) - t[field]``."""
    h = _longtail(gap)
    s = grad_hat * emb
    d_emb = grad_hat * keep[:, None] + s * h[:, None] * np.sign(emb)
    dt = np.zeros(n_fields)
    np.add.at(dt, fields, -(s.sum(axis=1) * h))
    return d_emb, dt
