"""Embedding table, mask application, and the FNN-style CTR predictor."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import (AdamState, BatchNormState, ShapeError, affine_backward, affine_forward,
                 batchnorm_backward, batchnorm_forward, relu_backward, relu_forward,
                 sigmoid_backward, sigmoid_forward, xavier_init)


@dataclass
class EmbeddingTable:
    E: np.ndarray
    adam: AdamState

    @classmethod
    def create(cls, n_rows, dim, rng, lr=1e-3, weight_decay=0.0):
        E = xavier_init(n_rows, dim, rng)
        return cls(E, AdamState.like(E, lr=lr, weight_decay=weight_decay))

    @property
    def D(self):
        return self.E.shape[1]


@dataclass
class RowGrads:
    """Gradient rows for the table rows referenced by a batch."""
    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, n_rows):
        out = np.zeros((n_rows, self.values.shape[1]))
        out[self.rows] = self.values
        return out


def full_dims(n_fields, D):
    return np.full(n_fields, D, dtype=np.int64)


def expand_dim_mask(dims, D):
    """Binary D x n matrix whose column ``i`` holds ``dims[i]`` leading ones."""
    return (np.arange(D)[:, None] < np.asarray(dims)[None, :]).astype(np.int8)


def apply_masks(E, m_e, dims, schema):
    """``E * m_e * m_d`` with ``m_e`` broadcast over columns and each field's
    dimension mask broadcast over that field's rows."""
    m_e = np.asarray(m_e)
    dims = np.asarray(dims, dtype=np.int64)
    if m_e.shape != (E.shape[0],):
        raise ShapeError(f"m_e has shape {m_e.shape}, table has {E.shape[0]} rows")
    if dims.shape != (schema.n_fields,):
        raise ShapeError(f"dimension mask has {dims.shape[0] if dims.ndim else 0} entries, "
                         f"schema has {schema.n_fields} fields")
    if dims.size and (dims.min() < 0 or dims.max() > E.shape[1]):
        raise ValueError(f"dimension counts must lie in [0, {E.shape[1]}], got {dims.tolist()}")
    if E.shape[0] != schema.total:
        raise ShapeError(f"table has {E.shape[0]} rows, schema has {schema.total}")
    row_dims = np.repeat(dims, schema.cardinalities)
    keep = (m_e[:, None] != 0) & (np.arange(E.shape[1])[None, :] < row_dims[:, None])
    return np.where(keep, E, 0.0)


class Interaction:
    """Pluggable feature-interaction block between embeddings and the head."""

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError


class MLP(Interaction):
    """affine -> batchnorm -> relu, per hidden layer."""

    def __init__(self, in_dim, hidden, batchnorm, rng):
        self.batchnorm = batchnorm
        self.W, self.b, self.bn = [], [], []
        prev = in_dim
        for width in hidden:
            self.W.append(xavier_init(prev, width, rng))
            self.b.append(np.zeros(width))
            self.bn.append(BatchNormState.create(width) if batchnorm else None)
            prev = width
        self.out_dim = prev
        self._caches = None

    def forward(self, x, train):
        caches = []
        for W, b, bn in zip(self.W, self.b, self.bn):
            x, ac = affine_forward(x, W, b)
            bc = None
            if bn is not None:
                x, bc = batchnorm_forward(x, bn, train)
            x, rc = relu_forward(x)
            caches.append((ac, bc, rc))
        self._caches = caches
        return x

    def backward(self, dout):
        grads = {}
        for i in reversed(range(len(self.W))):
            ac, bc, rc = self._caches[i]
            dout = relu_backward(dout, rc)
            if bc is not None:
                dout, grads[f"mlp.{i}.gamma"], grads[f"mlp.{i}.beta"] = batchnorm_backward(dout, bc)
            dout, grads[f"mlp.{i}.W"], grads[f"mlp.{i}.b"] = affine_backward(dout, ac)
        return dout, grads

    def parameters(self):
        out = {}
        for i, (W, b, bn) in enumerate(zip(self.W, self.b, self.bn)):
            out[f"mlp.{i}.W"] = W
            out[f"mlp.{i}.b"] = b
            if bn is not None:
                out[f"mlp.{i}.gamma"] = bn.gamma
                out[f"mlp.{i}.beta"] = bn.beta
        return out

    def buffers(self):
        out = {}
        for i, bn in enumerate(self.bn):
            if bn is not None:
                out[f"mlp.{i}.running_mean"] = bn.running_mean
                out[f"mlp.{i}.running_var"] = bn.running_var
        return out

    def load_buffers(self, bufs):
        for i, bn in enumerate(self.bn):
            if bn is not None:
                bn.running_mean = np.array(bufs[f"mlp.{i}.running_mean"], dtype=np.float64)
                bn.running_var = np.array(bufs[f"mlp.{i}.running_var"], dtype=np.float64)


class CTRModel:
    """Concatenated field embeddings -> interaction -> sigmoid head.

    ``forward`` takes an already-masked embedding table plus the per-field
    dimension counts; the dimension mask is applied while gathering.
    """

    def __init__(self, n_fields, dim, hidden=(64, 32, 16), batchnorm=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_fields = n_fields
        self.dim = dim
        self.interaction = MLP(n_fields * dim, hidden, batchnorm, rng)
        self.head_w = xavier_init(self.interaction.out_dim, 1, rng)
        self.head_b = np.zeros(1)
        self._cache = None

    def parameters(self):
        params = dict(self.interaction.parameters())
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def buffers(self):
        return self.interaction.buffers()

    def load_state(self, params, buffers):
        own = self.parameters()
        for name, arr in own.items():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            if params[name].shape != arr.shape:
                raise ShapeError(f"{name}: expected {arr.shape}, got {params[name].shape}")
            arr[...] = params[name]
        self.interaction.load_buffers(buffers)

    def _check_idx(self, table, idx):
        if idx.ndim != 2 or idx.shape[1] != self.n_fields:
            raise ShapeError(f"batch indices must be (B, {self.n_fields}), got {idx.shape}")
        if table.shape[1] != self.dim:
            raise ShapeError(f"table width {table.shape[1]} != model dim {self.dim}")
        bad = (idx < 0) | (idx >= table.shape[0])
        if bad.any():
            r, f = np.argwhere(bad)[0]
            raise IndexError(f"row {r}, field {f}: index {idx[r, f]} outside table of {table.shape[0]} rows")

    def forward(self, table, idx, dims=None, train=False):
        idx = np.asarray(idx, dtype=np.int64)
        self._check_idx(table, idx)
        dims = np.full(self.n_fields, self.dim, dtype=np.int64) if dims is None else np.asarray(dims, dtype=np.int64)
        x = kernels.gather_embeddings(table, idx, dims)
        h = self.interaction.forward(x, train)
        logit, head_cache = affine_forward(h, self.head_w, self.head_b)
        prob, sig_cache = sigmoid_forward(logit[:, 0])
        self._cache = (idx, dims, head_cache, sig_cache, table.shape[0])
        return prob

    def backward(self, dprob):
        """Returns (row-sparse grads w.r.t. the masked table, parameter grads)."""
        if self._cache is None:
            raise RuntimeError("backward called without a matching forward pass")
        idx, dims, head_cache, sig_cache, _ = self._cache
        self._cache = None
        dlogit = sigmoid_backward(np.asarray(dprob, dtype=np.float64), sig_cache)[:, None]
        dh, dw, db = affine_backward(dlogit, head_cache)
        dx, grads = self.interaction.backward(dh)
        grads["head.w"] = dw
        grads["head.b"] = db
        rows, inv = np.unique(idx, return_inverse=True)
        d_table = kernels.scatter_row_grads(dx, inv.reshape(idx.shape), dims, len(rows))
        return RowGrads(rows, d_table), grads

    def predict(self, table, idx, dims=None, batch_size=4096):
        """Eval-mode probabilities, computed in fixed-size chunks."""
        out = [self.forward(table, idx[s:s + batch_size], dims, train=False)
               for s in range(0, len(idx), batch_size)]
        self._cache = None
        return np.concatenate(out) if out else np.empty(0)
