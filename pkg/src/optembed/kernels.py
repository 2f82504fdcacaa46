"""Backend selection for the per-row embedding kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback takes over. Set ``OPTEMBED_PURE_PYTHON=1`` to force the fallback.
Inputs are coerced to the contiguous dtypes both backends expect.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("OPTEMBED_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def available_backends():
    names = {"python": _kernels_py}
    if _compiled is not None:
        names["cython"] = _compiled
    return names


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def gather_embeddings(table, idx, dims, impl=None):
    impl = impl or _impl
    return impl.gather_embeddings(_f64(table), _i64(idx), _i64(dims))


def scatter_row_grads(dx, idx, dims, n_rows, impl=None):
    impl = impl or _impl
    return impl.scatter_row_grads(_f64(dx), _i64(idx), _i64(dims), int(n_rows))


def l1_norms(table, impl=None):
    impl = impl or _impl
    return impl.l1_norms(_f64(np.atleast_2d(table)))


def masked_embed_grads(grad_hat, emb, keep, gap, fields, n_fields, impl=None):
    impl = impl or _impl
    return impl.masked_embed_grads(_f64(grad_hat), _f64(emb), _f64(keep), _f64(gap),
                                   _i64(fields), int(n_fields))
