"""Dense numeric engine with hand-wired forward/backward passes.

Matrices are float64 numpy arrays. Each ``*_forward`` returns its output and
a cache; the matching ``*_backward`` consumes that cache. Nothing here keeps
global state, so a training step is a pure function of its inputs and RNG.
"""
from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def make_rng(seed, *stream):
    """PCG64 generator keyed by ``(seed, *stream)``.

    Distinct stream ids give independent generators for the same run seed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def xavier_init(rows, cols, rng):
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive shape, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def affine_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, (x, W)


def affine_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    y = sigmoid(np.asarray(x, dtype=np.float64))
    return y, y


def sigmoid_backward(dout, cache):
    return dout * cache * (1.0 - cache)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, width):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))


def batchnorm_forward(x, bn, train):
    """Normalise columns of ``x``.

    In train mode the batch statistics are used and the running statistics
    in ``bn`` are updated in place (unbiased variance, like most frameworks).
    """
    if train:
        B = x.shape[0]
        if B < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var * B / (B - 1)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean) * inv_std
    return bn.gamma * xhat + bn.beta, (xhat, inv_std, bn.gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    B = dout.shape[0]
    dx = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def bce_loss(y, p):
    """Mean negative log-likelihood and its gradient w.r.t. the probabilities."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    dp = -(y / p - (1.0 - y) / (1.0 - p)) / y.shape[0]
    return -ce.mean(), dp


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0

    @classmethod
    def like(cls, param, **hyper):
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param, grad, state):
    """In-place Adam update; l2 enters as ``grad + weight_decay * param``."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam shapes disagree: param{param.shape} grad{grad.shape}")
    g = grad + state.weight_decay * param if state.weight_decay else grad
    state.step_count += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1 ** state.step_count)
    vhat = state.v / (1 - state.beta2 ** state.step_count)
    param -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def adam_step_rows(param, rows, grad_rows, state):
    """Lazy Adam: only ``param[rows]`` and their moments move.

    The bias-correction step counter is shared by the whole table.
    """
    if grad_rows.shape != (len(rows),) + param.shape[1:]:
        raise ShapeError(f"row grads {grad_rows.shape} do not match {len(rows)} rows of {param.shape}")
    p = param[rows]
    g = grad_rows + state.weight_decay * p if state.weight_decay else grad_rows
    state.step_count += 1
    m = state.beta1 * state.m[rows] + (1 - state.beta1) * g
    v = state.beta2 * state.v[rows] + (1 - state.beta2) * g * g
    state.m[rows] = m
    state.v[rows] = v
    mhat = m / (1 - state.beta1 ** state.step_count)
    vhat = v / (1 - state.beta2 ** state.step_count)
    param[rows] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
