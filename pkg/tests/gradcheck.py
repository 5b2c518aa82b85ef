"""Central finite-difference gradient checker shared by the test modules."""

import numpy as np

EPS = 1e-5


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _indices(shape, rng, limit):
    idx = list(np.ndindex(shape))
    if limit is None or len(idx) <= limit:
        return idx
    return [idx[i] for i in rng.choice(len(idx), limit, replace=False)]


def check_module(module, x, rng, scale=0.5, forward=None, backward=None, limit=None):
    """Return (worst parameter error, worst input error) for loss = sum(w * forward(x)).

    ``limit`` caps the number of probed entries per tensor (random subset)."""
    forward = forward or (lambda v, record=True: module.forward(v, record=record))
    backward = backward or module.backward
    for t in module.parameters().values():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    y = forward(x)
    w = rng.normal(size=np.shape(y))
    module.zero_grad()
    dx = backward(w)

    def loss(v):
        return float(np.sum(forward(v, record=False) * w))

    worst = 0.0
    for t in module.parameters().values():
        for idx in _indices(t.shape, rng, limit):
            old = t.data[idx]
            t.data[idx] = old + EPS
            lp = loss(x)
            t.data[idx] = old - EPS
            lm = loss(x)
            t.data[idx] = old
            worst = max(worst, float(rel_err(t.grad[idx], (lp - lm) / (2 * EPS))))
    worst_x = 0.0
    if dx is not None:
        xx = np.array(x, dtype=float)
        for idx in _indices(xx.shape, rng, limit):
            old = xx[idx]
            xx[idx] = old + EPS
            lp = loss(xx)
            xx[idx] = old - EPS
            lm = loss(xx)
            xx[idx] = old
            worst_x = max(worst_x, float(rel_err(dx[idx], (lp - lm) / (2 * EPS))))
    return worst, worst_x
