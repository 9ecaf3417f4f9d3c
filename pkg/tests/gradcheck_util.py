"""Central finite-difference gradient oracle shared by kernel and
acceptance tests.  The oracle only ever calls the tape-free forward
path, so it stays independent of the backward code it checks."""

import numpy as np


def finite_difference_check(params: dict, grads: dict, loss_fn, h: float = 1e-5, sample: int | None = None, seed: int = 0):
    """Max relative error between analytic grads and central differences.

    params: name -> Tensor, mutated in place and restored.
    loss_fn: () -> float, recomputes the loss from current params.
    sample: check at most this many coordinates per parameter (None = all).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_at = None
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = grads[name].data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-4)
            if err > worst:
                worst = err
                worst_at = (name, int(i), fd, float(g[i]))
    return worst, worst_at
