from __future__ import annotations

import numpy as np

from .tensor import no_grad


def grad_check(f, params, eps: float = 1e-5, floor: float = 1e-6, max_entries: int = None, rng=None) -> float:
    """Largest relative error between reverse-mode and central finite-difference gradients.

    ``f`` takes no arguments and returns a scalar ``Tensor`` built from
    ``params``. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` subsamples entries per parameter for large tensors.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
