from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import DiffValue


def grad_check(f: Callable[[DiffValue], DiffValue], x: DiffValue, h: float = 1e-5,
               n_samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max element-wise relative error between backward and central differences.

    ``f`` rebuilds the graph from ``x`` and returns a scalar.  ``x.data`` is
    perturbed in place and restored afterwards.  With ``n_samples`` only a
    random subset of entries is probed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if n_samples is not None and n_samples < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=n_samples, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_params(f: Callable[[], DiffValue], params, h: float = 1e-5,
                      n_samples: int | None = None, seed: int = 0) -> dict[str, float]:
    """Run :func:`grad_check` against every parameter of a ParamSet-like mapping.

    ``f`` takes no arguments and closes over the parameters.
    """
    rng = np.random.default_rng(seed)
    return {
        name: grad_check(lambda _x: f(), p, h=h, n_samples=n_samples, rng=rng)
        for name, p in params.items()
    }
