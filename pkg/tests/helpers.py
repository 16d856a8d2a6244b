"""Independent oracles shared by the test modules.

Everything here is written against plain numpy, without using the package's
tape machinery, so agreement between the two routes is meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dyhgraph.tensor import Tape, Tensor, backward


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def central_difference(f: Callable[[], float], arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """d f / d arr[idx] by central differences, restoring the entry."""
    saved = arr[idx]
    arr[idx] = saved + h
    f_plus = f()
    arr[idx] = saved - h
    f_minus = f()
    arr[idx] = saved
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    n_points: int = 10,
    h: float = 1e-5,
    tol: float = 1e-4,
    jitter: float = 0.05,
) -> float:
    """Compare taped gradients against central differences at random coordinates.

    Checks at a jittered parameter point: zero-initialized biases leave
    all-zero activation rows sitting exactly on the relu kink, where finite
    differences and the taped subgradient legitimately disagree.

    Returns the worst relative error seen; raises AssertionError beyond tol.
    """
    for p in params:
        if jitter:
            p.data = p.data + rng.normal(scale=jitter, size=p.data.shape)
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for _ in range(n_points):
        which = int(rng.integers(len(params)))
        p = params[which]
        flat = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat, p.data.shape)
        fd = central_difference(lambda: build_loss().item(), p.data, idx, h=h)
        an = analytic[which][idx]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
        worst = max(worst, err)
        assert err < tol, (
            f"gradient mismatch at param {which} index {idx}: "
            f"finite-difference {fd:.8g} vs taped {an:.8g} (rel err {err:.2e})"
        )
    return worst
