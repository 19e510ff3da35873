"""Central finite-difference oracle for checking tape gradients."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape


def numerical_grad(fn, params, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``params``.

    ``fn`` must rebuild its graph from the current ``param.data`` on each call
    and return a plain float.
    """
    grads = []
    for p in params:
        g = np.zeros(p.shape)
        base = p.data.copy()
        flat = base.reshape(-1)
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] += step
            p.data = bumped.reshape(p.shape)
            up = fn()
            bumped[j] -= 2 * step
            p.data = bumped.reshape(p.shape)
            down = fn()
            g.reshape(-1)[j] = (up - down) / (2 * step)
        p.data = base
        grads.append(g)
    return grads


def tape_grad(build, params):
    """Gradients of the scalar returned by ``build()`` recorded on a fresh tape.

    Parameters the loss never touches come back as zeros.
    """
    for p in params:
        p.grad = np.zeros(p.shape)
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def max_violation(analytic, numeric, rtol=1e-4):
    """Largest ``|a - n| / (1 + |n|)`` over all arrays; pass iff <= rtol."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / (1.0 + np.abs(n)))))
    return worst


def check_gradients(build, params, step=1e-5, rtol=1e-4):
    """Return (ok, worst) comparing tape gradients with central differences."""
    analytic = tape_grad(build, params)
    numeric = numerical_grad(lambda: build().item(), params, step)
    worst = max_violation(analytic, numeric)
    return worst <= rtol, worst
