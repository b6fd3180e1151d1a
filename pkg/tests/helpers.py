"""Shared test utilities: central finite-difference gradient checking."""

import numpy as np

from motok.tensorcore import Tape, Tensor, backward


def finite_diff_grads(f, arrays, h=1e-6):
    """Central-difference gradients of scalar f() wrt each array in-place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-5, h=1e-6):
    """Compare tape gradients of build(tensors)->scalar against finite differences.

    Returns the worst relative error observed. Arrays must be f64.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape():
        loss = build(*tensors)
        backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def forward():
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        return float(build(*ts).numpy())

    numeric = finite_diff_grads(forward, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.max(np.abs(a - n) / (1.0 + np.abs(n)))
        worst = max(worst, float(err))
    return worst
