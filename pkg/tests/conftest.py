"""Shared numeric helpers for the test suite."""

import numpy as np

from davit import autodiff as ad

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(fn, arrays, step=FD_STEP):
    """Central-difference gradients of a scalar function of float64 arrays.

    fn takes the arrays and returns a python float. Returns one gradient
    array per input.
    """
    grads = []
    for target in arrays:
        g = np.zeros_like(target)
        flat = target.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = fn(arrays)
            flat[i] = keep - step
            down = fn(arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / scale


def check_grads(build_loss, arrays, tol=FD_TOL, step=FD_STEP):
    """Compare tape gradients of build_loss against central differences.

    build_loss takes a list of Tensors (float64, requires_grad) and
    returns a scalar Tensor. arrays are the float64 starting values.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape():
        loss = build_loss(tensors)
        ad.backward(loss)

    def scalar_fn(arrs):
        ts = [ad.Tensor(a.copy()) for a in arrs]
        return build_loss(ts).item()

    fd = numeric_grad(scalar_fn, arrays, step=step)
    for i, (t, gfd) in enumerate(zip(tensors, fd)):
        assert t.grad is not None, f"input {i} got no gradient"
        err = rel_err(t.grad, gfd)
        assert err < tol, f"input {i}: gradient mismatch, rel err {err:.3e}"
