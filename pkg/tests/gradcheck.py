"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

from bitnas.engine import Tape


def numeric_grad(f, arrays, idx, h=1e-5):
    """d f(*arrays) / d arrays[idx] by central differences, in place."""
    x = arrays[idx]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(*arrays))
        flat[i] = orig - h
        fm = float(f(*arrays))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def tape_grads(build_loss, tensors):
    """Run build_loss(*tensors) under a tape, backward, return the leaf grads."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build_loss(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def check_grads(build_loss, tensors, rtol=1e-4, h=1e-5):
    """Assert autodiff grads match finite differences for every leaf.

    build_loss maps Tensors to a scalar Tensor; the same function evaluated
    on raw arrays (via fresh Tensors) drives the finite differences.
    """
    from bitnas.engine import Tensor

    grads = tape_grads(build_loss, tensors)
    arrays = [t.data.copy() for t in tensors]

    def f(*arrs):
        fresh = [Tensor(a.copy(), requires_grad=True) for a in arrs]
        return build_loss(*fresh).item()

    for i, t in enumerate(tensors):
        fd = numeric_grad(f, arrays, i, h=h)
        err = rel_error(grads[i], fd)
        assert err < rtol, f"leaf {i}: rel error {err:.3g} >= {rtol}"
