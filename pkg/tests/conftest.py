"""Shared test helpers: finite-difference oracle and error measures."""

import numpy as np

from ctxseg import Tape, backward
from ctxseg import autodiff as ad


def rel_err(a, b, floor=1e-3):
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))


def finite_diff_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar-valued f w.r.t. each array.

    ``f`` takes no arguments and reads the arrays in place; the arrays are
    perturbed one element at a time and restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def tape_grads(build_loss, params):
    """Run build_loss() under a fresh tape; return each param tensor's grad."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
        backward(loss, tape)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def check_gradients(build_loss, param_tensors, h=1e-5, tol=1e-4):
    """Assert tape gradients match central differences for every tensor."""
    analytic = tape_grads(build_loss, param_tensors)

    def f():
        loss = build_loss()
        return float(loss.data)

    numeric = finite_diff_grad(f, [t.data for t in param_tensors], h=h)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst


def conv2d_reference(x, kernel, bias, stride=1, dilation=1, padding=0):
    """Nested-loop dilated cross-correlation oracle (independent of ctxseg)."""
    n, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    eff = dilation * (k - 1) + 1
    oh = (h + 2 * padding - eff) // stride + 1
    ow = (w + 2 * padding - eff) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(k):
                            for q in range(k):
                                acc += (xp[b, c, i * stride + p * dilation,
                                           j * stride + q * dilation]
                                        * kernel[o, c, p, q])
                    out[b, o, i, j] = acc + bias[o]
    return out


def make_tensor(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(shape) * scale, requires_grad=True)
