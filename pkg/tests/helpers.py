"""Shared test utilities: the central finite-difference gradient oracle
and comparison helpers. The oracle only ever calls forward evaluations,
so it stays independent of the analytic backward path it checks.
"""

import numpy as np

from cianet import tensor as T

RTOL = 1e-4
SMALL = 1e-6
ATOL = 1e-7


def finite_diff(scalar_fn, x, rel_h=1e-4):
    """Central-difference gradient of scalar_fn at x (f64, elementwise).

    Step size follows h = rel_h * max(1, |x_i|) per coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = rel_h * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        gflat[i] = (scalar_fn(xp.reshape(x.shape)) - scalar_fn(xm.reshape(x.shape))) / (2 * h)
    return g


def assert_grad_close(analytic, fd, rtol=RTOL, atol=ATOL, small=SMALL, what=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    assert analytic.shape == fd.shape
    diff = np.abs(analytic - fd)
    is_small = np.abs(analytic) < small
    if is_small.any():
        worst = diff[is_small].max()
        assert worst < atol, f"{what}: absolute error {worst} >= {atol} on small-gradient entries"
    if (~is_small).any():
        denom = np.maximum(np.abs(analytic), np.abs(fd))[~is_small]
        rel = (diff[~is_small] / denom).max()
        assert rel < rtol, f"{what}: relative error {rel} >= {rtol}"


def check_op_grads(build_op, inputs, rng, rtol=RTOL, atol=ATOL, what=""):
    """Compare analytic input gradients of an op against finite differences.

    ``build_op(tensors) -> Tensor`` applies the op to Tensor-wrapped
    inputs; ``inputs`` is a list of f64 numpy arrays. The op output is
    contracted with a fixed random weighting to produce the scalar.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = build_op(tensors)
    w = rng.standard_normal(out.data.shape)
    T.backward_from([out], [w])

    for k, arr in enumerate(inputs):

        def scalar(x, k=k):
            probe = [T.Tensor(a) for a in inputs]
            probe[k] = T.Tensor(x)
            return float((build_op(probe).data * w).sum())

        fd = finite_diff(scalar, arr)
        analytic = tensors[k].grad
        assert analytic is not None, f"{what}: input {k} received no gradient"
        assert_grad_close(analytic, fd, rtol=rtol, atol=atol, what=f"{what} input {k}")
