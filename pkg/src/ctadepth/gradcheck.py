"""Central finite-difference gradient checking.

``gradcheck`` compares tape gradients of a scalar-valued function against
central differences on every requires_grad input. ``run_suite`` exercises the
whole differentiable surface (tensor ops, sampling, geometry, attention, GRU,
PPM, losses) and is what the ``gradcheck`` CLI subcommand runs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, tensors, index, eps=1e-6):
    """Central finite differences of scalar f wrt tensors[index]."""
    t = tensors[index]
    g = np.zeros_like(t.data)
    flat = t.data.ravel()
    gflat = g.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(*tensors).data.item()
        flat[k] = orig - eps
        fm = f(*tensors).data.item()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(ga, gn):
    # the 1e-3 floor keeps identically-zero gradients (where central
    # differences only return cancellation noise) from dominating the ratio
    scale = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), 1e-3)
    return float(np.abs(ga - gn).max(initial=0.0) / scale)


def gradcheck(f, tensors, eps=1e-6, tol=1e-5):
    """Max relative error between tape and numerical gradients of scalar f.

    Returns the worst error over all grad-requiring inputs; raises if the
    tape produced no gradient for one of them.
    """
    for t in tensors:
        t.zero_grad()
    out = f(*tensors)
    out.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise AssertionError(f"no gradient populated for input {i}")
        gn = numerical_grad(f, tensors, i, eps)
        worst = max(worst, rel_error(t.grad, gn))
    if worst >= tol:
        raise AssertionError(f"gradcheck failed: max relative error {worst:.3e} >= {tol:g}")
    return worst


def _rt(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _suite_cases(rng):
    from . import tensor as T

    yield "add/mul/sub", lambda: gradcheck(
        lambda a, b: T.tsum(T.mul(T.add(a, b), T.sub(a, b))), [_rt(rng, 4, 3), _rt(rng, 4, 3)])
    yield "div", lambda: gradcheck(
        lambda a, b: T.tsum(T.div(a, b)),
        [_rt(rng, 3, 3), Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)])
    yield "matmul", lambda: gradcheck(
        lambda a, b: T.tsum(T.matmul(a, b)), [_rt(rng, 4, 3), _rt(rng, 3, 5)])
    def softmax_case():
        probe = Tensor(rng.standard_normal(5))
        return gradcheck(
            lambda a: T.tsum(T.mul(T.softmax(a, axis=-1), probe)), [_rt(rng, 5)])

    yield "softmax", softmax_case
    yield "exp/log/sqrt", lambda: gradcheck(
        lambda a: T.tsum(T.log(T.add(T.exp(a), 1.5)) + T.sqrt(T.add(T.mul(a, a), 1.0))),
        [_rt(rng, 6)])
    yield "tanh/sigmoid/softplus", lambda: gradcheck(
        lambda a: T.tsum(T.tanh(a) + T.sigmoid(a) + T.softplus(a)), [_rt(rng, 7)])
    yield "relu", lambda: gradcheck(
        lambda a: T.tsum(T.relu(a)),
        [Tensor(rng.standard_normal(12) + 0.05 * np.sign(rng.standard_normal(12)),
                requires_grad=True)])
    yield "mean/sum axes", lambda: gradcheck(
        lambda a: T.tsum(T.tmean(a, axis=1)) + T.tmean(T.tsum(a, axis=0)), [_rt(rng, 3, 4)])
    yield "l1/l2 norms", lambda: gradcheck(
        lambda a: T.l1_norm(a) + T.tsum(T.l2_norm(a, axis=0)),
        [Tensor(rng.standard_normal((3, 5)) + 0.1, requires_grad=True)])
    def concat_case():
        probe = Tensor(rng.standard_normal((4, 5)))
        return gradcheck(
            lambda a, b: T.tsum(T.mul(T.transpose(T.concat([a, b], axis=0)), probe)),
            [_rt(rng, 2, 4), _rt(rng, 3, 4)])

    yield "concat/reshape/transpose", concat_case
    yield "getitem/expand", lambda: gradcheck(
        lambda a: T.tsum(T.expand(T.reshape(a[1], (1, 4)), (3, 4))), [_rt(rng, 3, 4)])
    def conv_case():
        probe = Tensor(rng.standard_normal((3, 5, 5)))
        return gradcheck(
            lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b, stride=1, padding="same"),
                                         probe)),
            [_rt(rng, 2, 5, 5), _rt(rng, 3, 2, 3, 3), _rt(rng, 3)])

    yield "conv2d", conv_case
    yield "conv2d stride 2", lambda: gradcheck(
        lambda x, w: T.tsum(T.conv2d(x, w, stride=2, padding=1)),
        [_rt(rng, 2, 6, 6), _rt(rng, 3, 2, 3, 3)])

    def bilin_case():
        feat = _rt(rng, 3, 6, 6)
        c = np.stack([rng.uniform(0.6, 4.4, (4, 4)), rng.uniform(0.6, 4.4, (4, 4))])
        # keep coordinates away from the integer lattice, where bilinear kinks
        c = np.floor(c) + np.clip(c - np.floor(c), 0.2, 0.8)
        probe = Tensor(rng.standard_normal((3, 4, 4)))

        def f(feat, coords):
            out, _ = T.bilinear_sample(feat, coords)
            return T.tsum(T.mul(out, probe))

        return gradcheck(f, [feat, Tensor(c, requires_grad=True)], tol=1e-5)

    yield "bilinear_sample", bilin_case

    def pool_case():
        probe_r = Tensor(rng.standard_normal((4, 7, 9)))
        probe_s = Tensor(rng.standard_normal((1, 8, 8)))
        return gradcheck(
            lambda x: (T.tsum(T.adaptive_avg_pool(x, (2, 2)))
                       + T.tsum(T.mul(T.resize_bilinear(x, (7, 9)), probe_r))
                       + T.tsum(T.mul(T.pixel_shuffle(x, 2), probe_s))),
            [_rt(rng, 4, 4, 4)])

    yield "pool/resize/shuffle", pool_case

    from .geometry import _geometry_gradcheck_cases
    yield from _geometry_gradcheck_cases(rng)

    from .nn import _nn_gradcheck_cases
    yield from _nn_gradcheck_cases(rng)

    from .objective import _objective_gradcheck_cases
    yield from _objective_gradcheck_cases(rng)


def run_suite(seed=0, trials=20, verbose=False):
    """Run every registered gradcheck ``trials`` times with fresh draws.

    Returns the max relative error observed; raises AssertionError on the
    first failing case.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    names = None
    for trial in range(trials):
        for name, case in _suite_cases(rng):
            err = case()
            worst = max(worst, err)
            if verbose and trial == 0:
                print(f"  {name}: rel err {err:.2e}")
    return worst
