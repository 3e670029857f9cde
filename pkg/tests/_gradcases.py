"""Random gradient-check instances for every autodiff op and every head loss.

Each builder takes a Generator and returns ``(fn, params)`` where ``fn()``
builds a scalar from the leaf tensors in ``params``. Inputs are drawn away
from kinks (relu/abs at 0, clip bounds, smooth-L1 at |d| = 1, max ties) so
central differences are valid.
"""

from __future__ import annotations

import numpy as np

from bevscale import autodiff as ad
from bevscale import heads
from bevscale.autodiff import Tensor


def leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def project(t: Tensor, rng) -> Tensor:
    """Generic scalar readout: sum(t * R) with a fixed random R."""
    r = rng.normal(size=t.shape)
    return ad.sum_(ad.mul(t, r))


def _unary(op, sample):
    def build(rng):
        x = leaf(sample(rng))
        r = rng.normal(size=x.shape)
        return (lambda: ad.sum_(ad.mul(op(x), r))), [x]
    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = leaf(sa(rng)), leaf(sb(rng))
        out_shape = np.broadcast_shapes(a.shape, b.shape)
        r = rng.normal(size=out_shape)
        return (lambda: ad.sum_(ad.mul(op(a, b), r))), [a, b]
    return build


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.3, 2.0, size=shape)


def _layernorm(rng):
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    r = rng.normal(size=(3, 5))
    return (lambda: ad.sum_(ad.mul(ad.layernorm(x, g, b), r))), [x, g, b]


def _reduce(kind):
    def build(rng):
        x = leaf(rng.normal(size=(3, 4, 2)))
        axis = [None, 0, 1, (0, 2)][rng.integers(4)]
        keep = bool(rng.integers(2))
        op = ad.sum_ if kind == "sum" else ad.mean
        def fn():
            y = op(x, axis=axis, keepdims=keep)
            return ad.sum_(ad.mul(y, np.linspace(0.5, 1.5, y.size).reshape(y.shape)))
        return fn, [x]
    return build


def _reshape(rng):
    x = leaf(rng.normal(size=(2, 6)))
    r = rng.normal(size=(3, 4))
    return (lambda: ad.sum_(ad.mul(ad.reshape(x, (3, 4)), r))), [x]


def _transpose(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    axes = tuple(rng.permutation(3))
    r = rng.normal(size=tuple(x.shape[i] for i in axes))
    return (lambda: ad.sum_(ad.mul(ad.transpose(x, axes), r))), [x]


def _concat(rng):
    a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 6))
    return (lambda: ad.sum_(ad.mul(ad.concat([a, b], axis=1), r))), [a, b]


def _matmul(rng):
    batched = bool(rng.integers(2))
    a = leaf(rng.normal(size=(2, 3, 4) if batched else (3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    r = rng.normal(size=(2, 3, 5) if batched else (3, 5))
    return (lambda: ad.sum_(ad.mul(ad.matmul(a, b), r))), [a, b]


def _conv(rng):
    x = leaf(rng.normal(size=(2, 4, 3, 2)))
    w = leaf(rng.normal(size=(3, 3, 2, 3)) * 0.5)
    b = leaf(rng.normal(size=3))
    r = rng.normal(size=(2, 4, 3, 3))
    return (lambda: ad.sum_(ad.mul(ad.conv2d_3x3(x, w, b), r))), [x, w, b]


def _gather(rng):
    x = leaf(rng.normal(size=(5, 3)))
    idx = rng.integers(0, 5, size=(4, 2))
    r = rng.normal(size=(4, 2, 3))
    return (lambda: ad.sum_(ad.mul(ad.gather(x, idx), r))), [x]


def _scatter(rng):
    v = leaf(rng.normal(size=(6, 2)))
    idx = rng.integers(0, 4, size=6)
    r = rng.normal(size=(4, 2))
    return (lambda: ad.sum_(ad.mul(ad.scatter_add(v, idx, 4), r))), [v]


def _segments(rng, n, m):
    seg = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return rng.permutation(seg)


def _max_set(rng):
    n, m = 8, 3
    seg = _segments(rng, n, m)
    # distinct values spaced far beyond the finite-difference step
    vals = rng.permutation(n * 2).reshape(n, 2) * 0.1 + rng.uniform(0, 0.01, size=(n, 2))
    x = leaf(vals)
    r = rng.normal(size=(m, 2))
    return (lambda: ad.sum_(ad.mul(ad.max_over_set(x, seg, m), r))), [x]


def _mean_set(rng):
    n, m = 7, 4
    seg = rng.integers(0, m, size=n)
    x = leaf(rng.normal(size=(n, 3)))
    r = rng.normal(size=(m, 3))
    return (lambda: ad.sum_(ad.mul(ad.mean_over_set(x, seg, m), r))), [x]


def _clip(rng):
    vals = rng.uniform(-2, 2, size=(4, 3))
    vals = np.where(np.abs(np.abs(vals) - 1.0) < 0.05, vals * 0.8, vals)
    x = leaf(vals)
    r = rng.normal(size=(4, 3))
    return (lambda: ad.sum_(ad.mul(ad.clip(x, -1.0, 1.0), r))), [x]


def _power(rng):
    x = leaf(rng.uniform(0.3, 2.0, size=(3, 3)))
    e = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.7]))
    r = rng.normal(size=(3, 3))
    return (lambda: ad.sum_(ad.mul(ad.power(x, e), r))), [x]


def _softmax(op):
    def build(rng):
        x = leaf(rng.normal(size=(3, 5)))
        axis = int(rng.integers(2))
        r = rng.normal(size=(3, 5))
        return (lambda: ad.sum_(ad.mul(op(x, axis=axis), r))), [x]
    return build


def _duplicated(rng):
    """Shared subexpression: y = x*x used twice."""
    x = leaf(rng.normal(size=(4,)))
    def fn():
        y = ad.mul(x, x)
        return ad.sum_(ad.add(ad.mul(y, 2.0), ad.sigmoid(y)))
    return fn, [x]


OP_CASES = {
    "add": _binary(ad.add, _normal(3, 4), _normal(4)),
    "sub": _binary(ad.sub, _normal(3, 4), _normal(3, 1)),
    "mul": _binary(ad.mul, _normal(3, 4), _normal(1, 4)),
    "div": _binary(ad.div, _normal(3, 4), _positive(3, 4)),
    "neg": _unary(ad.neg, _normal(3, 4)),
    "power": _power,
    "relu": _unary(ad.relu, lambda r: away_from_zero(r, (4, 5))),
    "gelu": _unary(ad.gelu, _normal(4, 5)),
    "sigmoid": _unary(ad.sigmoid, _normal(4, 5)),
    "exp": _unary(ad.exp, _normal(4, 5)),
    "log": _unary(ad.log, _positive(4, 5)),
    "abs": _unary(ad.abs_, lambda r: away_from_zero(r, (4, 5))),
    "clip": _clip,
    "softmax": _softmax(ad.softmax),
    "log_softmax": _softmax(ad.log_softmax),
    "log_sigmoid": _unary(ad.log_sigmoid, lambda r: r.normal(size=(4, 5)) * 4),
    "layernorm": _layernorm,
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "matmul": _matmul,
    "conv2d_3x3": _conv,
    "gather": _gather,
    "scatter_add": _scatter,
    "max_over_set": _max_set,
    "mean_over_set": _mean_set,
    "shared_subexpression": _duplicated,
}


# ---------------------------------------------------------------- head losses


def _focal(rng):
    x = leaf(rng.normal(size=(10,)) * 2)
    t = (rng.random(10) < 0.3).astype(float)
    return (lambda: heads.sigmoid_focal_loss(x, t)), [x]


def _heatmap(rng):
    x = leaf(rng.normal(size=(2, 5, 5, 2)))
    t = rng.random((2, 5, 5, 2)) * 0.9
    t[0, 2, 2, 0] = 1.0
    t[1, 1, 3, 1] = 1.0
    return (lambda: heads.centernet_heatmap_loss(x, t)), [x]


def _regression(rng):
    x = leaf(rng.normal(size=(1, 4, 4, heads.REG_DIM)))
    mask = rng.random((1, 4, 4)) < 0.4
    mask[0, 0, 0] = True
    offs = away_from_zero(rng, x.shape, 0.1, 2.5)
    offs = np.where(np.abs(np.abs(offs) - 1.0) < 0.1, offs * 0.7, offs)
    target = x.data - offs
    return (lambda: heads.regression_loss(x, target, mask)), [x]


def _cross_entropy(rng):
    x = leaf(rng.normal(size=(2, 3, 3, 4)))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    w = rng.uniform(0.5, 2.0, size=18) if rng.integers(2) else None
    return (lambda: heads.cross_entropy(x, labels, w)), [x]


def _distill_logits(rng):
    x = leaf(rng.normal(size=(2, 4, 4, 2)) * 2)
    t = rng.random((2, 4, 4, 2))
    w = rng.random((2, 4, 4, 1)) if rng.integers(2) else None
    return (lambda: heads.distill_loss(x, t, weights=w)), [x]


def _distill_probs(rng):
    x = leaf(rng.uniform(0.05, 0.95, size=(3, 4)))
    t = rng.random((3, 4))
    return (lambda: heads.distill_loss(x, t, from_logits=False)), [x]


LOSS_CASES = {
    "sigmoid_focal_loss": _focal,
    "centernet_heatmap_loss": _heatmap,
    "regression_loss": _regression,
    "cross_entropy": _cross_entropy,
    "distill_loss_logits": _distill_logits,
    "distill_loss_probs": _distill_probs,
}

ALL_CASES = {**OP_CASES, **LOSS_CASES}


def worst_error(name: str, instances: int = 20, seed: int = 0) -> float:
    build = ALL_CASES[name]
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        fn, params = build(rng)
        worst = max(worst, ad.gradcheck(fn, params))
    return worst
