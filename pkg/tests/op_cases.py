"""Random-instance builders for every differentiable tensor op, shared by the gradient checks."""

import numpy as np
import scipy.sparse as sp

from splatseg import tensor as T


def _away(rng, shape, lo=0.1):
    """Values bounded away from zero (keeps |x|, relu and division smooth)."""
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _sparse(rng, m, n):
    dense = rng.normal(size=(m, n)) * (rng.random((m, n)) < 0.4)
    return sp.csr_matrix(dense)


# name -> rng -> (op, input arrays)
OPS = {
    "add_broadcast": lambda r: (T.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (T.sub, [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "mul": lambda r: (T.mul, [r.normal(size=(3, 3)), r.normal(size=(1, 3))]),
    "div": lambda r: (T.div, [r.normal(size=(4,)), _away(r, (4,), 0.5)]),
    "neg": lambda r: (T.neg, [r.normal(size=(5,))]),
    "power": lambda r: (lambda a: T.power(a, 1.7), [r.uniform(0.3, 2.0, size=(6,))]),
    "exp": lambda r: (T.exp, [r.normal(size=(2, 3))]),
    "log": lambda r: (T.log, [r.uniform(0.2, 3.0, size=(5,))]),
    "sqrt": lambda r: (T.sqrt, [r.uniform(0.2, 3.0, size=(5,))]),
    "abs": lambda r: (T.tabs, [_away(r, (6,))]),
    "relu": lambda r: (T.relu, [_away(r, (3, 3))]),
    "sigmoid": lambda r: (T.sigmoid, [r.normal(0, 3, size=(7,))]),
    "sum_axis": lambda r: (lambda a: T.tsum(a, axis=1), [r.normal(size=(3, 4))]),
    "mean_keepdims": lambda r: (lambda a: T.mean(a, axis=0, keepdims=True), [r.normal(size=(3, 4))]),
    "reshape": lambda r: (lambda a: T.reshape(a, (6, 2)), [r.normal(size=(3, 4))]),
    "transpose": lambda r: (lambda a: T.transpose(a, (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
    "getitem_fancy": lambda r: (lambda a: a[np.array([0, 2, 2]), np.array([1, 0, 0])],
                                [r.normal(size=(3, 3))]),
    "take_rows_dup": lambda r: (lambda a: T.take_rows(a, [3, 0, 3, 1]), [r.normal(size=(4, 2))]),
    "concat": lambda r: (lambda a, b: T.concat([a, b], axis=1),
                         [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "matmul": lambda r: (T.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "sparse_matmul": lambda r: ((lambda m: (lambda x: T.sparse_matmul(m, x)))(_sparse(r, 5, 4)),
                                [r.normal(size=(4, 3))]),
    "logsumexp": lambda r: (lambda a: T.logsumexp(a, axis=1), [r.normal(0, 3, size=(3, 5))]),
    "softmax": lambda r: (lambda a: T.softmax(a, axis=0), [r.normal(size=(4, 3))]),
    "log_softmax": lambda r: (lambda a: T.log_softmax(a, axis=1), [r.normal(size=(3, 4))]),
    "layer_norm": lambda r: (T.layer_norm, [r.normal(size=(3, 5))]),
    "l2_normalize": lambda r: (lambda a: T.l2_normalize(a, axis=1), [r.normal(size=(4, 3))]),
    "conv2d_pad": lambda r: (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
                             [r.normal(size=(2, 5, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
    "conv2d_stride": lambda r: (lambda x, w: T.conv2d(x, w, None, stride=2, padding=1),
                                [r.normal(size=(2, 6, 6)), r.normal(size=(2, 2, 3, 3))]),
    "conv2d_1x1": lambda r: (lambda x, w, b: T.conv2d(x, w, b),
                             [r.normal(size=(3, 4, 4)), r.normal(size=(2, 3, 1, 1)), r.normal(size=(2,))]),
    "upsample2x": lambda r: (T.upsample2x, [r.normal(size=(2, 3, 4))]),
    "separable_filter": lambda r: ((lambda k: (lambda x: T.separable_filter(x, k)))(r.uniform(0.1, 1, 3)),
                                   [r.normal(size=(2, 5, 6))]),
}
