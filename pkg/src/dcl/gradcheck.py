"""Central finite-difference oracle for verifying reverse-mode gradients.

Every differentiable primitive gets a double-precision check here; the CLI
``grad-check`` subcommand and the acceptance suite both run
:func:`primitive_suite`.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape


def numerical_gradient(f, arrays, index, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(*arrays)
        flat[i] = orig - step
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=0.1):
    """Max elementwise |a-n| / max(floor, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build, arrays, h=1e-5, dtype=np.float64):
    """Compare the tape gradient of ``build`` against central differences.

    ``build`` maps Tensors (one per input array) to a scalar Tensor and must
    be deterministic: calling it twice on the same values must give the same
    scalar. Returns the worst relative error over all inputs.
    """
    arrays = [np.asarray(a, dtype=dtype) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    grads = ad.backward(loss, tape, tensors)

    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = numerical_gradient(scalar, arrays, i, h=h)
        worst = max(worst, relative_error(grads[t].data, numeric))
    return worst


def _weigh(t, key):
    # fixed random linear functional: turns any output into a scalar
    w = np.random.default_rng(key).standard_normal(t.shape)
    return ad.sum_(ad.mul(t, Tensor(w)))


def primitive_suite(seed=0):
    """Max relative FD error for each differentiable primitive.

    Returns ``{name: error}``; everything should come in below 1e-6 at double
    precision.
    """
    rng = np.random.default_rng(seed)
    x34 = rng.standard_normal((3, 4))
    y34 = rng.standard_normal((3, 4))
    x45 = rng.standard_normal((4, 5))
    img = rng.standard_normal((2, 3, 6, 6))
    ker = rng.standard_normal((4, 3, 3, 3)) * 0.5
    small = rng.standard_normal((2, 3, 3, 3))
    kerT = rng.standard_normal((3, 4, 4, 4)) * 0.5
    away = np.where(np.abs(x34) < 0.1, x34 + 0.25, x34)  # keep clear of kinks
    logits = rng.standard_normal((5, 4))
    onehot = np.eye(4)[rng.integers(0, 4, size=5)]
    gamma = rng.standard_normal(3) * 0.5 + 1.0
    beta = rng.standard_normal(3) * 0.1

    probs = rng.dirichlet(np.ones(4), size=5) * 0.9 + 0.02  # clear of the clip edges
    target = rng.dirichlet(np.ones(4), size=5)

    def softmax_xent(lg):
        p = ad.clip(ad.softmax(lg, axis=-1), ad.PROB_EPS, 1.0)
        return ad.neg(ad.mean(ad.sum_(ad.mul(Tensor(onehot), ad.log(p)), axis=1)))

    def batchnorm_train(x):
        mu = ad.mean(x, axis=0, keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.mean(ad.mul(xc, xc), axis=0, keepdims=True)
        xhat = ad.div(xc, ad.sqrt(var + 1e-5))
        return _weigh(ad.add(ad.mul(xhat, Tensor(gamma)), Tensor(beta)), 107)

    checks = {
        "add": (lambda a, b: _weigh(ad.add(a, b), 100), [x34, y34]),
        "mul": (lambda a, b: _weigh(ad.mul(a, b), 101), [x34, y34]),
        "div": (lambda a, b: _weigh(ad.div(a, b), 102), [x34, np.abs(y34) + 0.5]),
        "matmul": (lambda a, b: _weigh(ad.matmul(a, b), 103), [x34, x45]),
        "conv2d_same_s2": (
            lambda a, b: _weigh(ad.conv2d(a, b, stride=2, padding="same"), 104),
            [img, ker],
        ),
        "conv2d_valid_s1": (
            lambda a, b: _weigh(ad.conv2d(a, b, stride=1, padding="valid"), 105),
            [img, ker],
        ),
        "conv2d_transpose": (
            lambda a, b: _weigh(ad.conv2d_transpose(a, b, stride=2, padding=1), 106),
            [small, kerT],
        ),
        "batchnorm_train": (batchnorm_train, [rng.standard_normal((6, 3)) * 2 + 1]),
        "leaky_relu": (lambda a: _weigh(ad.leaky_relu(a, 0.2), 108), [away]),
        "tanh": (lambda a: _weigh(ad.tanh(a), 109), [x34]),
        "sigmoid": (lambda a: _weigh(ad.sigmoid(a), 110), [x34]),
        "softmax": (lambda a: _weigh(ad.softmax(a, axis=-1), 111), [x34]),
        "log": (lambda a: _weigh(ad.log(a), 112), [np.abs(x34) + 0.5]),
        "exp": (lambda a: _weigh(ad.exp(a), 113), [x34 * 0.5]),
        "sqrt": (lambda a: _weigh(ad.sqrt(a), 114), [np.abs(x34) + 0.5]),
        "sum": (lambda a: _weigh(ad.sum_(a, axis=0), 115), [x34]),
        "mean": (lambda a: _weigh(ad.mean(a, axis=1), 116), [x34]),
        "reshape": (lambda a: _weigh(ad.reshape(a, (4, 3)), 117), [x34]),
        "transpose": (lambda a: _weigh(ad.transpose(a, (1, 0)), 118), [x34]),
        "concat": (lambda a, b: _weigh(ad.concat([a, b], axis=1), 119), [x34, y34]),
        "dense": (
            lambda a, b, c: _weigh(ad.dense(a, b, c), 120),
            [x34, x45, rng.standard_normal(5)],
        ),
        "conv2d_bias": (
            lambda a, b, c: _weigh(ad.conv2d(a, b, stride=2, padding="same", bias=c), 121),
            [img, ker, rng.standard_normal(4)],
        ),
        "abs": (lambda a: _weigh(ad.abs_(a), 122), [away]),
        "clip": (lambda a: _weigh(ad.clip(a, -0.8, 0.8), 123), [away]),
        "log_clip": (lambda a: _weigh(ad.log_clip(a, 1e-12, 10.0), 124), [np.abs(x34) + 0.5]),
        "relu": (lambda a: _weigh(ad.relu(a), 125), [away]),
        "cross_entropy_mean": (
            lambda a: ad.cross_entropy_mean(target, ad.div(a, ad.sum_(a, axis=1, keepdims=True))),
            [probs],
        ),
        "entropy_mean": (lambda a: ad.entropy_mean(a), [probs]),
        "marginal_kl_uniform": (lambda a: ad.marginal_kl_uniform(a), [probs]),
        "softmax_cross_entropy": (softmax_xent, [logits]),
    }

    return {name: check_gradients(build, arrays) for name, (build, arrays) in checks.items()}
