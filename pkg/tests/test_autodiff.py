"""Engine tests: primitive examples, gradient oracle, tape discipline,
dropout and the optimizer."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dcl import autodiff as ad
from dcl.autodiff import Tape, Tensor
from dcl.gradcheck import check_gradients, numerical_gradient, primitive_suite, relative_error
from dcl.optim import Adam


# ---------------------------------------------------------------------------
# convolution examples


def test_conv_zero_kernel():
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=1, padding="same")
    assert out.shape == (1, 1, 4, 4)
    assert np.all(out.data == 0)


def test_conv_delta_kernel_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 3, 3)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(k), stride=1, padding="same")
    assert_allclose(out.data, x.data)


def test_conv_valid_window_sums():
    x = Tensor(np.arange(1.0, 17.0).reshape(1, 1, 4, 4))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=1, padding="valid")
    # hand-summed 3x3 windows of [[1..4],[5..8],[9..12],[13..16]]
    assert_allclose(out.data[0, 0], [[54.0, 63.0], [90.0, 99.0]])


def test_conv_channel_mismatch_names_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        ad.conv2d(x, w)


def test_conv_valid_kernel_too_large():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                  padding="valid")


def test_conv_transpose_shapes():
    x = Tensor(np.zeros((2, 3, 4, 4)))
    w = Tensor(np.zeros((3, 5, 4, 4)))
    out = ad.conv2d_transpose(x, w, stride=2, padding=1)
    assert out.shape == (2, 5, 8, 8)
    w3 = Tensor(np.zeros((3, 5, 3, 3)))
    assert ad.conv2d_transpose(x, w3, stride=2, padding=1).shape == (2, 5, 7, 7)


# ---------------------------------------------------------------------------
# softmax examples


def test_softmax_uniform():
    out = ad.softmax(Tensor(np.zeros(3)), axis=-1)
    assert_allclose(out.data, [1 / 3] * 3)


def test_softmax_overflow_safe():
    out = ad.softmax(Tensor(np.array([1000.0, 0.0])), axis=-1)
    assert np.all(np.isfinite(out.data))
    assert_allclose(out.data, [1.0, 0.0])


def test_softmax_direct_normalization():
    out = ad.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axis=-1)
    assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)


def test_softmax_shift_invariance_and_row_sums():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 7))
    a = ad.softmax(Tensor(x), axis=-1).data
    b = ad.softmax(Tensor(x + 13.7), axis=-1).data
    assert_allclose(a, b, atol=1e-12)
    assert np.abs(a.sum(axis=1) - 1.0).max() < 1e-12
    single = ad.softmax(Tensor(x.astype(np.float32)), axis=-1).data
    assert np.abs(single.sum(axis=1) - 1.0).max() < 1e-5


# ---------------------------------------------------------------------------
# backward examples and tape discipline


def test_backward_quadratic():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.mul(w, w))
    grads = ad.backward(loss, tape, [w])
    assert_allclose(grads[w].data, [2.0, 4.0])


def test_backward_constant_loss_zero_grads():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = Tensor(np.array(5.0))
    grads = ad.backward(loss, tape, [w])
    assert np.all(grads[w].data == 0)


def test_backward_softmax_cross_entropy_matches_fd():
    rng = np.random.default_rng(3)
    onehot = np.eye(5)[rng.integers(0, 5, size=4)]

    def build(logits):
        p = ad.clip(ad.softmax(logits, axis=-1), ad.PROB_EPS, 1.0)
        return ad.neg(ad.mean(ad.sum_(ad.mul(Tensor(onehot), ad.log(p)), axis=1)))

    assert check_gradients(build, [rng.standard_normal((4, 5))]) <= 1e-6


def test_backward_rejects_nonscalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ad.mul(w, w)
    with pytest.raises(ad.ShapeError):
        ad.backward(out, tape)


def test_tape_single_use():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.mul(w, w))
    ad.backward(loss, tape, [w])
    with pytest.raises(ad.TapeError):
        ad.backward(loss, tape, [w])


def test_unused_parameter_gets_zeros():
    used = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(used)
    grads = ad.backward(loss, tape, [used, unused])
    assert_allclose(grads[used].data, [1.0, 1.0])
    assert np.all(grads[unused].data == 0) and grads[unused].shape == (4,)


def test_no_record_context():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with ad.no_record():
            ad.sum_(ad.mul(w, w))
        loss = ad.sum_(w)
    assert len(tape) == 1


def test_fanout_accumulates():
    w = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(w, w)        # w^2
        loss = ad.add(ad.sum_(y), ad.sum_(ad.mul(w, Tensor(np.array([5.0])))))
    grads = ad.backward(loss, tape, [w])
    assert_allclose(grads[w].data, [2 * 3.0 + 5.0])


# ---------------------------------------------------------------------------
# gradient suite (every differentiable primitive)


def test_primitive_gradients_double():
    report = primitive_suite(seed=0)
    bad = {name: err for name, err in report.items() if err > 1e-6}
    assert not bad, f"primitives over tolerance: {bad}"


def test_gradients_single_precision_spotcheck():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((4, 2)).astype(np.float32)

    def build(a, b):
        weigh = Tensor(np.random.default_rng(5).standard_normal((3, 2)))
        return ad.sum_(ad.mul(ad.tanh(ad.matmul(a, b)), weigh))

    err = check_gradients(build, [x, w], h=3e-3, dtype=np.float32)
    assert err <= 1e-3


# ---------------------------------------------------------------------------
# dropout


def test_dropout_rate_zero_identity():
    x = Tensor(np.ones((3, 3)))
    assert ad.dropout_apply(x, 0.0, 1) is x


def test_dropout_mean_preserved():
    x = Tensor(np.ones(100000))
    out = ad.dropout_apply(x, 0.5, 123)
    assert 0.97 <= float(out.data.mean()) <= 1.03


def test_dropout_deterministic_per_seed():
    x = Tensor(np.ones((10, 10)))
    a = ad.dropout_apply(x, 0.3, 7).data
    b = ad.dropout_apply(x, 0.3, 7).data
    c = ad.dropout_apply(x, 0.3, 8).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        ad.dropout_apply(Tensor(np.ones(3)), 1.0, 0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    opt.step({p: Tensor(np.zeros(2))})
    assert_allclose(p.data, [1.0, -2.0])
    assert opt.state.step == 1


def test_adam_first_step_bias_corrected():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8)
    opt.step({p: Tensor(np.array([1.0]))})
    # bias-corrected moments are exactly the gradient on step one
    assert_allclose(p.data, [1.0 - 1e-4 * (1.0 / (1.0 + 1e-8))], rtol=0, atol=1e-12)


def test_adam_monotone_under_constant_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=1e-4, beta1=0.5)
    values = [float(p.data[0])]
    for _ in range(2):
        opt.step({p: Tensor(np.array([1.0]))})
        values.append(float(p.data[0]))
    assert values[2] < values[1] < values[0]


def test_adam_aborts_on_nan():
    p = Tensor(np.array([1.0]), requires_grad=True, name="theta")
    opt = Adam([p])
    with pytest.raises(FloatingPointError, match="theta"):
        opt.step({p: Tensor(np.array([np.nan]))})


# ---------------------------------------------------------------------------
# misc invariants


def test_batchnorm_composition_normalizes():
    rng = np.random.default_rng(4)
    x = Tensor((rng.standard_normal((64, 5)) * 3 + 2).astype(np.float32))
    mu = ad.mean(x, axis=0, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=0, keepdims=True)
    xhat = ad.div(xc, ad.sqrt(var + 1e-5)).data
    assert np.abs(xhat.mean(axis=0)).max() < 1e-4
    assert np.abs(xhat.var(axis=0) - 1.0).max() < 1e-3


def test_leaky_relu_slope_at_zero():
    x = Tensor(np.array([0.0, -1.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.leaky_relu(x, 0.2))
    grads = ad.backward(loss, tape, [x])
    assert_allclose(grads[x].data, [0.2, 0.2, 1.0])


def test_deterministic_losses_same_seed():
    def run():
        rng = np.random.default_rng(77)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        opt = Adam([w], lr=1e-3)
        trace = []
        for _ in range(5):
            x = Tensor(rng.standard_normal((8, 4)))
            with Tape() as tape:
                loss = ad.mean(ad.mul(ad.tanh(ad.matmul(x, w)), ad.tanh(ad.matmul(x, w))))
            trace.append(loss.item())
            opt.step(ad.backward(loss, tape, [w]))
        return trace

    assert run() == run()


def test_relative_error_and_numerical_gradient_helpers():
    f = lambda a: float((a**3).sum())
    x = np.array([1.0, 2.0])
    num = numerical_gradient(f, [x], 0)
    assert relative_error(3 * x**2, num) < 1e-9
