import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flipxfer import autodiff as ad
from flipxfer.autodiff import (
    NonFiniteError,
    SgdState,
    ShapeError,
    Tape,
    Tensor,
    backward,
    np_log_softmax,
    np_softmax,
    sgd_step,
)

from oracles import analytic_grads, finite_diff_grads, max_rel_error

RNG = np.random.default_rng(1234)


def _away_from_zero(x, margin=0.05):
    return x + margin * np.sign(x)


def check_op(build_loss, params, tol=1e-5):
    _, got = analytic_grads(build_loss, params)
    want = finite_diff_grads(build_loss, params)
    assert max_rel_error(got, want) <= tol


# ---------------------------------------------------------------------------
# spec examples


def test_log_softmax_symmetry():
    out = np_log_softmax(np.zeros((1, 3)))
    assert np.allclose(out, -np.log(3.0), atol=1e-15)


def test_relu_example():
    x = Tensor([[-1.0, 2.0]])
    assert np.array_equal(ad.relu(x).data, [[0.0, 2.0]])


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(k), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


def test_backward_sum_is_ones():
    theta = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.weighted_sum(theta, np.ones((4, 3)))
    backward(tape, loss)
    assert np.array_equal(theta.grad, np.ones((4, 3)))


def test_backward_half_sq_norm_is_theta():
    theta = Tensor(RNG.normal(size=(5,)).reshape(1, 5), requires_grad=True)
    with Tape() as tape:
        sq = ad.scale(ad.reshape(ad.gram(theta), ()), 0.5)  # 0.5 * ||theta||^2
    backward(tape, sq)
    assert np.allclose(theta.grad, theta.data, atol=1e-15)


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)))
    assert exc.value.op == "affine"
    assert exc.value.shapes == ((2, 3), (4, 5))
    assert "affine" in str(exc.value) and "(2, 3)" in str(exc.value)


# ---------------------------------------------------------------------------
# gradient checks, op by op


def test_grad_affine():
    x = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(RNG.normal(size=(3, 5)), requires_grad=True)
    b = Tensor(RNG.normal(size=5), requires_grad=True)
    wts = RNG.normal(size=(4, 5))
    check_op(lambda: ad.weighted_sum(ad.affine(x, w, b), wts), {"x": x, "w": w, "b": b})


def test_grad_matmul():
    a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 2)), requires_grad=True)
    wts = RNG.normal(size=(3, 2))
    check_op(lambda: ad.weighted_sum(ad.matmul(a, b), wts), {"a": a, "b": b})


def test_grad_relu():
    x = Tensor(_away_from_zero(RNG.normal(size=(4, 6))), requires_grad=True)
    wts = RNG.normal(size=(4, 6))
    check_op(lambda: ad.weighted_sum(ad.relu(x), wts), {"x": x})


@pytest.mark.parametrize("stride", [1, 2])
def test_grad_conv2d(stride):
    x = Tensor(RNG.normal(size=(2, 2, 5, 4)), requires_grad=True)
    w = Tensor(RNG.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(RNG.normal(size=3), requires_grad=True)
    oh = (5 + 2 - 3) // stride + 1
    ow = (4 + 2 - 3) // stride + 1
    wts = RNG.normal(size=(2, 3, oh, ow))
    check_op(
        lambda: ad.weighted_sum(ad.conv2d(x, w, b, stride=stride), wts),
        {"x": x, "w": w, "b": b},
    )


def test_grad_global_avg_pool():
    x = Tensor(RNG.normal(size=(2, 3, 4, 4)), requires_grad=True)
    wts = RNG.normal(size=(2, 3))
    check_op(lambda: ad.weighted_sum(ad.global_avg_pool(x), wts), {"x": x})


def test_grad_dropout_fixed_mask():
    x = Tensor(RNG.normal(size=(3, 8)), requires_grad=True)
    wts = RNG.normal(size=(3, 8))

    def loss():
        rng = np.random.default_rng(7)  # same mask on every evaluation
        return ad.weighted_sum(ad.dropout(x, 0.4, rng), wts)

    check_op(loss, {"x": x})


def test_grad_log_softmax():
    x = Tensor(RNG.normal(size=(5, 7)), requires_grad=True)
    wts = RNG.normal(size=(5, 7))
    check_op(lambda: ad.weighted_sum(ad.log_softmax(x), wts), {"x": x})


def test_grad_mean():
    x = Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
    check_op(lambda: ad.mean(x), {"x": x})


def test_grad_gather_cols():
    x = Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
    idx = np.stack([RNG.permutation(6)[:3] for _ in range(4)])
    wts = RNG.normal(size=(4, 3))
    check_op(lambda: ad.weighted_sum(ad.gather_cols(x, idx), wts), {"x": x})


def test_grad_l2_normalize_rows():
    x = Tensor(RNG.normal(size=(4, 5)) + 0.5, requires_grad=True)
    wts = RNG.normal(size=(4, 5))
    check_op(lambda: ad.weighted_sum(ad.l2_normalize_rows(x), wts), {"x": x})


def test_grad_gram():
    x = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    wts = RNG.normal(size=(4, 4))
    check_op(lambda: ad.weighted_sum(ad.gram(x), wts), {"x": x})


def test_grad_reshape_scale_add():
    x = Tensor(RNG.normal(size=(2, 6)), requires_grad=True)
    y = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    wts = RNG.normal(size=(3, 4))

    def loss():
        return ad.weighted_sum(ad.add(ad.scale(ad.reshape(x, (3, 4)), 1.7), y), wts)

    check_op(loss, {"x": x, "y": y})


def test_grad_two_layer_mlp_kl_vs_finite_differences():
    # random 2-layer net distilled against fixed teacher logits
    from flipxfer.transfer import kl_loss

    w1 = Tensor(RNG.normal(size=(6, 8), scale=0.5), requires_grad=True)
    b1 = Tensor(RNG.normal(size=8, scale=0.1), requires_grad=True)
    w2 = Tensor(RNG.normal(size=(8, 4), scale=0.5), requires_grad=True)
    b2 = Tensor(RNG.normal(size=4, scale=0.1), requires_grad=True)
    x = Tensor(RNG.normal(size=(5, 6)))
    teacher = RNG.normal(size=(5, 4))

    def loss():
        h = ad.relu(ad.affine(x, w1, b1))
        return kl_loss(ad.affine(h, w2, b2), teacher, 2.0)

    check_op(loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})


# ---------------------------------------------------------------------------
# softmax invariants


def test_softmax_rows_sum_to_one():
    z = RNG.normal(size=(20, 9), scale=10)
    s = np_softmax(z)
    assert np.abs(s.sum(axis=1) - 1.0).max() < 1e-12
    assert np.abs(np.exp(np_log_softmax(z)) - s).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 6), st.integers(2, 8)),
        elements=st.floats(-100, 100, allow_nan=False),
    )
)
def test_log_softmax_logsumexp_property(z):
    ls = np_log_softmax(z)
    lse = np.log(np.sum(np.exp(ls), axis=1))
    assert np.abs(lse).max() < 1e-10


# ---------------------------------------------------------------------------
# SGD


def test_sgd_plain_step():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    sgd_step(p, {"w": np.array([2.0])}, SgdState(lr=1.0))
    assert np.array_equal(p["w"].data, [-1.0])


def test_sgd_lr_zero_is_bit_exact_identity():
    vals = RNG.normal(size=17)
    p = {"w": Tensor(vals.copy(), requires_grad=True)}
    sgd_step(p, {"w": RNG.normal(size=17)}, SgdState(lr=0.0, momentum=0.5, weight_decay=0.1))
    assert np.array_equal(p["w"].data, vals)


def test_sgd_momentum_recurrence():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    state = SgdState(lr=0.1, momentum=0.9)
    sgd_step(p, {"w": np.array([1.0])}, state)
    sgd_step(p, {"w": np.array([1.0])}, state)
    assert p["w"].data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_weight_decay_folds_into_gradient():
    p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
    sgd_step(p, {"w": np.array([0.0])}, SgdState(lr=0.5, weight_decay=0.1))
    # v = 0 + 0.1*2 = 0.2; w = 2 - 0.5*0.2
    assert p["w"].data[0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_rejects_nonfinite_gradient():
    p = {"layer.w": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(NonFiniteError) as exc:
        sgd_step(p, {"layer.w": np.array([np.nan])}, SgdState(lr=0.1))
    assert "layer.w" in str(exc.value)


# ---------------------------------------------------------------------------
# determinism


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(6, 5)))
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            out = ad.log_softmax(ad.affine(ad.relu(ad.scale(x, 1.3)), w, b))
            loss = ad.weighted_sum(out, rng.normal(size=(6, 3)))
        backward(tape, loss)
        return loss.item(), w.grad.copy(), b.grad.copy()

    l1, gw1, gb1 = run()
    l2, gw2, gb2 = run()
    assert l1 == l2
    assert np.array_equal(gw1, gw2)
    assert np.array_equal(gb1, gb2)
