import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipxfer import autodiff as ad
from flipxfer.autodiff import Tape, Tensor, backward, np_softmax
from flipxfer.data import Dataset
from flipxfer.models import ModelSpec, as_tensors, build, model_forward, predict_logits
from flipxfer.transfer import (
    MclState,
    PartitionMask,
    TransferError,
    TransferHyperparams,
    cd_loss,
    default_hyperparams,
    dp_loss,
    dp_masks_supervised,
    dp_masks_unsupervised,
    kl_loss,
    mcl_interpolate,
    run_transfer,
    soft_targets,
    topk_restricted_kl,
    xe_kl_loss,
    xe_loss,
)

from oracles import (
    analytic_grads,
    finite_diff_grads,
    max_rel_error,
    oracle_cd,
    oracle_dp,
    oracle_kl,
    oracle_topk,
    oracle_xe,
)

RNG = np.random.default_rng(2024)


# ---------------------------------------------------------------------------
# kl_loss


def test_kl_identical_logits_is_exactly_zero():
    z = RNG.normal(size=(6, 5))
    assert kl_loss(Tensor(z), z, 1.0).item() == 0.0
    assert kl_loss(Tensor(z), z, 2.0).item() == 0.0  # doubling T keeps it zero


def test_kl_value_against_scalar_oracle():
    student = np.zeros((1, 3))  # uniform student
    teacher = np.array([[10.0, 0.0, 0.0]])
    got = kl_loss(Tensor(student), teacher, 1.0).item()
    assert got == pytest.approx(oracle_kl(student, teacher, 1.0), rel=1e-12)


def test_kl_random_values_match_oracle_many_temps():
    for temp in (0.5, 1.0, 4.0):
        s = RNG.normal(size=(9, 6), scale=3)
        t = RNG.normal(size=(9, 6), scale=3)
        assert kl_loss(Tensor(s), t, temp).item() == pytest.approx(
            oracle_kl(s, t, temp), rel=1e-10
        )


def test_kl_nonnegative_and_zero_only_on_match():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        value = kl_loss(Tensor(s), t, 1.0).item()
        assert value >= 0.0
        if np.abs(np_softmax(s) - np_softmax(t)).max() > 1e-10:
            assert value > 0.0


def test_kl_rejects_bad_temperature():
    z = np.zeros((2, 2))
    with pytest.raises(TransferError):
        kl_loss(Tensor(z), z, 0.0)


def test_soft_targets_rows_sum_to_one():
    st_ = soft_targets(RNG.normal(size=(8, 5), scale=10), 2.0)
    assert np.abs(st_.sum(axis=1) - 1).max() < 1e-10
    assert (st_ >= 0).all()


# ---------------------------------------------------------------------------
# xe_kl


def test_xe_kl_endpoints_match_components_bitwise():
    s = RNG.normal(size=(5, 4))
    t = RNG.normal(size=(5, 4))
    y = RNG.integers(0, 4, size=5)
    assert xe_kl_loss(Tensor(s), t, y, 1.0, 1.0).item() == kl_loss(Tensor(s), t, 1.0).item()
    assert xe_kl_loss(Tensor(s), t, y, 0.0, 1.0).item() == xe_loss(Tensor(s), y).item()


def test_xe_kl_midpoint_is_mean():
    s = RNG.normal(size=(5, 4))
    t = RNG.normal(size=(5, 4))
    y = RNG.integers(0, 4, size=5)
    mid = xe_kl_loss(Tensor(s), t, y, 0.5, 1.0).item()
    kl = kl_loss(Tensor(s), t, 1.0).item()
    xe = xe_loss(Tensor(s), y).item()
    assert mid == pytest.approx(0.5 * (kl + xe), rel=1e-14)


def test_xe_matches_oracle():
    s = RNG.normal(size=(7, 5))
    y = RNG.integers(0, 5, size=7)
    assert xe_loss(Tensor(s), y).item() == pytest.approx(oracle_xe(s, y), rel=1e-12)


# ---------------------------------------------------------------------------
# MCL interpolation


def _mcl(tau, every=1):
    slow = {"w": np.array([0.0, 0.0])}
    fast = {"w": Tensor(np.array([1.0, 2.0]))}
    return MclState(slow=slow, fast=fast, tau=tau, every=every)


def test_mcl_tau_one_pins_slow_bitwise():
    state = _mcl(1.0)
    before = state.slow["w"].copy()
    for it in range(1, 10):
        mcl_interpolate(state, it)
    assert np.array_equal(state.slow["w"], before)


def test_mcl_tau_zero_copies_fast():
    state = _mcl(0.0)
    mcl_interpolate(state, 1)
    assert np.array_equal(state.slow["w"], state.fast["w"].data)


def test_mcl_momentum_value():
    state = _mcl(0.9999)
    state.fast["w"].data = np.array([1.0, 1.0])
    mcl_interpolate(state, 1)
    assert state.slow["w"][0] == pytest.approx(1e-4, rel=1e-9)


def test_mcl_respects_interval():
    state = _mcl(0.5, every=2)
    mcl_interpolate(state, 1)  # skipped
    assert np.array_equal(state.slow["w"], [0.0, 0.0])
    mcl_interpolate(state, 2)  # applied
    assert np.allclose(state.slow["w"], [0.5, 1.0])


def test_mcl_rejects_zero_iteration():
    with pytest.raises(TransferError):
        mcl_interpolate(_mcl(0.5), 0)


# ---------------------------------------------------------------------------
# data-partition masks


def test_supervised_mask_follows_ground_truth_probability():
    # teacher 0.8 vs frozen student 0.6 on the true class -> teacher wins
    teacher = np.log(np.array([[0.8, 0.1, 0.1]]))
    st_ = np.log(np.array([[0.6, 0.2, 0.2]]))
    mask = dp_masks_supervised(teacher, st_, np.array([0]))
    assert mask.m_t[0] and not mask.m_st[0]


def test_supervised_mask_tie_goes_to_student_reference():
    z = RNG.normal(size=(4, 3))
    mask = dp_masks_supervised(z, z.copy(), np.array([0, 1, 2, 0]))
    assert not mask.m_t.any()
    assert mask.m_st.all()


def test_unsupervised_confident_teacher_everywhere():
    teacher = np.eye(4) * 9.0
    st_ = np.zeros((4, 4))
    mask = dp_masks_unsupervised(teacher, st_)
    assert mask.m_t.all()


def test_unsupervised_equals_supervised_when_both_argmax_correct():
    rng = np.random.default_rng(3)
    n, c = 300, 6
    labels = rng.integers(0, c, size=n)
    teacher = rng.normal(size=(n, c))
    st_ = rng.normal(size=(n, c))
    # force both argmax to the label on a subset
    boost = rng.random(n) < 0.5
    teacher[boost, labels[boost]] += 10
    st_[boost, labels[boost]] += 10
    sup = dp_masks_supervised(teacher, st_, labels)
    unsup = dp_masks_unsupervised(teacher, st_)
    both_correct = (np.argmax(teacher, axis=1) == labels) & (np.argmax(st_, axis=1) == labels)
    assert np.array_equal(sup.m_t[both_correct], unsup.m_t[both_correct])


def test_mask_partition_enforced():
    with pytest.raises(TransferError):
        PartitionMask(np.array([True, False]), np.array([True, False]))


# ---------------------------------------------------------------------------
# dp_loss


def test_dp_all_teacher_equals_kl_bitwise():
    s = RNG.normal(size=(6, 5))
    t = RNG.normal(size=(6, 5))
    st_ = RNG.normal(size=(6, 5))
    mask = PartitionMask(np.ones(6, bool), np.zeros(6, bool))
    assert dp_loss(Tensor(s), t, st_, mask, 2.0).item() == kl_loss(Tensor(s), t, 2.0).item()


def test_dp_all_student_reference_self_distillation_zero():
    s = RNG.normal(size=(4, 3))
    mask = PartitionMask(np.zeros(4, bool), np.ones(4, bool))
    assert dp_loss(Tensor(s), RNG.normal(size=(4, 3)), s, mask, 1.0).item() == 0.0


def test_dp_half_half_matches_oracle():
    s = RNG.normal(size=(6, 4))
    t = RNG.normal(size=(6, 4))
    st_ = RNG.normal(size=(6, 4))
    m_t = np.array([1, 0, 1, 0, 1, 0], dtype=bool)
    mask = PartitionMask(m_t, ~m_t)
    got = dp_loss(Tensor(s), t, st_, mask, 1.5).item()
    assert got == pytest.approx(oracle_dp(s, t, st_, m_t, 1.5), rel=1e-10)


def test_dp_reduction_bitwise_on_100_random_fixtures():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        s = rng.normal(size=(n, c), scale=4)
        t = rng.normal(size=(n, c), scale=4)
        st_ = rng.normal(size=(n, c), scale=4)
        temp = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        mask = PartitionMask(np.ones(n, bool), np.zeros(n, bool))
        assert dp_loss(Tensor(s), t, st_, mask, temp).item() == kl_loss(Tensor(s), t, temp).item()


# ---------------------------------------------------------------------------
# top-k restricted divergence


def test_topk_full_k_equals_kl():
    s = RNG.normal(size=(5, 6))
    t = RNG.normal(size=(5, 6))
    assert topk_restricted_kl(Tensor(s), t, 1.0, 6).item() == pytest.approx(
        kl_loss(Tensor(s), t, 1.0).item(), abs=1e-12
    )


def test_topk_matched_top1_mass_zero():
    t = np.array([[30.0, 0.0, -30.0]])
    s = np.array([[5.0, -40.0, -80.0]])  # same argmax, rest negligible
    assert topk_restricted_kl(Tensor(s), t, 1.0, 1).item() == pytest.approx(0.0, abs=1e-12)


def test_topk_three_class_hand_fixture():
    t = np.log(np.array([[0.6, 0.3, 0.1]]))
    s = np.log(np.array([[0.2, 0.5, 0.3]]))
    got = topk_restricted_kl(Tensor(s), t, 1.0, 2).item()
    assert got == pytest.approx(oracle_topk(s, t, 1.0, 2), rel=1e-10)


def test_topk_matches_oracle_random():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(7, 8), scale=2)
        t = rng.normal(size=(7, 8), scale=2)
        k = int(rng.integers(1, 9))
        got = topk_restricted_kl(Tensor(s), t, 2.0, k).item()
        assert got == pytest.approx(oracle_topk(s, t, 2.0, k), rel=1e-9)


def test_topk_out_of_range():
    z = np.zeros((2, 3))
    for k in (0, 4):
        with pytest.raises(TransferError):
            topk_restricted_kl(Tensor(z), z, 1.0, k)


# ---------------------------------------------------------------------------
# cd_loss


def test_cd_identical_features_zero():
    f = RNG.normal(size=(5, 7))
    assert cd_loss(Tensor(f.copy()), f).item() == 0.0


def test_cd_scale_invariance():
    f = RNG.normal(size=(5, 7))
    assert cd_loss(Tensor(2.0 * f), f).item() == pytest.approx(0.0, abs=1e-12)


def test_cd_orthogonal_vs_collinear_fixture():
    teacher = np.array([[1.0, 0.0], [1.0, 0.0]])  # collinear pair
    student = np.array([[1.0, 0.0], [0.0, 1.0]])  # orthogonal pair
    got = cd_loss(Tensor(student), teacher).item()
    assert got == pytest.approx(oracle_cd(student, teacher), rel=1e-10)
    assert got > 0


def test_cd_rejects_zero_norm_and_tiny_batch():
    with pytest.raises(TransferError):
        cd_loss(Tensor(np.ones((1, 3))), np.ones((1, 3)))
    with pytest.raises(TransferError):
        cd_loss(Tensor(np.ones((2, 3))), np.vstack([np.ones(3), np.zeros(3)]))
    with pytest.raises(ValueError):
        cd_loss(Tensor(np.vstack([np.ones(3), np.zeros(3)])), np.ones((2, 3)))


# ---------------------------------------------------------------------------
# analytic gradients of every objective vs finite differences


def _tiny_net(seed, d_in=5, width=6, c=4):
    rng = np.random.default_rng(seed)
    return {
        "w1": Tensor(rng.normal(size=(d_in, width), scale=0.6), requires_grad=True),
        "b1": Tensor(rng.normal(size=width, scale=0.1), requires_grad=True),
        "w2": Tensor(rng.normal(size=(width, c), scale=0.6), requires_grad=True),
        "b2": Tensor(rng.normal(size=c, scale=0.1), requires_grad=True),
    }


def _logits(params, x):
    h = ad.relu(ad.affine(x, params["w1"], params["b1"]))
    return ad.affine(h, params["w2"], params["b2"])


@pytest.mark.parametrize("objective", ["kl", "xe_kl", "dp", "topk", "cd"])
def test_objective_gradients_match_finite_differences(objective):
    rng = np.random.default_rng(hash(objective) % 2**32)
    params = _tiny_net(rng.integers(2**31))
    x = Tensor(rng.normal(size=(6, 5)))
    teacher = rng.normal(size=(6, 4), scale=2)
    st_ = rng.normal(size=(6, 4), scale=2)
    labels = rng.integers(0, 4, size=6)
    m_t = rng.random(6) < 0.5
    mask = PartitionMask(m_t, ~m_t)
    teacher_feats = rng.normal(size=(6, 6))

    def loss():
        z = _logits(params, x)
        if objective == "kl":
            return kl_loss(z, teacher, 2.0)
        if objective == "xe_kl":
            return xe_kl_loss(z, teacher, labels, 0.7, 2.0)
        if objective == "dp":
            return dp_loss(z, teacher, st_, mask, 2.0)
        if objective == "topk":
            return topk_restricted_kl(z, teacher, 2.0, 2)
        return cd_loss(ad.affine(x, params["w1"], params["b1"]), teacher_feats)

    _, got = analytic_grads(loss, params)
    want = finite_diff_grads(loss, params)
    assert max_rel_error(got, want) <= 1e-5


# ---------------------------------------------------------------------------
# run_transfer plumbing


def _toy_dataset(seed, n=120, c=4, dims=6):
    rng = np.random.default_rng(seed)
    anchors = rng.normal(size=(c, dims)) * 2.5
    labels = np.repeat(np.arange(c), n // c)
    inputs = anchors[labels] + rng.normal(size=(n, dims))
    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], c)


SPEC = ModelSpec(family="mlp", depth=2, input_shape=(6,), num_classes=4, width=8)
HP = TransferHyperparams(lr=0.02, epochs=2, batch_size=32, seed=1)


@pytest.fixture(scope="module")
def toy_sets():
    return _toy_dataset(1), _toy_dataset(2)


def test_run_transfer_frozen_models_untouched(toy_sets):
    train, val = toy_sets
    student = build(SPEC, seed=1)
    teacher = build(SPEC, seed=2)
    s_before = {k: v.copy() for k, v in student.params.items()}
    t_before = {k: v.copy() for k, v in teacher.params.items()}
    res = run_transfer(student, teacher, "kl", HP, train, val)
    for k in s_before:
        assert np.array_equal(student.params[k], s_before[k])
        assert np.array_equal(teacher.params[k], t_before[k])
    assert res.report.delta_transf == pytest.approx(
        res.per_epoch[-1].val_accuracy - res.extras["acc_before"], abs=1e-15
    )


def test_run_transfer_rejects_class_mismatch(toy_sets):
    train, val = toy_sets
    other = ModelSpec(family="mlp", depth=2, input_shape=(6,), num_classes=5, width=8)
    with pytest.raises(TransferError):
        run_transfer(build(SPEC, 1), build(other, 2), "kl", HP, train, val)


def test_run_transfer_rejects_unknown_method(toy_sets):
    train, val = toy_sets
    with pytest.raises(TransferError) as exc:
        run_transfer(build(SPEC, 1), build(SPEC, 2), "fancy", HP, train, val)
    assert "kl_dp_sup" in str(exc.value)


def test_run_transfer_deterministic(toy_sets):
    train, val = toy_sets
    student, teacher = build(SPEC, 3), build(SPEC, 4)
    a = run_transfer(student, teacher, "kl_dp_sup", HP, train, val)
    b = run_transfer(student, teacher, "kl_dp_sup", HP, train, val)
    for k in a.student_after.params:
        assert np.array_equal(a.student_after.params[k], b.student_after.params[k])
    assert (a.report.delta_acc, a.report.delta_transf) == (b.report.delta_acc, b.report.delta_transf)
    assert np.array_equal(a.report.per_class_gain, b.report.per_class_gain, equal_nan=True)


def test_run_transfer_mcl_tau_one_returns_init_bitwise(toy_sets):
    train, val = toy_sets
    student, teacher = build(SPEC, 5), build(SPEC, 6)
    hp = TransferHyperparams(lr=0.05, epochs=2, batch_size=32, seed=0, lam=0.7, mcl_tau=1.0)
    res = run_transfer(student, teacher, "xe_kl_mcl", hp, train, val)
    for k in student.params:
        assert np.array_equal(res.student_after.params[k], student.params[k])
    assert res.per_epoch[-1].fast_val_accuracy is not None


def test_self_distillation_is_near_neutral(toy_sets):
    from flipxfer.zoo import TrainConfig, train_model

    train, val = toy_sets
    ck = train_model(SPEC, TrainConfig(epochs=4, lr=0.05, init_seed=3, order_seed=3), train, val)
    res = run_transfer(ck, ck, "kl_dp_sup", TransferHyperparams(lr=0.02, epochs=5, batch_size=32, seed=1), train, val)
    assert res.per_epoch[0].mask_teacher_share == 0.0  # ties all go to the frozen student
    assert res.report.delta_transf >= -0.005


def test_run_transfer_cd_projection_when_widths_differ(toy_sets):
    train, val = toy_sets
    wide = ModelSpec(family="mlp", depth=2, input_shape=(6,), num_classes=4, width=12)
    res = run_transfer(build(SPEC, 7), build(wide, 8), "cd", default_hyperparams("cd", lr=0.02, epochs=1, batch_size=32), train, val)
    assert np.isfinite(res.report.delta_transf)


def test_default_hyperparams_per_method():
    assert default_hyperparams("kl").lam == 1.0
    assert default_hyperparams("kl").lr == 1e-4
    assert default_hyperparams("kl").epochs == 20
    assert default_hyperparams("kl").temperature == 1.0
    assert default_hyperparams("xe_kl").lam == 0.5
    mcl = default_hyperparams("xe_kl_mcl")
    assert (mcl.lam, mcl.lr, mcl.mcl_tau, mcl.mcl_every) == (0.7, 0.01, 0.9999, 2)
    assert default_hyperparams("cd").lam == 0.5
    assert default_hyperparams("kl_dp_sup").lam == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_masks_partition_property(seed):
    rng = np.random.default_rng(seed)
    n, c = 40, 5
    t, s = rng.normal(size=(n, c)), rng.normal(size=(n, c))
    y = rng.integers(0, c, size=n)
    for mask in (dp_masks_supervised(t, s, y), dp_masks_unsupervised(t, s)):
        assert np.all(mask.m_t ^ mask.m_st)
