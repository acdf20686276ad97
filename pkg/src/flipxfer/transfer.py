"""Transfer objectives and the single-teacher transfer loop.

The base objective is temperature-scaled soft-target distillation: the
frozen source's tempered softmax is the target distribution and the
divergence is scaled by T^2/n.  On top of it sit the lambda-weighted
cross-entropy combination, momentum weight interpolation between a slow and
a fast copy of the student, confidence-based data partitioning between the
teacher and a frozen copy of the initial student (supervised on the
ground-truth class probability, unsupervised on the maximum probability,
ties retained by the frozen student), a top-k class-restricted divergence,
and a contrastive baseline matching row-softmaxed cosine-similarity
matrices of pre-head features.

Every objective is assembled from tape ops, so analytic gradients flow to
the adapting student only; frozen sources enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analysis import (
    FlipStats,
    PairReport,
    correct_flags,
    knowledge_gain_loss,
    per_class_gain,
    positive_flips,
    transfer_rate,
)
from .autodiff import (
    SgdState,
    Tape,
    Tensor,
    backward,
    gather_cols,
    gram,
    l2_normalize_rows,
    log_softmax,
    np_log_softmax,
    np_softmax,
    scale,
    sgd_step,
    weighted_sum,
)
from .data import Dataset, epoch_permutation
from .models import Checkpoint, as_tensors, model_forward, predict_features, predict_logits

__all__ = [
    "METHODS",
    "TransferError",
    "TransferDivergedError",
    "TransferHyperparams",
    "MclState",
    "PartitionMask",
    "EpochTrace",
    "TransferResult",
    "default_hyperparams",
    "soft_targets",
    "kl_loss",
    "xe_loss",
    "xe_kl_loss",
    "mcl_interpolate",
    "dp_masks_supervised",
    "dp_masks_unsupervised",
    "dp_loss",
    "topk_restricted_kl",
    "cd_loss",
    "run_transfer",
]

METHODS = ("kl", "xe_kl", "xe_kl_mcl", "kl_dp_sup", "kl_dp_unsup", "cd")


class TransferError(ValueError):
    pass


class TransferDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the failing step for diagnosis."""

    def __init__(self, method: str, epoch: int, step: int, value: float):
        self.method, self.epoch, self.step, self.value = method, epoch, step, value
        super().__init__(
            f"{method}: non-finite loss {value!r} at epoch {epoch}, step {step}"
        )


@dataclass(frozen=True)
class TransferHyperparams:
    lr: float = 1e-4
    temperature: float = 1.0
    lam: float = 1.0  # weight of the distillation term in mixed objectives
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-3
    mcl_tau: float = 0.9999
    mcl_every: int = 2
    topk: int | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise TransferError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise TransferError(f"lambda must be in [0,1], got {self.lam}")
        if not 0.0 <= self.mcl_tau <= 1.0:
            raise TransferError(f"mcl_tau must be in [0,1], got {self.mcl_tau}")
        if self.mcl_every < 1 or self.epochs < 0 or self.batch_size < 1:
            raise TransferError("mcl_every and batch_size must be positive, epochs nonnegative")


def default_hyperparams(method: str, **overrides) -> TransferHyperparams:
    """Per-method defaults; DP runs pure distillation (lambda 1)."""
    if method not in METHODS:
        raise TransferError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    base: dict = {}
    if method == "xe_kl":
        base["lam"] = 0.5
    elif method == "xe_kl_mcl":
        base.update(lam=0.7, lr=0.01)
    elif method == "cd":
        base["lam"] = 0.5
    base.update(overrides)
    return TransferHyperparams(**base)


@dataclass
class MclState:
    """Slow/fast weight copies joined by momentum interpolation."""

    slow: dict[str, np.ndarray]
    fast: dict[str, Tensor]
    tau: float = 0.9999
    every: int = 2


@dataclass(frozen=True)
class PartitionMask:
    """Per-sample binary source assignment; always an exact partition."""

    m_t: np.ndarray
    m_st: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m_t", np.asarray(self.m_t, dtype=bool))
        object.__setattr__(self, "m_st", np.asarray(self.m_st, dtype=bool))
        if self.m_t.shape != self.m_st.shape:
            raise TransferError("mask halves disagree on length")
        if not np.all(self.m_t ^ self.m_st):
            raise TransferError("mask is not an exact partition")

    def slice(self, idx: np.ndarray) -> "PartitionMask":
        return PartitionMask(self.m_t[idx], self.m_st[idx])

    @property
    def teacher_share(self) -> float:
        return float(self.m_t.mean())


@dataclass
class EpochTrace:
    train_loss: float
    val_accuracy: float
    gain: float
    loss: float
    mask_teacher_share: float | None = None
    fast_val_accuracy: float | None = None


@dataclass
class TransferResult:
    method: str
    hyperparams: TransferHyperparams
    report: PairReport
    per_epoch: list[EpochTrace]
    student_after: Checkpoint
    rate: dict | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# objectives


def _temper(z: np.ndarray, temperature: float) -> np.ndarray:
    return z * (1.0 / temperature)


def soft_targets(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Tempered softmax rows of a frozen source."""
    if temperature <= 0:
        raise TransferError(f"temperature must be positive, got {temperature}")
    return np_softmax(_temper(np.asarray(logits, dtype=np.float64), temperature))


def _as_student(student_logits) -> Tensor:
    return student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)


def _soft_target_kl(student_logits: Tensor, target_logprobs: np.ndarray, temperature: float) -> Tensor:
    """(T^2/n) * sum_i KL(target_i || student_i) with a constant target.

    The shared arithmetic path for plain, partitioned, and multi-source
    distillation, so equal targets give bit-equal losses.  The constant term
    reuses the same weight array as the student term, which makes the loss
    exactly zero when the two log-distributions agree bit for bit.
    """
    n = target_logprobs.shape[0]
    coeff = temperature * temperature / n
    weights = -coeff * np.exp(target_logprobs)
    bias = -float(np.sum(weights * target_logprobs))
    ls = log_softmax(scale(student_logits, 1.0 / temperature))
    return weighted_sum(ls, weights, bias)


def kl_loss(student_logits, teacher_logits, temperature: float = 1.0) -> Tensor:
    """Soft-target distillation: teacher rows are the target distribution."""
    student = _as_student(student_logits)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if temperature <= 0:
        raise TransferError(f"temperature must be positive, got {temperature}")
    if student.data.shape != teacher.shape:
        raise ad.ShapeError("kl_loss", student.data.shape, teacher.shape)
    return _soft_target_kl(student, np_log_softmax(_temper(teacher, temperature)), temperature)


def xe_loss(student_logits, labels) -> Tensor:
    """Mean cross-entropy against integer labels (temperature 1)."""
    student = _as_student(student_logits)
    labels = np.asarray(labels)
    n, c = student.data.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return weighted_sum(log_softmax(student), -onehot / n)


def xe_kl_loss(student_logits, teacher_logits, labels, lam: float, temperature: float = 1.0) -> Tensor:
    """lam * KL + (1 - lam) * XE."""
    if not 0.0 <= lam <= 1.0:
        raise TransferError(f"lambda must be in [0,1], got {lam}")
    student = _as_student(student_logits)
    kl = kl_loss(student, teacher_logits, temperature)
    xe = xe_loss(student, labels)
    return ad.add(scale(kl, lam), scale(xe, 1.0 - lam))


def mcl_interpolate(state: MclState, iteration: int) -> None:
    """slow <- tau*slow + (1-tau)*fast, applied when iteration % every == 0."""
    if iteration < 1:
        raise TransferError("iteration counter starts at 1")
    if iteration % state.every != 0:
        return
    if state.tau == 1.0:
        return  # slow copy is pinned
    for name, slow in state.slow.items():
        fast = state.fast[name].data
        if fast.shape != slow.shape:
            raise ad.ShapeError("mcl_interpolate", fast.shape, slow.shape)
        if state.tau == 0.0:
            state.slow[name] = fast.copy()
        else:
            state.slow[name] = state.tau * slow + (1.0 - state.tau) * fast


def dp_masks_supervised(teacher_logits, st_logits, labels) -> PartitionMask:
    """Assign each sample to whichever frozen model puts the higher
    probability on its ground-truth class; ties retain the student-teacher."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    st_logits = np.asarray(st_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if teacher_logits.shape != st_logits.shape:
        raise ad.ShapeError("dp_masks_supervised", teacher_logits.shape, st_logits.shape)
    rows = np.arange(teacher_logits.shape[0])
    p_t = np_softmax(teacher_logits)[rows, labels]
    p_st = np_softmax(st_logits)[rows, labels]
    m_t = p_t > p_st
    return PartitionMask(m_t, ~m_t)


def dp_masks_unsupervised(teacher_logits, st_logits) -> PartitionMask:
    """Label-free variant: compare maximum prediction probabilities."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    st_logits = np.asarray(st_logits, dtype=np.float64)
    if teacher_logits.shape != st_logits.shape:
        raise ad.ShapeError("dp_masks_unsupervised", teacher_logits.shape, st_logits.shape)
    m_t = np_softmax(teacher_logits).max(axis=1) > np_softmax(st_logits).max(axis=1)
    return PartitionMask(m_t, ~m_t)


def _select_target_logprobs(
    mask: PartitionMask, teacher_logits: np.ndarray, st_logits: np.ndarray, temperature: float
) -> np.ndarray:
    lt = np_log_softmax(_temper(teacher_logits, temperature))
    lst = np_log_softmax(_temper(st_logits, temperature))
    return np.where(mask.m_t[:, None], lt, lst)


def dp_loss(student_logits, teacher_logits, st_logits, mask: PartitionMask, temperature: float = 1.0) -> Tensor:
    """Partitioned distillation: per sample, distill from the teacher on m_t
    and from the frozen initial student on m_st; no auxiliary cross-entropy."""
    student = _as_student(student_logits)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    st_logits = np.asarray(st_logits, dtype=np.float64)
    if temperature <= 0:
        raise TransferError(f"temperature must be positive, got {temperature}")
    if teacher_logits.shape != st_logits.shape or student.data.shape != teacher_logits.shape:
        raise ad.ShapeError("dp_loss", student.data.shape, teacher_logits.shape)
    if mask.m_t.shape[0] != teacher_logits.shape[0]:
        raise TransferError("mask length does not match the batch")
    targets = _select_target_logprobs(mask, teacher_logits, st_logits, temperature)
    return _soft_target_kl(student, targets, temperature)


def topk_restricted_kl(student_logits, teacher_logits, temperature: float, k: int) -> Tensor:
    """Distillation restricted per sample to the k most probable teacher
    classes, both distributions renormalized over that subset."""
    student = _as_student(student_logits)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if student.data.shape != teacher.shape:
        raise ad.ShapeError("topk_restricted_kl", student.data.shape, teacher.shape)
    n, c = teacher.shape
    if not 1 <= k <= c:
        raise TransferError(f"k must be in [1, {c}], got {k}")
    if temperature <= 0:
        raise TransferError(f"temperature must be positive, got {temperature}")
    lt = np_log_softmax(_temper(teacher, temperature))
    idx = np.argsort(-lt, axis=1, kind="stable")[:, :k]  # ties to lowest class id
    lt_sub = np.take_along_axis(lt, idx, axis=1)
    lt_renorm = lt_sub - _logsumexp(lt_sub)  # renormalize over the kept subset
    coeff = temperature * temperature / n
    weights = -coeff * np.exp(lt_renorm)
    bias = -float(np.sum(weights * lt_renorm))
    ls_sub = log_softmax(gather_cols(scale(student, 1.0 / temperature), idx))
    return weighted_sum(ls_sub, weights, bias)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=1, keepdims=True)
    return zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))


def cd_loss(student_feats, teacher_feats) -> Tensor:
    """Match row-softmaxed cosine-similarity matrices of the two batches'
    L2-normalized features, teacher rows as the target, mean over rows."""
    student = _as_student(student_feats)
    teacher = np.asarray(teacher_feats, dtype=np.float64)
    n = teacher.shape[0]
    if n < 2:
        raise TransferError("cd_loss needs a batch of at least 2 samples")
    if student.data.shape[0] != n:
        raise ad.ShapeError("cd_loss", student.data.shape, teacher.shape)
    norms = np.linalg.norm(teacher, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise TransferError("cd_loss: zero-norm teacher feature")
    unit_t = teacher / norms
    # same einsum path as the student-side gram op, so equal features give
    # bit-equal similarity matrices and an exactly zero loss
    target_logprobs = np_log_softmax(ad._mm_nt(unit_t, unit_t))
    sim_s = gram(l2_normalize_rows(student))
    ls = log_softmax(sim_s)
    weights = -np.exp(target_logprobs) / n
    bias = -float(np.sum(weights * target_logprobs))
    return weighted_sum(ls, weights, bias)


# ---------------------------------------------------------------------------
# transfer loop


def _eval_checkpoint(spec, params: dict[str, Tensor], base: Checkpoint) -> Checkpoint:
    arrays = {k: params[k].data.copy() for k in base.params}
    return Checkpoint(spec, arrays, dict(base.meta))


def _gain_loss(before_correct, after_correct, flips: FlipStats) -> tuple[float, float]:
    """Per-run gain/loss; gain is 0 when there is nothing to transfer."""
    if flips.total == 0:
        lost = float((before_correct & ~after_correct).sum())
        total_before = float(before_correct.sum())
        return 0.0, lost / total_before if total_before else 0.0
    return knowledge_gain_loss(before_correct, after_correct, flips.per_sample_flags)


def _batches(perm: np.ndarray, batch_size: int):
    for start in range(0, perm.size, batch_size):
        yield perm[start : start + batch_size]


class _CdContext:
    """Feature pairing for the contrastive objective; projects both sides to
    a common width when the models disagree (teacher side fixed, student
    side trained)."""

    def __init__(self, student_ck: Checkpoint, teacher_ck: Checkpoint, transfer_inputs, seed: int):
        w_s = student_ck.spec.feature_width()
        w_t = teacher_ck.spec.feature_width()
        feats = predict_features(teacher_ck, transfer_inputs)
        self.proj_name = None
        if w_s != w_t:
            d = min(w_s, w_t)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCD]))
            t_proj = rng.normal(size=(w_t, d)) / np.sqrt(w_t)
            bound = np.sqrt(6.0 / w_s)
            self.student_proj0 = rng.uniform(-bound, bound, size=(w_s, d))
            feats = feats @ t_proj
            self.proj_name = "cd_proj.w"
        self.teacher_feats = feats

    def attach(self, params: dict[str, Tensor]) -> None:
        if self.proj_name:
            params[self.proj_name] = Tensor(self.student_proj0.copy(), requires_grad=True)

    def student_side(self, feats: Tensor, params: dict[str, Tensor]) -> Tensor:
        if self.proj_name:
            return ad.matmul(feats, params[self.proj_name])
        return feats


def run_transfer(
    student_ck: Checkpoint,
    teacher_ck: Checkpoint,
    method: str,
    hp: TransferHyperparams,
    transfer_set: Dataset,
    val_set: Dataset,
    teacher_name: str = "teacher",
    student_name: str = "student",
    frozen_reference: Checkpoint | None = None,
) -> TransferResult:
    """Distill into a pretrained student over a fixed epoch budget.

    All relevant models forward the identical batch; DP masks come from the
    frozen teacher and the frozen initial student (cached per sample, which
    is equivalent to per-batch recomputation because the sources never
    move).  MCL evaluates and returns the slow weights.
    """
    if method not in METHODS:
        raise TransferError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    spec = student_ck.spec
    if teacher_ck.spec.num_classes != spec.num_classes:
        raise TransferError(
            f"class-count mismatch: teacher {teacher_ck.spec.num_classes}, "
            f"student {spec.num_classes}"
        )
    if teacher_ck.spec.input_shape != spec.input_shape:
        raise TransferError("teacher and student disagree on input shape")
    if transfer_set.num_classes != spec.num_classes or val_set.num_classes != spec.num_classes:
        raise TransferError("dataset class count does not match the models")

    x_tr, y_tr = transfer_set.inputs, transfer_set.labels
    x_val, y_val = val_set.inputs, val_set.labels
    n = transfer_set.n

    # frozen sources, cached on the full transfer set
    # f_st: frozen retention reference; by default a copy of the initial student
    st_ck = (frozen_reference or student_ck).copy()
    z_teacher = predict_logits(teacher_ck, x_tr)
    z_st = predict_logits(st_ck, x_tr)

    mask: PartitionMask | None = None
    if method == "kl_dp_sup":
        mask = dp_masks_supervised(z_teacher, z_st, y_tr)
    elif method == "kl_dp_unsup":
        mask = dp_masks_unsupervised(z_teacher, z_st)

    cd_ctx = _CdContext(student_ck, teacher_ck, x_tr, hp.seed) if method == "cd" else None

    # pre-transfer baselines on the validation set
    val_student_before = predict_logits(student_ck, x_val)
    val_teacher = predict_logits(teacher_ck, x_val)
    before_correct = correct_flags(val_student_before, y_val)
    acc_before = float(before_correct.mean())
    acc_teacher = float(correct_flags(val_teacher, y_val).mean())
    flips_before = positive_flips(val_teacher, val_student_before, y_val)

    params = as_tensors(student_ck, requires_grad=True)
    if cd_ctx is not None:
        cd_ctx.attach(params)
    opt = SgdState(lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay)
    mcl = None
    if method == "xe_kl_mcl":
        mcl = MclState(
            slow={k: v.copy() for k, v in student_ck.params.items()},
            fast={k: params[k] for k in student_ck.params},
            tau=hp.mcl_tau,
            every=hp.mcl_every,
        )
    drop_rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 0xD0]))
    temp = hp.temperature
    iteration = 0
    per_epoch: list[EpochTrace] = []

    for epoch in range(hp.epochs):
        perm = epoch_permutation(n, hp.seed, epoch)
        losses = []
        for step, b in enumerate(_batches(perm, hp.batch_size)):
            xb = Tensor(x_tr[b])
            # overflow in a diverging run surfaces as a non-finite loss below
            with np.errstate(all="ignore"), Tape() as tape:
                logits, feats = model_forward(spec, params, xb, train=True, dropout_rng=drop_rng)
                if method == "kl":
                    if hp.topk is not None:
                        loss = topk_restricted_kl(logits, z_teacher[b], temp, hp.topk)
                    else:
                        loss = kl_loss(logits, z_teacher[b], temp)
                elif method in ("xe_kl", "xe_kl_mcl"):
                    loss = xe_kl_loss(logits, z_teacher[b], y_tr[b], hp.lam, temp)
                elif method in ("kl_dp_sup", "kl_dp_unsup"):
                    loss = dp_loss(logits, z_teacher[b], z_st[b], mask.slice(b), temp)
                else:  # cd
                    xe = xe_loss(logits, y_tr[b])
                    if b.size >= 2:
                        cd = cd_loss(cd_ctx.student_side(feats, params), cd_ctx.teacher_feats[b])
                        loss = ad.add(scale(cd, hp.lam), scale(xe, 1.0 - hp.lam))
                    else:
                        loss = scale(xe, 1.0 - hp.lam)  # singleton batch has no pairs
            value = loss.item()
            if not np.isfinite(value):
                raise TransferDivergedError(method, epoch, step, value)
            losses.append(value)
            backward(tape, loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            sgd_step({k: params[k] for k in grads}, grads, opt)
            iteration += 1
            if mcl is not None:
                mcl_interpolate(mcl, iteration)

        eval_params = (
            {k: Tensor(v) for k, v in mcl.slow.items()} if mcl is not None else params
        )
        eval_ck = _eval_checkpoint(spec, eval_params, student_ck)
        val_logits = predict_logits(eval_ck, x_val)
        now_correct = correct_flags(val_logits, y_val)
        gain, loss_share = _gain_loss(before_correct, now_correct, flips_before)
        trace = EpochTrace(
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_accuracy=float(now_correct.mean()),
            gain=gain,
            loss=loss_share,
            mask_teacher_share=mask.teacher_share if mask is not None else None,
        )
        if mcl is not None:
            fast_ck = _eval_checkpoint(spec, params, student_ck)
            trace.fast_val_accuracy = float(
                correct_flags(predict_logits(fast_ck, x_val), y_val).mean()
            )
        per_epoch.append(trace)

    final_params = {k: Tensor(v) for k, v in mcl.slow.items()} if mcl is not None else params
    student_after = _eval_checkpoint(spec, {k: final_params[k] for k in student_ck.params}, student_ck)
    val_after = predict_logits(student_after, x_val)
    after_correct = correct_flags(val_after, y_val)
    acc_after = float(after_correct.mean())
    gain, loss_share = _gain_loss(before_correct, after_correct, flips_before)
    rate = (
        transfer_rate(flips_before, after_correct, y_val) if flips_before.total > 0 else None
    )
    pcg = per_class_gain(flips_before, after_correct, y_val)
    report = PairReport(
        teacher=teacher_name,
        student=student_name,
        delta_acc=acc_teacher - acc_before,
        delta_transf=acc_after - acc_before,
        knowledge_gain=gain,
        knowledge_loss=loss_share,
        per_class_gain=tuple(float(v) for v in pcg),
    )
    student_after.meta.update(
        {"val_accuracy": acc_after, "transfer_method": method, "teacher": teacher_name}
    )
    return TransferResult(
        method=method,
        hyperparams=hp,
        report=report,
        per_epoch=per_epoch,
        student_after=student_after,
        rate=rate,
        extras={
            "acc_before": acc_before,
            "acc_teacher": acc_teacher,
            "rho_pos": flips_before.rho_pos,
        },
    )
