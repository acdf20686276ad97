"""Knowledge transfer from several teachers.

Three protocols: sequential (each distilled student becomes the pretrained
student and the frozen retention reference for the next stage), parallel
(per sample, the most confident source among all teachers and the frozen
initial student wins; ties keep the student reference, then the lowest
teacher index), and soup (independent single-teacher transfers merged by a
uniform elementwise parameter average).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import correct_flags, flip_stats_from_flags, per_class_gain, predictions, transfer_rate, PairReport
from .autodiff import SgdState, Tape, Tensor, backward, sgd_step
from .data import Dataset, epoch_permutation
from .models import Checkpoint, as_tensors, model_forward, predict_logits
from .transfer import (
    EpochTrace,
    TransferDivergedError,
    TransferError,
    TransferHyperparams,
    TransferResult,
    _eval_checkpoint,
    _gain_loss,
    _soft_target_kl,
    _temper,
    run_transfer,
)
from .autodiff import np_log_softmax, np_softmax

__all__ = ["MultiTeacherPlan", "sequential_transfer", "parallel_transfer", "soup_transfer"]

MODES = ("sequential", "parallel", "soup")


@dataclass(frozen=True)
class MultiTeacherPlan:
    teachers: tuple[Checkpoint, ...]
    mode: str
    method: str = "kl_dp_sup"
    order: str = "ascending"  # by teacher val accuracy; or "descending" / "given"
    retain_original_reference: bool = False
    teacher_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise TransferError(f"unknown multi-teacher mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.order not in ("ascending", "descending", "given"):
            raise TransferError(f"unknown teacher order {self.order!r}")
        if self.mode in ("parallel", "soup") and len(self.teachers) < 1:
            raise TransferError(f"{self.mode} transfer needs at least one teacher")
        if self.method not in ("kl_dp_sup", "kl_dp_unsup", "kl"):
            raise TransferError(f"multi-teacher transfer supports kl/kl_dp methods, not {self.method!r}")
        names = self.teacher_names or tuple(
            ck.meta.get("name", f"t{i}") for i, ck in enumerate(self.teachers)
        )
        if len(names) != len(self.teachers):
            raise TransferError("teacher_names must align with teachers")
        object.__setattr__(self, "teacher_names", tuple(names))

    def ordered(self) -> list[tuple[str, Checkpoint]]:
        pairs = list(zip(self.teacher_names, self.teachers))
        if self.order == "given":
            return pairs
        keyed = [(ck.meta.get("val_accuracy", 0.0), i, name, ck) for i, (name, ck) in enumerate(pairs)]
        keyed.sort(key=lambda t: (t[0], t[1]), reverse=(self.order == "descending"))
        return [(name, ck) for _, _, name, ck in keyed]


def sequential_transfer(
    student_ck: Checkpoint,
    plan: MultiTeacherPlan,
    hp: TransferHyperparams,
    transfer_set: Dataset,
    val_set: Dataset,
    student_name: str = "student",
) -> list[TransferResult]:
    """Stage-wise transfer; each stage's output is the next stage's student
    (and its frozen reference, unless the plan retains the original)."""
    if plan.mode != "sequential":
        raise TransferError(f"plan mode is {plan.mode!r}, expected 'sequential'")
    acc0 = float(correct_flags(predict_logits(student_ck, val_set.inputs), val_set.labels).mean())
    reference = student_ck if plan.retain_original_reference else None
    current = student_ck
    results: list[TransferResult] = []
    for name, teacher in plan.ordered():
        try:
            res = run_transfer(
                current,
                teacher,
                plan.method,
                hp,
                transfer_set,
                val_set,
                teacher_name=name,
                student_name=student_name,
                frozen_reference=reference,
            )
        except TransferDivergedError as e:
            stub = TransferResult(
                method=plan.method,
                hyperparams=hp,
                report=PairReport(name, student_name, 0.0, 0.0, 0.0, 0.0),
                per_epoch=[],
                student_after=current,
                extras={"failed": str(e)},
            )
            results.append(stub)
            continue
        res.extras["cumulative_delta_transf"] = (
            res.extras["acc_before"] + res.report.delta_transf - acc0
        )
        results.append(res)
        current = res.student_after
    return results


def parallel_transfer(
    student_ck: Checkpoint,
    plan: MultiTeacherPlan,
    hp: TransferHyperparams,
    transfer_set: Dataset,
    val_set: Dataset,
    student_name: str = "student",
) -> TransferResult:
    """Single run distilling from the per-sample most confident source among
    the frozen initial student and every teacher."""
    if plan.mode != "parallel":
        raise TransferError(f"plan mode is {plan.mode!r}, expected 'parallel'")
    spec = student_ck.spec
    # tie-breaking uses the plan's given teacher sequence, so no reordering here
    teachers = list(zip(plan.teacher_names, plan.teachers))
    for name, t in teachers:
        if t.spec.num_classes != spec.num_classes:
            raise TransferError(f"teacher {name}: class-count mismatch")
        if t.spec.input_shape != spec.input_shape:
            raise TransferError(f"teacher {name}: input-shape mismatch")
    supervised = plan.method == "kl_dp_sup"

    x_tr, y_tr = transfer_set.inputs, transfer_set.labels
    x_val, y_val = val_set.inputs, val_set.labels
    n = transfer_set.n
    temp = hp.temperature

    st_ck = student_ck.copy()
    source_logits = [predict_logits(st_ck, x_tr)] + [predict_logits(t, x_tr) for _, t in teachers]
    probs = [np_softmax(z) for z in source_logits]
    if supervised:
        conf = np.stack([p[np.arange(n), y_tr] for p in probs])  # (K+1, n)
    else:
        conf = np.stack([p.max(axis=1) for p in probs])
    winner = np.argmax(conf, axis=0)  # ties resolve to f_st, then lowest teacher index
    target_logprobs = np.empty((n, spec.num_classes))
    for s, z in enumerate(source_logits):
        rows = winner == s
        if rows.any():
            target_logprobs[rows] = np_log_softmax(_temper(z[rows], temp))
    source_share = np.bincount(winner, minlength=len(source_logits)) / n

    val_student_before = predict_logits(student_ck, x_val)
    before_correct = correct_flags(val_student_before, y_val)
    acc_before = float(before_correct.mean())
    val_teacher_logits = [predict_logits(t, x_val) for _, t in teachers]
    teacher_accs = [float(correct_flags(z, y_val).mean()) for z in val_teacher_logits]
    any_teacher_correct = np.zeros(val_set.n, dtype=bool)
    for z in val_teacher_logits:
        any_teacher_correct |= predictions(z) == y_val
    union_flips = flip_stats_from_flags(
        any_teacher_correct & ~before_correct, y_val, spec.num_classes
    )

    params = as_tensors(student_ck, requires_grad=True)
    opt = SgdState(lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay)
    drop_rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 0xD0]))
    per_epoch: list[EpochTrace] = []
    for epoch in range(hp.epochs):
        perm = epoch_permutation(n, hp.seed, epoch)
        losses = []
        for step, b in enumerate(
            perm[start : start + hp.batch_size] for start in range(0, n, hp.batch_size)
        ):
            with np.errstate(all="ignore"), Tape() as tape:
                logits, _ = model_forward(spec, params, Tensor(x_tr[b]), train=True, dropout_rng=drop_rng)
                loss = _soft_target_kl(logits, target_logprobs[b], temp)
            value = loss.item()
            if not np.isfinite(value):
                raise TransferDivergedError("parallel", epoch, step, value)
            losses.append(value)
            backward(tape, loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            sgd_step({k: params[k] for k in grads}, grads, opt)
        eval_ck = _eval_checkpoint(spec, params, student_ck)
        now_correct = correct_flags(predict_logits(eval_ck, x_val), y_val)
        gain, loss_share = _gain_loss(before_correct, now_correct, union_flips)
        per_epoch.append(
            EpochTrace(
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                val_accuracy=float(now_correct.mean()),
                gain=gain,
                loss=loss_share,
                mask_teacher_share=float(1.0 - source_share[0]),
            )
        )

    student_after = _eval_checkpoint(spec, params, student_ck)
    after_correct = correct_flags(predict_logits(student_after, x_val), y_val)
    acc_after = float(after_correct.mean())
    gain, loss_share = _gain_loss(before_correct, after_correct, union_flips)
    rate = transfer_rate(union_flips, after_correct, y_val) if union_flips.total else None
    names = "+".join(name for name, _ in teachers)
    report = PairReport(
        teacher=f"parallel[{names}]",
        student=student_name,
        delta_acc=max(teacher_accs) - acc_before,
        delta_transf=acc_after - acc_before,
        knowledge_gain=gain,
        knowledge_loss=loss_share,
        per_class_gain=tuple(float(v) for v in per_class_gain(union_flips, after_correct, y_val)),
    )
    student_after.meta.update({"val_accuracy": acc_after, "transfer_method": "parallel"})
    return TransferResult(
        method=plan.method,
        hyperparams=hp,
        report=report,
        per_epoch=per_epoch,
        student_after=student_after,
        rate=rate,
        extras={
            "acc_before": acc_before,
            "teacher_accs": teacher_accs,
            "source_share": [float(s) for s in source_share],
            "winner": winner,
            "rho_pos": union_flips.rho_pos,
        },
    )


def soup_transfer(
    student_ck: Checkpoint,
    plan: MultiTeacherPlan,
    hp: TransferHyperparams,
    transfer_set: Dataset,
    val_set: Dataset,
    student_name: str = "student",
) -> TransferResult:
    """Distill one student per teacher from the same start, then average all
    variants' parameters uniformly and evaluate the merged model."""
    if plan.mode != "soup":
        raise TransferError(f"plan mode is {plan.mode!r}, expected 'soup'")
    branches: list[TransferResult] = []
    for name, teacher in zip(plan.teacher_names, plan.teachers):
        branches.append(
            run_transfer(
                student_ck,
                teacher,
                plan.method,
                hp,
                transfer_set,
                val_set,
                teacher_name=name,
                student_name=student_name,
            )
        )
    # canonical merge order: by branch checkpoint digest, so teacher order
    # cannot change the floating-point sum
    ordered = sorted(branches, key=lambda r: r.student_after.digest())
    k = len(ordered)
    if all(r.student_after.digest() == ordered[0].student_after.digest() for r in ordered):
        merged = {name: v.copy() for name, v in ordered[0].student_after.params.items()}
    else:
        merged = {
            name: sum(r.student_after.params[name] for r in ordered) / k
            for name in student_ck.params
        }
    student_after = Checkpoint(student_ck.spec, merged, dict(student_ck.meta))

    x_val, y_val = val_set.inputs, val_set.labels
    before_correct = correct_flags(predict_logits(student_ck, x_val), y_val)
    acc_before = float(before_correct.mean())
    teacher_accs = [
        float(correct_flags(predict_logits(t, x_val), y_val).mean()) for t in plan.teachers
    ]
    any_teacher_correct = np.zeros(val_set.n, dtype=bool)
    for t in plan.teachers:
        any_teacher_correct |= predictions(predict_logits(t, x_val)) == y_val
    union_flips = flip_stats_from_flags(
        any_teacher_correct & ~before_correct, y_val, student_ck.spec.num_classes
    )
    after_correct = correct_flags(predict_logits(student_after, x_val), y_val)
    acc_after = float(after_correct.mean())
    gain, loss_share = _gain_loss(before_correct, after_correct, union_flips)
    names = "+".join(plan.teacher_names)
    report = PairReport(
        teacher=f"soup[{names}]",
        student=student_name,
        delta_acc=max(teacher_accs) - acc_before,
        delta_transf=acc_after - acc_before,
        knowledge_gain=gain,
        knowledge_loss=loss_share,
        per_class_gain=tuple(
            float(v) for v in per_class_gain(union_flips, after_correct, y_val)
        ),
    )
    student_after.meta.update({"val_accuracy": acc_after, "transfer_method": "soup"})
    rate = transfer_rate(union_flips, after_correct, y_val) if union_flips.total else None
    return TransferResult(
        method=plan.method,
        hyperparams=hp,
        report=report,
        per_epoch=[],
        student_after=student_after,
        rate=rate,
        extras={
            "acc_before": acc_before,
            "teacher_accs": teacher_accs,
            "branch_deltas": [r.report.delta_transf for r in branches],
            "rho_pos": union_flips.rho_pos,
        },
    )
