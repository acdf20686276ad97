"""Train a diverse model library and keep a manifest registry beside it.

Diversity comes from the spec axes (family, depth, width/channels, dropout)
and the training axes (init seed, data-order seed, learning rate, epoch
budget, augmentation noise).  Divergent trainings are recorded as failed
entries rather than dropped, so a manifest always reflects what was asked.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import SgdState, Tape, Tensor, backward, sgd_step
from .data import Dataset, augment_batch, epoch_permutation
from .models import Checkpoint, ModelSpec, as_tensors, build, load, model_forward, predict_logits, save
from .transfer import xe_loss
from .analysis import correct_flags

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "ZooEntry",
    "ZooManifest",
    "PairFilter",
    "train_model",
    "pretrain_zoo",
    "pair_grid",
    "save_manifest",
    "load_manifest",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, name: str, epoch: int, value: float):
        self.name, self.epoch, self.value = name, epoch, value
        super().__init__(f"{name}: non-finite training loss {value!r} at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    augment_noise: float = 0.0
    init_seed: int = 0
    order_seed: int = 0
    plateau_patience: int | None = None

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ZooEntry:
    name: str
    path: str
    spec_digest: str
    family: str
    train_config: dict
    val_accuracy: float
    seed: int
    failed: bool = False
    error: str | None = None


@dataclass
class ZooManifest:
    entries: list[ZooEntry] = field(default_factory=list)
    root: str = "."

    def ok_entries(self) -> list[ZooEntry]:
        return [e for e in self.entries if not e.failed]

    def entry(self, name: str) -> ZooEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"no zoo entry named {name!r}")

    def load_checkpoint(self, name: str) -> Checkpoint:
        e = self.entry(name)
        return load(os.path.join(self.root, e.path))


def train_model(
    spec: ModelSpec,
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset,
    name: str = "model",
) -> Checkpoint:
    """Cross-entropy training with SGD; deterministic given the config."""
    if train.num_classes != spec.num_classes:
        raise ValueError(f"{name}: dataset has {train.num_classes} classes, spec {spec.num_classes}")
    ck = build(spec, cfg.init_seed)
    params = as_tensors(ck, requires_grad=True)
    opt = SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.order_seed, 0xD1]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.order_seed, 0xA6]))
    best_acc, stale = -1.0, 0
    for epoch in range(cfg.epochs):
        perm = epoch_permutation(train.n, cfg.order_seed, epoch)
        for start in range(0, train.n, cfg.batch_size):
            b = perm[start : start + cfg.batch_size]
            xb = augment_batch(train.inputs[b], cfg.augment_noise, aug_rng)
            # overflow in a diverging run surfaces as a non-finite loss below
            with np.errstate(all="ignore"), Tape() as tape:
                logits, _ = model_forward(spec, params, Tensor(xb), train=True, dropout_rng=drop_rng)
                loss = xe_loss(logits, train.labels[b])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(name, epoch, value)
            backward(tape, loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            sgd_step({k: params[k] for k in grads}, grads, opt)
        if cfg.plateau_patience is not None:
            snapshot = Checkpoint(spec, {k: v.data.copy() for k, v in params.items()}, {})
            acc = float(correct_flags(predict_logits(snapshot, val.inputs), val.labels).mean())
            if acc > best_acc + 1e-12:
                best_acc, stale = acc, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    break
    out = Checkpoint(spec, {k: v.data.copy() for k, v in params.items()}, {})
    val_acc = float(correct_flags(predict_logits(out, val.inputs), val.labels).mean())
    out.meta = {
        "seed": cfg.init_seed,
        "val_accuracy": val_acc,
        "train_config_digest": cfg.digest(),
        "name": name,
    }
    return out


def pretrain_zoo(
    specs: list[tuple[ModelSpec, TrainConfig]],
    train: Dataset,
    val: Dataset,
    out_dir,
    names: list[str] | None = None,
) -> ZooManifest:
    """Train every requested model and register it; entries are sorted by
    (family, val_accuracy) and failures stay visible."""
    if len(specs) < 2:
        raise ValueError("a zoo needs at least 2 models")
    os.makedirs(out_dir, exist_ok=True)
    if names is None:
        names = [f"m{i:02d}_{spec.family}" for i, (spec, _) in enumerate(specs)]
    if len(names) != len(specs) or len(set(names)) != len(names):
        raise ValueError("model names must be unique and match the spec list")
    entries: list[ZooEntry] = []
    for name, (spec, cfg) in zip(names, specs):
        fname = f"{name}.ckpt"
        try:
            ck = train_model(spec, cfg, train, val, name=name)
            save(ck, os.path.join(out_dir, fname))
            entries.append(
                ZooEntry(
                    name=name,
                    path=fname,
                    spec_digest=spec.digest(),
                    family=spec.family,
                    train_config=asdict(cfg),
                    val_accuracy=ck.meta["val_accuracy"],
                    seed=cfg.init_seed,
                )
            )
        except TrainingDivergedError as e:
            entries.append(
                ZooEntry(
                    name=name,
                    path=fname,
                    spec_digest=spec.digest(),
                    family=spec.family,
                    train_config=asdict(cfg),
                    val_accuracy=float("nan"),
                    seed=cfg.init_seed,
                    failed=True,
                    error=str(e),
                )
            )
    entries.sort(key=lambda e: (e.family, e.val_accuracy if not e.failed else -1.0, e.name))
    manifest = ZooManifest(entries=entries, root=str(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def save_manifest(manifest: ZooManifest, path) -> None:
    doc = {"entries": [asdict(e) for e in manifest.entries]}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> ZooManifest:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    entries = [ZooEntry(**e) for e in doc["entries"]]
    return ZooManifest(entries=entries, root=os.path.dirname(os.path.abspath(path)))


@dataclass(frozen=True)
class PairFilter:
    """Constraints on ordered (teacher, student) pairs."""

    delta_acc_min: float | None = None  # bounds on acc(teacher) - acc(student)
    delta_acc_max: float | None = None
    teacher_family: str | None = None
    student_family: str | None = None

    def admits(self, teacher: ZooEntry, student: ZooEntry) -> bool:
        delta = teacher.val_accuracy - student.val_accuracy
        if self.delta_acc_min is not None and delta < self.delta_acc_min:
            return False
        if self.delta_acc_max is not None and delta > self.delta_acc_max:
            return False
        if self.teacher_family is not None and teacher.family != self.teacher_family:
            return False
        if self.student_family is not None and student.family != self.student_family:
            return False
        return True


def pair_grid(manifest: ZooManifest, flt: PairFilter | None = None) -> list[tuple[ZooEntry, ZooEntry]]:
    """All ordered (teacher, student) pairs of non-failed entries, filtered.

    An empty result under a filter is a legitimate empty list, not an error.
    """
    ok = manifest.ok_entries()
    if len(ok) < 2:
        raise ValueError("pair_grid needs at least 2 trained models")
    flt = flt or PairFilter()
    return [
        (t, s)
        for t in ok
        for s in ok
        if t.name != s.name and flt.admits(t, s)
    ]
