"""Independent oracles used to derive expected test values.

These reimplement the arithmetic from first principles (plain probability
normalization, python-loop argmax, central finite differences) so that the
library paths they check cannot share bugs with them.
"""

from __future__ import annotations

import numpy as np

from flipxfer.autodiff import Tape, Tensor, backward


def finite_diff_grads(loss_fn, params: dict[str, Tensor], h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of loss_fn() w.r.t. every parameter element."""

    def value() -> float:
        out = loss_fn()
        return out.item() if hasattr(out, "item") else float(out)

    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = value()
            flat[i] = orig - h
            lm = value()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def analytic_grads(build_loss, params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    for p in params.values():
        p.grad = None  # drop leftovers from earlier backward passes
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    return loss.item(), {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def max_rel_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-3) -> float:
    """Smoothed relative error max |a-b| / max(|a|,|b|,floor).

    The floor keeps central differences meaningful below their ~1e-10
    noise level: elements smaller than the floor are held to an absolute
    tolerance of floor * rtol instead of an unattainable relative one.
    """
    worst = 0.0
    for name in a:
        x, y = np.asarray(a[name]), np.asarray(b[name])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float((np.abs(x - y) / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# scalar loss oracles (probability-space arithmetic, no log-softmax reuse)


def oracle_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temperature
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def oracle_kl(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    p = oracle_softmax(teacher_logits, temperature)
    q = oracle_softmax(student_logits, temperature)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(q)), 0.0)
    return temperature**2 / p.shape[0] * float(terms.sum())


def oracle_xe(student_logits, labels) -> float:
    q = oracle_softmax(student_logits)
    rows = np.arange(len(labels))
    return float(-np.log(q[rows, labels]).mean())


def oracle_dp(student_logits, teacher_logits, st_logits, m_t, temperature: float = 1.0) -> float:
    p_t = oracle_softmax(teacher_logits, temperature)
    p_st = oracle_softmax(st_logits, temperature)
    q = oracle_softmax(student_logits, temperature)
    total = 0.0
    for i in range(len(m_t)):
        p = p_t[i] if m_t[i] else p_st[i]
        total += float(np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(q[i])), 0.0).sum())
    return temperature**2 / len(m_t) * total


def oracle_topk(student_logits, teacher_logits, temperature: float, k: int) -> float:
    p_t = oracle_softmax(teacher_logits, temperature)
    n, c = p_t.shape
    total = 0.0
    for i in range(n):
        order = sorted(range(c), key=lambda j: (-p_t[i, j], j))[:k]
        pt = p_t[i, order]
        pt = pt / pt.sum()
        zs = np.asarray(student_logits[i], dtype=np.float64)[order] / temperature
        e = np.exp(zs - zs.max())
        qs = e / e.sum()
        total += float(np.sum(pt * (np.log(pt) - np.log(qs))))
    return temperature**2 / n * total


def oracle_cd(student_feats, teacher_feats) -> float:
    def sim(f):
        f = np.asarray(f, dtype=np.float64)
        unit = f / np.linalg.norm(f, axis=1, keepdims=True)
        return unit @ unit.T

    p = oracle_softmax(sim(teacher_feats))
    q = oracle_softmax(sim(student_feats))
    return float(np.sum(p * (np.log(p) - np.log(q)))) / len(p)


# ---------------------------------------------------------------------------
# brute-force prediction-flip recount (pure python loops)


def brute_force_argmax(row) -> int:
    best, best_v = 0, row[0]
    for j, v in enumerate(row):
        if v > best_v:
            best, best_v = j, v
    return best


def brute_force_flips(teacher_logits, student_logits, labels):
    """Returns (flags list, per-class counts, rho_pos) counted sample by sample."""
    teacher_logits = np.asarray(teacher_logits)
    student_logits = np.asarray(student_logits)
    labels = [int(y) for y in labels]
    c = teacher_logits.shape[1]
    flags = []
    counts = [0] * c
    for i, y in enumerate(labels):
        t_ok = brute_force_argmax(teacher_logits[i]) == y
        s_ok = brute_force_argmax(student_logits[i]) == y
        flip = t_ok and not s_ok
        flags.append(flip)
        if flip:
            counts[y] += 1
    rho = sum(flags) / len(flags) if flags else 0.0
    return flags, counts, rho
