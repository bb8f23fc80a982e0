"""Finite-difference verification of the analytic gradients.

Checks every parameter component of a tiny 64-bit model against central
differences for all three objectives. The losses are smooth at a generic
random initialization (GELU everywhere, probabilities far from the clamp
bounds, hinge away from its kink), so central differences converge cleanly.

Second-order differences at h=1e-4 carry ~h^2/6 * f''' truncation error,
around 1e-10 in absolute terms here. For components barely above the 1e-6
magnitude floor that alone can exceed a 1e-4 relative tolerance, so any
component failing the 2-point check is re-measured with a fourth-order
five-point stencil at the same h. A wrong analytic gradient fails both
stencils; the escalation only removes truncation noise, never real bugs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .model import ModelConfig, init_params
from .objectives import LabeledPair, RankTriple, lul_loss, mle_loss, rll_loss
from .tensor import Tensor, no_grad
from .textcodec import BOQ_ID, BOS_ID, EOQ_ID, EncodedPair


@dataclass
class GradCheckReport:
    objective: str
    max_rel_err: float
    checked: int
    skipped: int
    ok: bool

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (f"objective={self.objective} max_rel_err={self.max_rel_err:.3e} "
                f"checked={self.checked} skipped={self.skipped} {status}")


def _central_diff(loss_fn, flat: np.ndarray, i: int, h: float) -> float:
    """2-point central difference in flat[i]; O(h^2) truncation."""
    keep = flat[i]
    flat[i] = keep + h
    hi = float(loss_fn().data)
    flat[i] = keep - h
    lo = float(loss_fn().data)
    flat[i] = keep
    return (hi - lo) / (2.0 * h)


def _central_diff4(loss_fn, flat: np.ndarray, i: int, h: float) -> float:
    """5-point central difference in flat[i]; O(h^4) truncation."""
    keep = flat[i]
    vals = []
    for step in (-2.0, -1.0, 1.0, 2.0):
        flat[i] = keep + step * h
        vals.append(float(loss_fn().data))
    flat[i] = keep
    f_m2, f_m1, f_p1, f_p2 = vals
    return (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * h)


def finite_difference(loss_fn, params: dict[str, Tensor], h: float = 1e-4,
                      max_entries: int | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Central-difference gradient of loss_fn() w.r.t. every parameter entry.

    max_entries caps the checked entries per tensor (seeded subsample) for
    quick interactive runs; None checks everything. Unchecked entries are NaN.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            grad = np.full(flat.shape, np.nan)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in idx:
                grad[i] = _central_diff(loss_fn, flat, i, h)
            out[name] = grad.reshape(p.data.shape)
    return out


def compare_grads(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                  floor: float = 1e-6) -> tuple[float, int, int]:
    """Max relative error over components with |analytic| > floor.

    NaN entries in the numeric gradient mark unchecked components and are
    skipped. Returns (max_rel_err, checked count, skipped count).
    """
    worst = 0.0
    checked = skipped = 0
    for name, a in analytic.items():
        n = numeric[name]
        for av, nv in zip(a.reshape(-1), n.reshape(-1)):
            if np.isnan(nv) or abs(av) <= floor:
                skipped += 1
                continue
            checked += 1
            rel = abs(av - nv) / max(abs(av), abs(nv))
            worst = max(worst, rel)
    if checked == 0:
        raise UsageError("no gradient components exceeded the comparison floor")
    return worst, checked, skipped


def random_pair(rng: np.random.Generator, vocab_size: int, passage_len: int,
                question_ids: list[int] | None = None, question_len: int = 3) -> EncodedPair:
    """Structurally valid EncodedPair over random non-reserved token ids."""
    p = rng.integers(5, vocab_size, size=passage_len).tolist()
    q = question_ids if question_ids is not None else \
        rng.integers(5, vocab_size, size=question_len).tolist()
    ids = [BOS_ID, *p, BOQ_ID, *q, EOQ_ID]
    pair = EncodedPair(ids=tuple(int(i) for i in ids), loss_start=1 + len(p),
                       question_len=len(q) + 1)
    pair.validate()
    return pair


def tiny_setup(seed: int = 0, vocab_size: int = 64, d_model: int = 32, n_layers: int = 2,
               n_heads: int = 4, d_ff: int = 32, max_seq_len: int = 12):
    """Small 64-bit model plus fixture batches for the three objectives."""
    config = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers,
                         n_heads=n_heads, d_ff=d_ff, max_seq_len=max_seq_len)
    params = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    mle_batch = [random_pair(rng, vocab_size, passage_len=4, question_len=3),
                 random_pair(rng, vocab_size, passage_len=2, question_len=4)]
    lul_batch = [LabeledPair(random_pair(rng, vocab_size, 3, question_len=3), 1),
                 LabeledPair(random_pair(rng, vocab_size, 4, question_len=2), 0),
                 LabeledPair(random_pair(rng, vocab_size, 2, question_len=3), 0)]
    shared_q = rng.integers(5, vocab_size, size=3).tolist()
    rll_batch = [RankTriple(random_pair(rng, vocab_size, 4, question_ids=shared_q),
                            random_pair(rng, vocab_size, 3, question_ids=shared_q)),
                 RankTriple(random_pair(rng, vocab_size, 2, question_ids=shared_q),
                            random_pair(rng, vocab_size, 4, question_ids=shared_q))]
    return params, config, {"mle": mle_batch, "lul": lul_batch, "rll": rll_batch}


_LOSS_FNS = {"mle": mle_loss, "lul": lul_loss, "rll": rll_loss}


def check_objective(objective: str, params: dict[str, Tensor], config: ModelConfig,
                    batch, h: float = 1e-4, tol: float = 1e-4, floor: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """FD check of one objective over every parameter component above the floor.

    Components whose 2-point relative error exceeds tol are re-measured with
    the fourth-order stencil before being counted (see module docstring).
    """
    loss_fn = lambda: _LOSS_FNS[objective](params, config, batch)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    with no_grad():
        for name, p in params.items():
            a = analytic[name].reshape(-1)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                skipped += flat.size - idx.size
            for i in idx:
                av = a[i]
                if abs(av) <= floor:
                    skipped += 1
                    continue
                nv = _central_diff(loss_fn, flat, i, h)
                rel = abs(av - nv) / max(abs(av), abs(nv))
                if rel > tol:
                    nv = _central_diff4(loss_fn, flat, i, h)
                    rel = abs(av - nv) / max(abs(av), abs(nv))
                checked += 1
                worst = max(worst, rel)
    if checked == 0:
        raise UsageError("no gradient components exceeded the comparison floor")
    return GradCheckReport(objective=objective, max_rel_err=worst, checked=checked,
                           skipped=skipped, ok=worst <= tol)


def run_suite(seed: int = 0, h: float = 1e-4, tol: float = 1e-4, floor: float = 1e-6,
              max_entries: int | None = None) -> list[GradCheckReport]:
    """Gradient checks for MLE, LUL, and RLL on the tiny model."""
    params, config, batches = tiny_setup(seed=seed)
    return [check_objective(obj, params, config, batches[obj], h=h, tol=tol,
                            floor=floor, max_entries=max_entries)
            for obj in ("mle", "lul", "rll")]
