"""Erase-and-repair pipeline plus baselines.

Strategies
----------
sani         zero 50% of the final linear layer's output units (weight
             row + bias entry), then repair
pruning      per weight matrix in every layer including the head: rank
             units by the L2 norm of their incoming weights, exempt the
             top 1%, randomly zero 20% of the rest; then repair
repair-only  no erasure; repair alone

Repair runs the privacy-preserving objective on the original training
corpus for ceil(0.20 * finetune_epochs) epochs.  The learning rate
restarts at the schedule's starting value and decays linearly over the
repair window, with a fresh optimizer state (erased units must relearn
from live gradients, not stale momentum).

Embedding tables and 1-D parameters (layer-norm gains/biases) are never
pruned: zeroing an embedding row deletes a token from the input space
and zeroing a norm gain kills a channel globally, neither of which the
layer-wise unit reset is meant to do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import objectives as O
from . import tensor as T
from .corpus import AnnotatedDocument, Blacklist, Vocab
from .errors import FractionOutOfRange, SchemeVariantMismatch

STRATEGIES = ("sani", "pruning", "repair-only")

PRUNE_PROTECT_FRACTION = 0.01
PRUNE_RESET_FRACTION = 0.20

# weight-matrix name suffix -> (unit axis, paired bias suffix)
_PRUNABLE = {
    "attn.wq": (1, "attn.bq"),
    "attn.wk": (1, "attn.bk"),
    "attn.wv": (1, "attn.bv"),
    "attn.wo": (1, "attn.bo"),
    "ff.w1": (1, "ff.b1"),
    "ff.w2": (1, "ff.b2"),
}


@dataclass
class ErasureReport:
    strategy: str
    seed: int
    affected: list = field(default_factory=list)
    zeroed_units: dict = field(default_factory=dict)

    def total_zeroed(self) -> int:
        return sum(self.zeroed_units.values())

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "affected": self.affected,
            "zeroed_units": self.zeroed_units,
        }


@dataclass
class UnlearnBudget:
    """Repair cost cap: 20% of the original fine-tuning epoch count."""

    finetune_epochs: int
    budget_fraction: float = 0.20

    @property
    def repair_epochs(self) -> int:
        return max(1, math.ceil(self.budget_fraction * self.finetune_epochs))


def erase_last_layer(params: M.ModelParams, fraction: float, rng: np.random.Generator):
    """Zero ceil(fraction * vocab) randomly chosen head units.

    A unit is one output row of the head weight plus its bias entry, so
    an erased unit's logit is exactly 0 before softmax.  Every other
    parameter is returned bit-identical.
    """
    if not (0.0 <= fraction <= 1.0):
        raise FractionOutOfRange(f"fraction must be in [0,1], got {fraction}")
    seed_used = int(rng.integers(0, 2**31 - 1))
    pick_rng = np.random.default_rng(seed_used)
    out = params.copy()
    vocab = params.cfg.vocab_size
    n = math.ceil(fraction * vocab)
    report = ErasureReport(strategy="sani", seed=seed_used)
    if n > 0:
        units = np.sort(pick_rng.choice(vocab, size=n, replace=False))
        out[M.HEAD_WEIGHT].data[units, :] = 0.0
        out[M.HEAD_BIAS].data[units] = 0.0
        report.affected = [M.HEAD_WEIGHT, M.HEAD_BIAS]
        report.zeroed_units = {M.HEAD_WEIGHT: int(n)}
    return out, report


def pruning_unit_counts(n_units: int) -> tuple[int, int]:
    """(protected, zeroed) unit counts for one matrix of n_units units."""
    protected = math.ceil(PRUNE_PROTECT_FRACTION * n_units)
    zeroed = math.floor(PRUNE_RESET_FRACTION * (n_units - protected))
    return protected, zeroed


def erase_pruning(
    params: M.ModelParams,
    protect_fraction: float = PRUNE_PROTECT_FRACTION,
    reset_fraction: float = PRUNE_RESET_FRACTION,
    rng: np.random.Generator | None = None,
):
    """Magnitude-guarded random unit reset across every weight matrix."""
    rng = rng if rng is not None else np.random.default_rng(0)
    seed_used = int(rng.integers(0, 2**31 - 1))
    pick_rng = np.random.default_rng(seed_used)
    out = params.copy()
    report = ErasureReport(strategy="pruning", seed=seed_used)

    matrices: list[tuple[str, int, str]] = []
    for name in params.names():
        if name == M.HEAD_WEIGHT:
            matrices.append((name, 0, M.HEAD_BIAS))
        else:
            for suffix, (axis, bias_suffix) in _PRUNABLE.items():
                if name.endswith(suffix):
                    matrices.append((name, axis, name[: -len(suffix)] + bias_suffix))

    for name, axis, bias_name in matrices:
        w = out[name].data
        n_units = w.shape[axis]
        protected = math.ceil(protect_fraction * n_units)
        norms = np.linalg.norm(w, axis=1 - axis)
        keep = np.argsort(-norms, kind="stable")[:protected]
        pool = np.setdiff1d(np.arange(n_units), keep)
        n_zero = math.floor(reset_fraction * len(pool))
        if n_zero == 0:
            continue
        chosen = np.sort(pick_rng.choice(pool, size=n_zero, replace=False))
        if axis == 0:
            w[chosen, :] = 0.0
        else:
            w[:, chosen] = 0.0
        out[bias_name].data[chosen] = 0.0
        report.affected.extend([name, bias_name])
        report.zeroed_units[name] = int(n_zero)
    return out, report


def repair(
    params: M.ModelParams,
    docs: list[AnnotatedDocument],
    vocab: Vocab,
    blacklist: Blacklist,
    budget: UnlearnBudget,
    scheme: str,
    schedule: O.TrainSchedule,
    seed: int,
    chunks=None,
    evaluate=None,
):
    """Budgeted privacy-preserving fine-tuning on the training corpus.

    Runs exactly budget.repair_epochs epochs of `scheme` (ppmlm or
    ppclm), restarting the learning rate at schedule.lr_start with a
    linear decay over the repair window.  `evaluate`, when given, is
    called as evaluate(params, epoch, phase) after every epoch and its
    records are returned.
    """
    if scheme not in ("ppmlm", "ppclm"):
        raise SchemeVariantMismatch(f"repair expects a privacy-preserving scheme, got {scheme!r}")
    if O.scheme_variant(scheme) != params.cfg.variant:
        raise SchemeVariantMismatch(f"scheme {scheme!r} incompatible with variant {params.cfg.variant!r}")
    repair_schedule = O.TrainSchedule(
        total_epochs=budget.repair_epochs,
        lr_start=schedule.lr_start,
        batch_sequences=schedule.batch_sequences,
        seq_len=schedule.seq_len,
    )
    opt = T.AdamState()
    records = []
    for epoch in range(budget.repair_epochs):
        O.train_epoch(
            params,
            opt,
            docs,
            vocab,
            scheme,
            repair_schedule,
            epoch_index=epoch,
            seed=seed,
            blacklist=blacklist,
            chunks=chunks,
        )
        if evaluate is not None:
            records.append(evaluate(params, epoch + 1, "repair"))
    return params, records


def sanitize(
    params: M.ModelParams,
    docs: list[AnnotatedDocument],
    vocab: Vocab,
    blacklist: Blacklist,
    strategy: str,
    budget: UnlearnBudget,
    scheme: str,
    schedule: O.TrainSchedule,
    seed: int,
    chunks=None,
    evaluate=None,
):
    """Erase (per strategy) then repair; metrics recorded at sanitization
    epoch 0 (post-erasure, pre-repair) and after every repair epoch."""
    if strategy not in STRATEGIES:
        raise SchemeVariantMismatch(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x5A41)))
    if strategy == "sani":
        work, report = erase_last_layer(params, 0.5, rng)
    elif strategy == "pruning":
        work, report = erase_pruning(params, rng=rng)
    else:
        work = params.copy()
        report = ErasureReport(strategy="repair-only", seed=int(seed))
    records = []
    if evaluate is not None:
        records.append(evaluate(work, 0, "erase"))
    work, repair_records = repair(
        work, docs, vocab, blacklist, budget, scheme, schedule, seed, chunks=chunks, evaluate=evaluate
    )
    records.extend(repair_records)
    return work, report, records
