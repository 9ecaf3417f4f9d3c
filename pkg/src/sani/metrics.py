"""Regurgitation and utility measurement.

Definitions
-----------
A prediction EVENT is a predicted position whose top-1 token belongs to
the blacklist's token set.  Events are attributed to the term that owns
the predicted token.  An occurrence of a term counts as regurgitated
in place when every one of its positions is predicted correctly within
the same evaluation pass; other events are "elsewhere" events.  Each
term's regurgitated-iteration count is capped at its corpus repetition
count, which keeps the rates in [0, 1]:

    rate    = sum(min(reps, in_place + elsewhere)) / sum(reps)
    privacy = 1 - rate          (over the identifier blacklist)
    regurgitation = rate        (over the confidential blacklist)

Masked-model evaluation partitions every document's words into
ceil(1/0.15) groups and masks one group per pass, so every position is
predicted exactly once.  Causal evaluation is teacher-forced: one pass,
every position predicted from its true prefix.

Utility is top-1 accuracy: over a deterministic 15% masked sample of
held-out text (masked variant) or over every next-token position
(causal variant).
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import model as M
from .corpus import MASK_ID, PAD_ID, AnnotatedDocument, Blacklist, Vocab, scan_term_occurrences
from .errors import EmptyHeldout, SchemeVariantMismatch, ZeroDenominator
from .objectives import MASK_RATE, Chunk, build_chunks, clm_targets

EVAL_PARTITION_SEED = 0x45AF
UTILITY_SEED = 0x7EAF
EVAL_BATCH = 32
PASSES = int(np.ceil(1.0 / MASK_RATE))


@dataclass
class MetricsRecord:
    run: str
    epoch: int
    phase: str  # finetune | erase | repair
    privacy: float
    regurgitation: float
    utility: float
    events: int

    def csv_row(self) -> list[str]:
        return [
            self.run,
            str(self.epoch),
            self.phase,
            f"{self.privacy:.10g}",
            f"{self.regurgitation:.10g}",
            f"{self.utility:.10g}",
            str(self.events),
        ]


METRICS_HEADER = ["run", "epoch", "phase", "privacy", "regurgitation", "utility", "events"]


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                MetricsRecord(
                    run=row["run"],
                    epoch=int(row["epoch"]),
                    phase=row["phase"],
                    privacy=float(row["privacy"]),
                    regurgitation=float(row["regurgitation"]),
                    utility=float(row["utility"]),
                    events=int(row["events"]),
                )
            )
    return out


@dataclass
class TermRow:
    label: str
    repetitions: int
    events: int
    capped: int


@dataclass
class TermRegurgitationTable:
    rows: list

    def total_repetitions(self) -> int:
        return sum(r.repetitions for r in self.rows)

    def total_events(self) -> int:
        return sum(r.events for r in self.rows)

    def total_capped(self) -> int:
        return sum(r.capped for r in self.rows)

    def rate(self) -> float:
        denom = self.total_repetitions()
        if denom == 0:
            raise ZeroDenominator("blacklist has no corpus occurrences")
        return self.total_capped() / denom


TERM_HEADER = ["term", "repetitions", "events", "capped"]


def write_term_table_csv(table: TermRegurgitationTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(TERM_HEADER)
        for r in table.rows:
            w.writerow([r.label, r.repetitions, r.events, r.capped])


def read_term_table_csv(path) -> TermRegurgitationTable:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            rows.append(TermRow(row["term"], int(row["repetitions"]), int(row["events"]), int(row["capped"])))
    return TermRegurgitationTable(rows=rows)


# ---------------------------------------------------------------------------
# Prediction passes
# ---------------------------------------------------------------------------


@dataclass
class PredictionTable:
    """Per-document top-1 predictions: pred[token_pos] (-1 where absent)
    and the evaluation pass that produced each prediction."""

    pred: list
    pass_id: list


def _argmax_batches(params: M.ModelParams, rows: list[tuple], threads: int = 1) -> list[np.ndarray]:
    """rows: list of (inputs [B,T], pads [B,T]); returns argmax [B,T] each."""

    def run(row):
        inputs, pads = row
        return M.forward_batch(params, inputs, pads=pads).data.argmax(axis=-1)

    if threads > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, rows))
    return [run(row) for row in rows]


def eval_word_partition(doc: AnnotatedDocument, doc_index: int) -> list[np.ndarray]:
    """Deterministic split of a document's word indices into masking groups
    of ~15% each; every word lands in exactly one group."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(EVAL_PARTITION_SEED, doc_index)))
    perm = rng.permutation(len(doc.words))
    k = max(1, int(round(MASK_RATE * len(doc.words))))
    return [perm[i : i + k] for i in range(0, len(perm), k)]


def eval_pass_mlm(
    params: M.ModelParams,
    docs: list[AnnotatedDocument],
    seq_len: int,
    chunks: list[Chunk] | None = None,
    threads: int = 1,
) -> PredictionTable:
    """Mask every word exactly once across passes; record top-1 per token."""
    if params.cfg.variant != M.MLM:
        raise SchemeVariantMismatch("eval_pass_mlm requires the bidirectional variant")
    if chunks is None:
        chunks = build_chunks(docs, seq_len, add_bos=False)
    parts = [eval_word_partition(doc, di) for di, doc in enumerate(docs)]
    n_pass = max(len(p) for p in parts)
    pred = [np.full(len(d.token_ids), -1, dtype=np.int64) for d in docs]
    pass_of = [np.full(len(d.token_ids), -1, dtype=np.int64) for d in docs]

    for p in range(n_pass):
        groups = [parts[di][p] if p < len(parts[di]) else None for di in range(len(docs))]
        todo = []
        for c in chunks:
            g = groups[c.doc_index]
            if g is None:
                continue
            sel = np.isin(c.word_index, g)
            if sel.any():
                todo.append((c, sel))
        # chunks without padding batch together and skip mask construction
        todo.sort(key=lambda pair: bool(pair[0].token_pos[-1] < 0))
        batches = []
        metas = []
        for i in range(0, len(todo), EVAL_BATCH):
            bs = todo[i : i + EVAL_BATCH]
            inputs = np.stack([c.ids for c, _ in bs])
            for row, (c, sel) in enumerate(bs):
                inputs[row, sel] = MASK_ID
            pads = inputs == PAD_ID
            batches.append((inputs, pads if pads.any() else None))
            metas.append(bs)
        for am, bs in zip(_argmax_batches(params, batches, threads), metas):
            for row, (c, sel) in enumerate(bs):
                tp = c.token_pos[sel]
                pred[c.doc_index][tp] = am[row, sel]
                pass_of[c.doc_index][tp] = p
    return PredictionTable(pred=pred, pass_id=pass_of)


def eval_pass_clm(
    params: M.ModelParams,
    docs: list[AnnotatedDocument],
    seq_len: int,
    chunks: list[Chunk] | None = None,
    threads: int = 1,
) -> PredictionTable:
    """Teacher-forced predictions: token at doc position q is predicted by
    the chunk position immediately before it (<bos> for chunk-initial)."""
    if params.cfg.variant != M.CLM:
        raise SchemeVariantMismatch("eval_pass_clm requires the causal variant")
    if chunks is None:
        chunks = build_chunks(docs, seq_len, add_bos=True)
    pred = [np.full(len(d.token_ids), -1, dtype=np.int64) for d in docs]
    pass_of = [np.full(len(d.token_ids), -1, dtype=np.int64) for d in docs]

    batches = []
    metas = []
    for i in range(0, len(chunks), EVAL_BATCH):
        bs = chunks[i : i + EVAL_BATCH]
        inputs = np.stack([c.ids for c in bs])
        batches.append((inputs, inputs == PAD_ID))
        metas.append(bs)
    for am, bs in zip(_argmax_batches(params, batches, threads), metas):
        for row, c in enumerate(bs):
            ridx = np.flatnonzero(c.token_pos >= 0)
            if not len(ridx):
                continue
            tp = c.token_pos[ridx]
            pred[c.doc_index][tp] = am[row, ridx - 1]
            pass_of[c.doc_index][tp] = 0
    return PredictionTable(pred=pred, pass_id=pass_of)


# ---------------------------------------------------------------------------
# Regurgitation counting
# ---------------------------------------------------------------------------


def token_owner_map(blacklist: Blacklist) -> dict:
    """token id -> owning term; ties go to the most repeated term."""
    owner: dict = {}
    ranked = sorted(
        blacklist.active_terms, key=lambda t: (-blacklist.repetitions.get(t, 0), blacklist.terms.index(t))
    )
    for term in ranked:
        for tok in term:
            owner.setdefault(tok, term)
    return owner


def count_regurgitations(
    predictions: PredictionTable,
    docs: list[AnnotatedDocument],
    blacklist: Blacklist,
) -> tuple[int, TermRegurgitationTable]:
    """Count prediction events against one blacklist.

    Returns total event count and the per-term table.  Term repetitions
    are rescanned over the documents being evaluated, so the table is
    self-consistent whichever corpus (or slice) the predictions cover.
    Flagged (unknown-word) terms appear as all-zero rows.
    """
    owner = token_owner_map(blacklist)
    token_ids = np.asarray(sorted(blacklist.token_set), dtype=np.int64)
    occurrences = scan_term_occurrences(docs, blacklist.active_terms)

    in_place: dict = {t: 0 for t in blacklist.terms}
    matched_positions = [set() for _ in docs]
    for term, occs in occurrences.items():
        L = len(term)
        for di, start in occs:
            p = predictions.pred[di][start : start + L]
            g = predictions.pass_id[di][start : start + L]
            if (p == np.asarray(term)).all() and g[0] >= 0 and (g == g[0]).all():
                in_place[term] += 1
                matched_positions[di].update(range(start, start + L))

    events: dict = {t: 0 for t in blacklist.terms}
    elsewhere: dict = {t: 0 for t in blacklist.terms}
    total_events = 0
    for di in range(len(docs)):
        pr = predictions.pred[di]
        hits = np.flatnonzero((pr >= 0) & np.isin(pr, token_ids))
        total_events += len(hits)
        matched = matched_positions[di]
        for pos in hits:
            term = owner[int(pr[pos])]
            events[term] += 1
            if int(pos) not in matched:
                elsewhere[term] += 1

    rows = []
    for term, label in zip(blacklist.terms, blacklist.term_words):
        reps = len(occurrences[term]) if term in occurrences else 0
        capped = min(reps, in_place[term] + elsewhere[term])
        rows.append(TermRow(label=label, repetitions=reps, events=events[term], capped=capped))
    return total_events, TermRegurgitationTable(rows=rows)


def privacy_metric(table: TermRegurgitationTable) -> float:
    """1 - capped regurgitated fraction of identifier iterations."""
    return 1.0 - table.rate()


def regurgitation_metric(table: TermRegurgitationTable) -> float:
    """Capped regurgitated fraction of confidential-term iterations."""
    return table.rate()


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------


def utility_mlm(
    params: M.ModelParams,
    heldout: list[AnnotatedDocument],
    seq_len: int,
    chunks: list[Chunk] | None = None,
    threads: int = 1,
) -> float:
    """Top-1 accuracy over a fixed 15% whole-word masked sample."""
    if not heldout or not any(d.words for d in heldout):
        raise EmptyHeldout("no held-out text")
    if chunks is None:
        chunks = build_chunks(heldout, seq_len, add_bos=False)
    masked_words = []
    for di, doc in enumerate(heldout):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(UTILITY_SEED, di)))
        k = max(1, int(round(MASK_RATE * len(doc.words))))
        masked_words.append(set(rng.choice(len(doc.words), size=k, replace=False).tolist()))

    batches, metas = [], []
    for i in range(0, len(chunks), EVAL_BATCH):
        bs = chunks[i : i + EVAL_BATCH]
        inputs = np.stack([c.ids for c in bs])
        truths, sels = [], []
        for row, c in enumerate(bs):
            sel = np.isin(c.word_index, list(masked_words[c.doc_index]))
            truths.append(inputs[row, sel].copy())
            inputs[row, sel] = MASK_ID
            sels.append(sel)
        batches.append((inputs, inputs == PAD_ID))
        metas.append((sels, truths))
    correct = 0
    total = 0
    for am, (sels, truths) in zip(_argmax_batches(params, batches, threads), metas):
        for row, (sel, truth) in enumerate(zip(sels, truths)):
            correct += int((am[row, sel] == truth).sum())
            total += int(sel.sum())
    return correct / total if total else 0.0


def utility_clm(
    params: M.ModelParams,
    heldout: list[AnnotatedDocument],
    seq_len: int,
    chunks: list[Chunk] | None = None,
    threads: int = 1,
) -> float:
    """Teacher-forced next-token top-1 accuracy over held-out text."""
    if not heldout or not any(d.words for d in heldout):
        raise EmptyHeldout("no held-out text")
    preds = eval_pass_clm(params, heldout, seq_len, chunks=chunks, threads=threads)
    correct = 0
    total = 0
    for di, doc in enumerate(heldout):
        ids = doc.token_ids
        pr = preds.pred[di]
        have = pr >= 0
        correct += int((pr[have] == ids[have]).sum())
        total += int(have.sum())
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Frequency analysis
# ---------------------------------------------------------------------------


@dataclass
class FrequencyAnalysis:
    scatter: list  # (label, repetitions, events) sorted by ascending repetitions
    cumulative: list  # (repetitions, cumulative events) in the same order
    spearman: float


def frequency_analysis(table: TermRegurgitationTable) -> FrequencyAnalysis:
    """Repetitions-vs-events scatter, cumulative curve, and rank correlation.

    Degenerate inputs (constant repetitions or events) report 0 correlation.
    """
    rows = sorted(table.rows, key=lambda r: (r.repetitions, r.label))
    scatter = [(r.label, r.repetitions, r.events) for r in rows]
    cum = 0
    cumulative = []
    for r in rows:
        cum += r.events
        cumulative.append((r.repetitions, cum))
    reps = [r.repetitions for r in rows]
    events = [r.events for r in rows]
    if len(rows) < 2 or len(set(reps)) < 2 or len(set(events)) < 2:
        rho = 0.0
    else:
        rho = float(stats.spearmanr(reps, events).statistic)
        if not np.isfinite(rho):
            rho = 0.0
    return FrequencyAnalysis(scatter=scatter, cumulative=cumulative, spearman=rho)
