"""Language-modeling objectives and the per-epoch training loop.

Four schemes share one loop:

  mlm    mask 15% of words (whole-word), predict originals
  ppmlm  same, but mask selection skips words inside blacklisted spans
  clm    next-token prediction over every position
  ppclm  next-token prediction with targets inside blacklisted spans
         replaced by the padding id, which cross-entropy ignores
         (inputs are untouched; excluded terms still serve as context)

Documents are packed into fixed-length chunks on word boundaries, so a
multi-token word never straddles two sequences.  Causal chunks start
with <bos>, which gives every real token a predicting position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .corpus import BOS_ID, MASK_ID, PAD_ID, AnnotatedDocument, Blacklist, Vocab
from .errors import EmptyDocument, NoMaskableTokens, SchemeVariantMismatch

SCHEMES = ("mlm", "ppmlm", "clm", "ppclm")
MASK_RATE = 0.15


def scheme_variant(scheme: str) -> str:
    return M.MLM if scheme in ("mlm", "ppmlm") else M.CLM


@dataclass
class TrainSchedule:
    """Linear-to-zero learning-rate schedule plus batch geometry.

    Reference-scale defaults are 512-token sequences in batches of 8;
    desk configs override seq_len (the batch stays 8 sequences).
    """

    total_epochs: int
    lr_start: float = 1e-4
    batch_sequences: int = 8
    seq_len: int = 512

    def lr(self, fraction: float) -> float:
        return max(0.0, self.lr_start * (1.0 - fraction))


@dataclass
class MaskingPlan:
    """Masked word positions for one document, one epoch."""

    doc_id: str
    positions: list[int]
    targets: list[list[int]]
    policy: str = "mask"


def blacklist_word_mask(doc: AnnotatedDocument, blacklist: Blacklist | None) -> np.ndarray:
    """Boolean per word: True where the word sits inside an annotated span
    whose token n-gram is a blacklist term."""
    excluded = np.zeros(len(doc.words), dtype=bool)
    if blacklist is None or not blacklist.terms:
        return excluded
    terms = set(blacklist.terms)
    for ann in doc.annotations:
        span_ids = tuple(
            t for w in range(ann.start, ann.start + ann.length) for t in doc.word_tokens[w]
        )
        if span_ids in terms:
            excluded[ann.start : ann.start + ann.length] = True
    return excluded


def _draw_plan(doc: AnnotatedDocument, maskable: np.ndarray, rate: float, rng: np.random.Generator) -> MaskingPlan:
    pool = np.flatnonzero(maskable)
    k = int(round(rate * len(pool)))
    if len(pool) > 0:
        k = max(1, k)
    picks = np.sort(rng.choice(pool, size=k, replace=False))
    return MaskingPlan(
        doc_id=doc.id,
        positions=[int(p) for p in picks],
        targets=[list(doc.word_tokens[int(p)]) for p in picks],
    )


def select_masks_standard(doc: AnnotatedDocument, rate: float, rng: np.random.Generator) -> MaskingPlan:
    """Uniform without-replacement draw over all words."""
    if not doc.words:
        raise EmptyDocument(f"doc {doc.id} has no words")
    return _draw_plan(doc, np.ones(len(doc.words), dtype=bool), rate, rng)


def select_masks_privacy(
    doc: AnnotatedDocument,
    blacklist: Blacklist | None,
    rate: float,
    rng: np.random.Generator,
    excluded: np.ndarray | None = None,
) -> MaskingPlan:
    """Draw only from words outside blacklisted spans.

    Excluded words may still appear unmasked in the input, serving as
    context.  `excluded` short-circuits the span lookup when the caller
    has precomputed it for the epoch loop.
    """
    if not doc.words:
        raise EmptyDocument(f"doc {doc.id} has no words")
    if excluded is None:
        excluded = blacklist_word_mask(doc, blacklist)
    maskable = ~excluded
    if not maskable.any():
        raise NoMaskableTokens(f"doc {doc.id}: every word is blacklisted")
    return _draw_plan(doc, maskable, rate, rng)


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------


@dataclass
class Chunk:
    """One model-ready sequence sliced out of a document.

    word_index / token_pos are -1 at special positions (<bos>, padding).
    """

    doc_index: int
    ids: np.ndarray
    word_index: np.ndarray
    token_pos: np.ndarray

    @property
    def real(self) -> np.ndarray:
        return self.token_pos >= 0


def build_chunks(docs: list[AnnotatedDocument], seq_len: int, add_bos: bool) -> list[Chunk]:
    """Pack whole words into seq_len-token chunks, padding the remainder."""
    chunks = []
    capacity = seq_len - (1 if add_bos else 0)
    for di, doc in enumerate(docs):
        w = 0
        n_words = len(doc.words)
        starts = doc.word_starts
        while w < n_words:
            ids, widx, tpos = [], [], []
            if add_bos:
                ids, widx, tpos = [BOS_ID], [-1], [-1]
            used = 0
            while w < n_words:
                toks = doc.word_tokens[w]
                if used + len(toks) > capacity:
                    break
                for j, t in enumerate(toks):
                    ids.append(t)
                    widx.append(w)
                    tpos.append(int(starts[w]) + j)
                used += len(toks)
                w += 1
            while len(ids) < seq_len:
                ids.append(PAD_ID)
                widx.append(-1)
                tpos.append(-1)
            chunks.append(
                Chunk(
                    doc_index=di,
                    ids=np.asarray(ids, dtype=np.int64),
                    word_index=np.asarray(widx, dtype=np.int64),
                    token_pos=np.asarray(tpos, dtype=np.int64),
                )
            )
    return chunks


def blacklist_token_mask(doc: AnnotatedDocument, blacklist: Blacklist | None) -> np.ndarray:
    """Boolean per flat token position: inside a blacklisted span."""
    word_mask = blacklist_word_mask(doc, blacklist)
    token_mask = np.zeros(len(doc.token_ids), dtype=bool)
    starts = doc.word_starts
    for w in np.flatnonzero(word_mask):
        token_mask[starts[w] : starts[w] + len(doc.word_tokens[w])] = True
    return token_mask


def clm_targets(doc: AnnotatedDocument) -> np.ndarray:
    """target[t] = token[t+1]; the final position gets the ignored pad id."""
    if not doc.words:
        raise EmptyDocument(f"doc {doc.id} has no words")
    ids = doc.token_ids
    out = np.full(len(ids), PAD_ID, dtype=np.int64)
    out[:-1] = ids[1:]
    return out


def clm_targets_privacy(doc: AnnotatedDocument, blacklist: Blacklist | None) -> np.ndarray:
    """Like clm_targets, but targets inside blacklisted spans become the
    pad id so the loss never trains the model to emit them.  Inputs are
    not modified."""
    out = clm_targets(doc)
    mask = blacklist_token_mask(doc, blacklist)
    shifted = np.zeros_like(mask)
    shifted[:-1] = mask[1:]
    out[shifted] = PAD_ID
    return out


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


def _mlm_step_arrays(chunks: list[Chunk], plans_by_doc: dict[int, MaskingPlan]):
    """Inputs/targets for a list of chunks under the epoch's masking plans."""
    inputs = np.stack([c.ids for c in chunks])
    targets = np.full_like(inputs, PAD_ID)
    for row, c in enumerate(chunks):
        plan = plans_by_doc.get(c.doc_index)
        if plan is None:
            continue
        sel = np.isin(c.word_index, plan.positions)
        targets[row, sel] = inputs[row, sel]
        inputs[row, sel] = MASK_ID
    return inputs, targets


def _clm_step_arrays(chunks: list[Chunk], targets_by_doc: dict[int, tuple]):
    """targets_by_doc maps doc_index -> (per-position target array, target
    for predicting the document's first token)."""
    inputs = np.stack([c.ids for c in chunks])
    targets = np.full_like(inputs, PAD_ID)
    for row, c in enumerate(chunks):
        doc_t, first = targets_by_doc[c.doc_index]
        tp = c.token_pos
        real = tp >= 0
        targets[row, real] = doc_t[tp[real]]
        ridx = np.flatnonzero(real)
        if len(ridx) and inputs[row, 0] == BOS_ID:
            q = int(tp[ridx[0]])
            targets[row, 0] = first if q == 0 else doc_t[q - 1]
    return inputs, targets


@dataclass
class EpochResult:
    loss: float
    utility: float | None = None
    plans: list = field(default_factory=list)


def train_epoch(
    params: M.ModelParams,
    opt_state: T.AdamState,
    docs: list[AnnotatedDocument],
    vocab: Vocab,
    scheme: str,
    schedule: TrainSchedule,
    epoch_index: int,
    seed: int,
    blacklist: Blacklist | None = None,
    chunks: list[Chunk] | None = None,
    heldout_eval=None,
    collect_plans: bool = False,
) -> EpochResult:
    """One full pass over docs in fixed order with per-epoch masking.

    Deterministic given (seed, epoch_index).  The learning rate decays
    linearly across the schedule's total_epochs, continuously in steps.
    heldout_eval, when given, is called with params after the epoch and
    its result is reported as the utility snapshot.
    """
    if scheme not in SCHEMES:
        raise SchemeVariantMismatch(f"unknown scheme {scheme!r}")
    if scheme_variant(scheme) != params.cfg.variant:
        raise SchemeVariantMismatch(f"scheme {scheme!r} incompatible with variant {params.cfg.variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(epoch_index), 0x7261)))

    add_bos = params.cfg.variant == M.CLM
    if chunks is None:
        chunks = build_chunks(docs, schedule.seq_len, add_bos)

    plans_by_doc: dict[int, MaskingPlan] = {}
    targets_by_doc: dict[int, tuple] = {}
    if scheme in ("mlm", "ppmlm"):
        for di, doc in enumerate(docs):
            if scheme == "mlm":
                plans_by_doc[di] = select_masks_standard(doc, MASK_RATE, rng)
            else:
                plans_by_doc[di] = select_masks_privacy(doc, blacklist, MASK_RATE, rng)
    else:
        for di, doc in enumerate(docs):
            if scheme == "clm":
                doc_t = clm_targets(doc)
                first = int(doc.token_ids[0])
            else:
                doc_t = clm_targets_privacy(doc, blacklist)
                in_span = blacklist_token_mask(doc, blacklist)
                first = PAD_ID if in_span[0] else int(doc.token_ids[0])
            targets_by_doc[di] = (doc_t, first)

    bs = schedule.batch_sequences
    n_steps = (len(chunks) + bs - 1) // bs
    losses = []
    for step in range(n_steps):
        batch = chunks[step * bs : (step + 1) * bs]
        if scheme in ("mlm", "ppmlm"):
            inputs, targets = _mlm_step_arrays(batch, plans_by_doc)
        else:
            inputs, targets = _clm_step_arrays(batch, targets_by_doc)
        pads = inputs == PAD_ID
        frac = (epoch_index + step / n_steps) / schedule.total_epochs
        lr = schedule.lr(frac)
        with T.Tape() as tape:
            logits = M.forward_batch(params, inputs, pads=pads)
            B, S, V = logits.shape
            loss = T.cross_entropy(T.reshape(logits, (B * S, V)), targets.reshape(-1), ignore_id=PAD_ID)
        grads = T.backward(tape, loss, params.tensors)
        T.adam_step(params.tensors, grads, opt_state, lr)
        losses.append(float(loss.data))

    utility = heldout_eval(params) if heldout_eval is not None else None
    return EpochResult(
        loss=float(np.mean(losses)) if losses else 0.0,
        utility=utility,
        plans=list(plans_by_doc.values()) if collect_plans else [],
    )
