"""Downstream sequence classification on top of the bidirectional encoder.

The synthetic task has four classes keyed on non-sensitive marker words:
each example is filler chain text with one class's marker words inserted,
so the task is solvable without any blacklisted term.  Examples are
encoded as [<bos>, words...]; the classifier pools the first-position
representation through a linear head and is fine-tuned jointly with the
encoder: warmup to the peak learning rate over the first 10% of steps,
linear decay to zero over the rest.

Labeled-set file format: JSON Lines, {"words": [str], "label": int}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .corpus import BOS_ID, MARKER_WORDS, N_CLASSES, PAD_ID, Vocab, sample_chain_text
from .errors import EmptyLabeledSet, MissingClass, SchemeVariantMismatch

CLS_HEAD_WEIGHT = "cls.weight"
CLS_HEAD_BIAS = "cls.bias"
IGNORE_LABEL = -1


@dataclass
class LabeledExample:
    words: list[str]
    label: int


@dataclass
class ClassifierHead:
    weight: T.Tensor  # [n_classes, d_model]
    bias: T.Tensor  # [n_classes]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def make_labeled_set(n_examples: int, seed: int, words_per_example: int = 24) -> list[LabeledExample]:
    """Balanced synthetic classification set over the shared filler chain."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_examples):
        label = i % N_CLASSES
        words = sample_chain_text(rng, words_per_example)
        n_markers = int(rng.integers(1, 3))
        for _ in range(n_markers):
            marker = MARKER_WORDS[label][int(rng.integers(0, len(MARKER_WORDS[label])))]
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, marker)
        out.append(LabeledExample(words=words, label=label))
    return out


def save_labeled_jsonl(examples: list[LabeledExample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"words": ex.words, "label": ex.label}, separators=(",", ":")) + "\n")


def load_labeled_jsonl(path) -> list[LabeledExample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                obj = json.loads(line)
                out.append(LabeledExample(words=list(obj["words"]), label=int(obj["label"])))
    if not out:
        raise EmptyLabeledSet(f"no examples in {path}")
    return out


def encode_examples(examples: list[LabeledExample], vocab: Vocab, max_seq: int):
    """Pad to a common length with <bos> prefixes; truncate to max_seq."""
    rows = []
    for ex in examples:
        ids = [BOS_ID] + [t for w in ex.words for t in vocab.encode_word(w)]
        rows.append(ids[:max_seq])
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    labels = np.asarray([ex.label for ex in examples], dtype=np.int64)
    return ids, labels


def classify_logits(params: M.ModelParams, head: ClassifierHead, ids: np.ndarray) -> T.Tensor:
    hidden = M.forward_hidden(params, ids, pads=ids == PAD_ID)
    pooled = T.first_position(hidden)
    return T.add(T.matmul(pooled, T.swap_axes(head.weight, 0, 1)), head.bias)


def classifier_lr(step: int, total_steps: int, warmup_fraction: float, peak_lr: float) -> float:
    """Ramp 0 -> peak over the warmup steps, then linear decay to 0."""
    warmup = max(1, int(warmup_fraction * total_steps))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    rest = max(1, total_steps - warmup)
    return peak_lr * max(0.0, 1.0 - (step + 1 - warmup) / rest)


def train_classifier(
    encoder: M.ModelParams,
    train_set: list[LabeledExample],
    vocab: Vocab,
    epochs: int = 4,
    warmup_fraction: float = 0.10,
    peak_lr: float = 2e-5,
    seed: int = 0,
    batch_size: int = 8,
    eval_set: list[LabeledExample] | None = None,
    n_classes: int = N_CLASSES,
):
    """Jointly fine-tune a copy of the encoder with a fresh linear head.

    Returns (tuned encoder, head, per-epoch macro-F1 history measured on
    eval_set when given, else on the training set).
    """
    if encoder.cfg.variant != M.MLM:
        raise SchemeVariantMismatch("classification requires the bidirectional variant")
    if not train_set:
        raise EmptyLabeledSet("empty labeled training set")
    rng = np.random.default_rng(seed)
    params = encoder.copy()
    d = params.cfg.d_model
    head = ClassifierHead(
        weight=T.Tensor(rng.normal(0.0, 0.02, size=(n_classes, d)), name=CLS_HEAD_WEIGHT),
        bias=T.Tensor(np.zeros(n_classes), name=CLS_HEAD_BIAS),
    )
    trainable = dict(params.tensors)
    trainable[CLS_HEAD_WEIGHT] = head.weight
    trainable[CLS_HEAD_BIAS] = head.bias

    ids, labels = encode_examples(train_set, vocab, params.cfg.max_seq)
    n = len(train_set)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    opt = T.AdamState()
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            pick = order[s * batch_size : (s + 1) * batch_size]
            with T.Tape() as tape:
                logits = classify_logits(params, head, ids[pick])
                loss = T.cross_entropy(logits, labels[pick], ignore_id=IGNORE_LABEL)
            grads = T.backward(tape, loss, trainable)
            T.adam_step(trainable, grads, opt, classifier_lr(step, total_steps, warmup_fraction, peak_lr))
            step += 1
        history.append(macro_f1(params, head, eval_set if eval_set is not None else train_set, vocab))
    return params, head, history


def predict_labels(params: M.ModelParams, head: ClassifierHead, examples: list[LabeledExample], vocab: Vocab):
    ids, labels = encode_examples(examples, vocab, params.cfg.max_seq)
    preds = []
    for i in range(0, len(examples), 64):
        preds.append(classify_logits(params, head, ids[i : i + 64]).data.argmax(axis=-1))
    return np.concatenate(preds), labels


def macro_f1(params: M.ModelParams, head: ClassifierHead, test_set: list[LabeledExample], vocab: Vocab) -> float:
    """Unweighted mean of per-class F1 over all classes in the head."""
    if not test_set:
        raise EmptyLabeledSet("empty labeled test set")
    preds, labels = predict_labels(params, head, test_set, vocab)
    k = head.n_classes
    present = set(labels.tolist())
    if present != set(range(k)):
        raise MissingClass(f"test set lacks classes {sorted(set(range(k)) - present)}")
    scores = []
    for c in range(k):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        scores.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return float(np.mean(scores))
