"""Corpus handling: synthetic generation, vocab, tokenization, blacklists.

File formats
------------
Corpus: JSON Lines, one object per document:
    {"id": str, "words": [str], "annotations": [{"start": int, "len": int, "cat": str}]}
with cat in {"DIRECT", "INDIRECT", "CONF"}.  Annotation offsets are word
indices; spans never overlap.

Blacklist: UTF-8 text, one space-separated n-gram per line, '#' starts a
comment, blank lines ignored.

Generator config: JSON object with exactly the keys
    n_docs, words_per_doc, n_direct, n_indirect, n_conf, repetition_law, seed
(unknown keys are an error).

Tokenization is word-level; hyphenated words split into one token per
part so whole-word masking has real multi-token words to handle.
Special tokens <mask>, <pad>, <unk>, <bos> take ids 0..3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyBlacklist, EmptyCorpus

MASK_ID = 0
PAD_ID = 1
UNK_ID = 2
BOS_ID = 3
SPECIAL_TOKENS = ("<mask>", "<pad>", "<unk>", "<bos>")

CATEGORIES = ("DIRECT", "INDIRECT", "CONF")

# ---------------------------------------------------------------------------
# Synthetic-language constants.  The filler language is a fixed order-1
# Markov chain shared by every generated corpus (so a model pretrained on
# one corpus transfers to another), while sensitive words and their cue
# words are drawn per corpus seed and never collide with the fillers.
# ---------------------------------------------------------------------------
FILLER_VOCAB_SIZE = 620
CHAIN_BRANCH = 4
CHAIN_PROBS = (0.50, 0.25, 0.15, 0.10)
DECOY_RATE = 0.8  # decoy (cue, filler) pairs per planted term occurrence
MULTIWORD_FRAC = 0.15  # fraction of DIRECT terms that are two-word n-grams
HYPHEN_FRAC = 0.15  # fraction of CONF terms that are hyphenated (multi-token)
CATEGORY_SHARE = {"DIRECT": 0.013, "INDIRECT": 0.007, "CONF": 0.012}

# Marker words for the synthetic downstream classification task.  They are
# part of the shared language (never sensitive, never fillers).
N_CLASSES = 4
MARKERS_PER_CLASS = 3

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _make_word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(_SYLLABLES[rng.integers(0, len(_SYLLABLES))] for _ in range(n_syllables))


def _unique_words(rng: np.random.Generator, n: int, n_syllables: int, taken: set, suffix: str = "") -> list[str]:
    out = []
    while len(out) < n:
        w = _make_word(rng, n_syllables) + suffix
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def seed_tag(seed: int) -> str:
    """Two-letter corpus tag appended to sensitive and cue words, so pools
    generated under different seeds can never collide across corpora."""
    return chr(97 + seed % 26) + chr(97 + (seed // 26) % 26)


def _build_language():
    rng = np.random.default_rng(20240501)
    taken = set(SPECIAL_TOKENS) | {"X"}
    fillers = _unique_words(rng, FILLER_VOCAB_SIZE, 2, taken)
    markers = [_unique_words(rng, MARKERS_PER_CLASS, 4, taken) for _ in range(N_CLASSES)]
    # Zipf-ish unigram weights over fillers plus a sparse successor table.
    ranks = np.arange(1, FILLER_VOCAB_SIZE + 1, dtype=np.float64)
    unigram = 1.0 / ranks**0.8
    unigram /= unigram.sum()
    successors = np.empty((FILLER_VOCAB_SIZE, CHAIN_BRANCH), dtype=np.int64)
    for i in range(FILLER_VOCAB_SIZE):
        successors[i] = rng.choice(FILLER_VOCAB_SIZE, size=CHAIN_BRANCH, replace=False, p=unigram)
    return fillers, markers, unigram, successors


FILLER_WORDS, MARKER_WORDS, FILLER_UNIGRAM, CHAIN_SUCCESSORS = _build_language()
_FILLER_SET = set(FILLER_WORDS)
_MARKER_SET = {w for group in MARKER_WORDS for w in group}


def sample_chain_text(rng: np.random.Generator, n_words: int) -> list[str]:
    """Sample filler text from the shared order-1 Markov chain."""
    if n_words <= 0:
        return []
    probs = np.asarray(CHAIN_PROBS)
    state = int(rng.choice(FILLER_VOCAB_SIZE, p=FILLER_UNIGRAM))
    words = [FILLER_WORDS[state]]
    for _ in range(n_words - 1):
        state = int(CHAIN_SUCCESSORS[state][rng.choice(CHAIN_BRANCH, p=probs)])
        words.append(FILLER_WORDS[state])
    return words


# ---------------------------------------------------------------------------
# Documents and vocab
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    start: int
    length: int
    cat: str


@dataclass
class AnnotatedDocument:
    """A tokenized document with word-level sensitive-span annotations.

    word_tokens is filled by tokenize_documents(); documents are treated
    as immutable once built.
    """

    id: str
    words: list[str]
    annotations: list[Annotation] = field(default_factory=list)
    word_tokens: list[list[int]] | None = None
    _flat: np.ndarray | None = field(default=None, repr=False, compare=False)
    _word_starts: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def token_ids(self) -> np.ndarray:
        """Flat token-id sequence (requires tokenization)."""
        if self._flat is None:
            assert self.word_tokens is not None, "document is not tokenized"
            self._flat = np.asarray([t for toks in self.word_tokens for t in toks], dtype=np.int64)
        return self._flat

    @property
    def word_starts(self) -> np.ndarray:
        """word_starts[w] = index of word w's first token in token_ids."""
        if self._word_starts is None:
            assert self.word_tokens is not None, "document is not tokenized"
            lens = np.asarray([len(t) for t in self.word_tokens], dtype=np.int64)
            starts = np.zeros(len(lens), dtype=np.int64)
            np.cumsum(lens[:-1], out=starts[1:])
            self._word_starts = starts
        return self._word_starts

    def validate(self):
        last_end = 0
        for ann in sorted(self.annotations, key=lambda a: a.start):
            if ann.cat not in CATEGORIES:
                raise ConfigError(f"doc {self.id}: unknown annotation category {ann.cat!r}")
            if ann.start < 0 or ann.length < 1 or ann.start + ann.length > len(self.words):
                raise ConfigError(f"doc {self.id}: annotation out of range: {ann}")
            if ann.start < last_end:
                raise ConfigError(f"doc {self.id}: overlapping annotations")
            last_end = ann.start + ann.length


def word_to_tokens(word: str) -> list[str]:
    """Token strings for one word: hyphenated words split on '-'."""
    if "-" in word:
        parts = [p for p in word.split("-") if p]
        if parts:
            return parts
    return [word]


@dataclass
class Vocab:
    """Word-level token vocabulary with reserved special ids 0..3."""

    token_to_id: dict
    id_to_token: list

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, tok: str) -> int:
        return self.token_to_id.get(tok, UNK_ID)

    def encode_word(self, word: str) -> list[int]:
        return [self.encode_token(t) for t in word_to_tokens(word)]

    def decode_word(self, ids: list[int]) -> str:
        return "-".join(self.id_to_token[i] for i in ids)


def build_vocab(docs: list[AnnotatedDocument], min_freq: int = 1) -> Vocab:
    """Frequency-thresholded vocab over all token strings in docs.

    Words with frequency >= min_freq get dense ids after the four
    specials; rarer words map to <unk> at encode time.
    """
    freqs: dict[str, int] = {}
    for doc in docs:
        for w in doc.words:
            for tok in word_to_tokens(w):
                freqs[tok] = freqs.get(tok, 0) + 1
    if not freqs:
        raise EmptyCorpus("no words in corpus")
    for s in SPECIAL_TOKENS:
        if s in freqs:
            raise ConfigError(f"corpus contains reserved token {s!r}")
    kept = sorted((t for t, c in freqs.items() if c >= min_freq), key=lambda t: (-freqs[t], t))
    id_to_token = list(SPECIAL_TOKENS) + kept
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token)


def tokenize_documents(docs: list[AnnotatedDocument], vocab: Vocab) -> list[AnnotatedDocument]:
    """Return copies of docs with word_tokens filled in."""
    out = []
    for doc in docs:
        toks = [vocab.encode_word(w) for w in doc.words]
        out.append(AnnotatedDocument(id=doc.id, words=doc.words, annotations=doc.annotations, word_tokens=toks))
    return out


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def save_corpus_jsonl(docs: list[AnnotatedDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            obj = {
                "id": doc.id,
                "words": doc.words,
                "annotations": [{"start": a.start, "len": a.length, "cat": a.cat} for a in doc.annotations],
            }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_corpus_jsonl(path) -> list[AnnotatedDocument]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            doc = AnnotatedDocument(
                id=str(obj["id"]),
                words=list(obj["words"]),
                annotations=[Annotation(int(a["start"]), int(a["len"]), str(a["cat"])) for a in obj["annotations"]],
            )
            doc.validate()
            docs.append(doc)
    if not docs:
        raise EmptyCorpus(f"no documents in {path}")
    return docs


@dataclass
class CorpusSplit:
    train: list[AnnotatedDocument]
    heldout: list[AnnotatedDocument]
    fraction_heldout: float


def split_corpus(docs: list[AnnotatedDocument], fraction_heldout: float) -> CorpusSplit:
    if not (0.0 < fraction_heldout < 1.0):
        raise ConfigError("fraction_heldout must be in (0,1)")
    k = max(1, int(round(fraction_heldout * len(docs))))
    if k >= len(docs):
        raise ConfigError("heldout split would leave no training documents")
    return CorpusSplit(train=docs[:-k], heldout=docs[-k:], fraction_heldout=fraction_heldout)


# ---------------------------------------------------------------------------
# Blacklists
# ---------------------------------------------------------------------------


@dataclass
class Blacklist:
    """Sensitive n-grams resolved to token-id space.

    terms carrying <unk> tokens are kept but flagged: they can never be
    regurgitated as themselves, so they are excluded from occurrence
    scans and contribute 0 to metric denominators.
    """

    terms: list[tuple]
    term_words: list[str]
    token_set: frozenset
    repetitions: dict
    flagged: set

    def __len__(self):
        return len(self.terms)

    @property
    def active_terms(self) -> list[tuple]:
        return [t for t in self.terms if t not in self.flagged]

    def term_label(self, term: tuple) -> str:
        return self.term_words[self.terms.index(term)]

    @staticmethod
    def merge(*lists: "Blacklist") -> "Blacklist":
        terms, words, reps, flagged = [], [], {}, set()
        seen = set()
        for bl in lists:
            for term, label in zip(bl.terms, bl.term_words):
                if term in seen:
                    continue
                seen.add(term)
                terms.append(term)
                words.append(label)
                reps[term] = bl.repetitions[term]
                if term in bl.flagged:
                    flagged.add(term)
        token_set = frozenset(t for term in terms if term not in flagged for t in term if t != UNK_ID)
        return Blacklist(terms=terms, term_words=words, token_set=token_set, repetitions=reps, flagged=flagged)


def scan_term_occurrences(docs: list[AnnotatedDocument], terms: list[tuple]) -> dict:
    """Exact sliding-window scan: term -> list of (doc_index, start_token).

    Overlapping occurrences all count (every start position is checked).
    """
    by_first: dict[int, list[tuple]] = {}
    for term in terms:
        by_first.setdefault(term[0], []).append(term)
    hits: dict[tuple, list] = {term: [] for term in terms}
    for di, doc in enumerate(docs):
        ids = doc.token_ids
        n = len(ids)
        lst = ids.tolist()
        for p, tok in enumerate(lst):
            cands = by_first.get(tok)
            if not cands:
                continue
            for term in cands:
                L = len(term)
                if p + L <= n and tuple(lst[p : p + L]) == term:
                    hits[term].append((di, p))
    return hits


def load_blacklist(path, vocab: Vocab, corpus: list[AnnotatedDocument]) -> Blacklist:
    """Parse a blacklist file and resolve terms against vocab and corpus."""
    lines = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if line:
                lines.append(line)
    if not lines:
        raise EmptyBlacklist(f"no terms in {path}")
    return blacklist_from_lines(lines, vocab, corpus)


def blacklist_from_lines(lines: list[str], vocab: Vocab, corpus: list[AnnotatedDocument]) -> Blacklist:
    terms, words, flagged = [], [], set()
    seen = set()
    for line in lines:
        ids = tuple(i for w in line.split() for i in vocab.encode_word(w))
        if not ids or ids in seen:
            continue
        seen.add(ids)
        terms.append(ids)
        words.append(" ".join(line.split()))
        if UNK_ID in ids:
            flagged.add(ids)
    active = [t for t in terms if t not in flagged]
    hits = scan_term_occurrences(corpus, active)
    reps = {t: (len(hits[t]) if t in hits else 0) for t in terms}
    token_set = frozenset(t for term in active for t in term)
    return Blacklist(terms=terms, term_words=words, token_set=token_set, repetitions=reps, flagged=flagged)


# ---------------------------------------------------------------------------
# Pseudonymization
# ---------------------------------------------------------------------------


def pseudonymize(doc: AnnotatedDocument) -> AnnotatedDocument:
    """Replace each DIRECT span by the single word "X"; re-index spans."""
    if not any(a.cat == "DIRECT" for a in doc.annotations):
        return doc
    anns = sorted(doc.annotations, key=lambda a: a.start)
    new_words: list[str] = []
    new_anns: list[Annotation] = []
    cursor = 0
    for ann in anns:
        new_words.extend(doc.words[cursor : ann.start])
        start = len(new_words)
        if ann.cat == "DIRECT":
            new_words.append("X")
            new_anns.append(Annotation(start, 1, "DIRECT"))
        else:
            new_words.extend(doc.words[ann.start : ann.start + ann.length])
            new_anns.append(Annotation(start, ann.length, ann.cat))
        cursor = ann.start + ann.length
    new_words.extend(doc.words[cursor:])
    return AnnotatedDocument(id=doc.id, words=new_words, annotations=new_anns)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    n_docs: int
    words_per_doc: int
    n_direct: int
    n_indirect: int
    n_conf: int
    repetition_law: float
    seed: int

    def __post_init__(self):
        for k in ("n_docs", "words_per_doc", "n_direct", "n_indirect", "n_conf"):
            if getattr(self, k) < 1:
                raise ConfigError(f"GenConfig.{k} must be >= 1")
        if self.repetition_law <= 0:
            raise ConfigError("repetition_law must be > 0")

    @staticmethod
    def from_json(path) -> "GenConfig":
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        required = {"n_docs", "words_per_doc", "n_direct", "n_indirect", "n_conf", "repetition_law", "seed"}
        keys = set(obj)
        if keys != required:
            missing = required - keys
            unknown = keys - required
            raise ConfigError(f"GenConfig keys: missing {sorted(missing)}, unknown {sorted(unknown)}")
        return GenConfig(**{k: (float(obj[k]) if k == "repetition_law" else int(obj[k])) for k in obj})


def zipf_counts(base: float, n_terms: int, law: float) -> list[int]:
    """Occurrence count per rank r (1-based): max(1, round(base / r**law))."""
    return [max(1, int(round(base / (r**law)))) for r in range(1, n_terms + 1)]


def _category_terms(rng, cat: str, n_terms: int, taken: set, tag: str) -> list[list[str]]:
    """Term word lists for one category; some DIRECT terms are two-word
    n-grams and some CONF terms are hyphenated (multi-token) words."""
    terms = []
    for i in range(n_terms):
        if cat == "DIRECT" and i % max(1, int(round(1 / MULTIWORD_FRAC))) == 2:
            terms.append(_unique_words(rng, 2, 3, taken, tag))
        elif cat == "CONF" and i % max(1, int(round(1 / HYPHEN_FRAC))) == 3:
            a, b = _unique_words(rng, 2, 2, taken, tag)
            terms.append([f"{a}-{b}"])
        else:
            terms.append(_unique_words(rng, 1, 3, taken, tag))
    return terms


def generate_synthetic_corpus(cfg: GenConfig):
    """Build an annotated corpus with planted sensitive terms.

    Each term gets a dedicated cue word planted immediately before every
    occurrence, so a model can learn to predict the term from context.
    Decoy (cue, filler) pairs make the cue ambiguous, which is what lets
    a later repair phase redistribute the cue's probability mass.
    Occurrence counts per category follow count(rank) ~ base/rank**law.

    Returns (documents, blacklists) where blacklists maps category ->
    list of term strings (one blacklist-file line each).
    """
    rng = np.random.default_rng(cfg.seed)
    total_words = cfg.n_docs * cfg.words_per_doc
    tag = seed_tag(cfg.seed)

    taken = set(_FILLER_SET) | _MARKER_SET | set(SPECIAL_TOKENS) | {"X"}
    plan = {}
    for cat, n_terms in (("DIRECT", cfg.n_direct), ("INDIRECT", cfg.n_indirect), ("CONF", cfg.n_conf)):
        term_words = _category_terms(rng, cat, n_terms, taken, tag)
        cues = _unique_words(rng, n_terms, 2, taken, tag)
        budget = CATEGORY_SHARE[cat] * total_words
        base = budget / sum(1.0 / (r**cfg.repetition_law) for r in range(1, n_terms + 1))
        counts = zipf_counts(base, n_terms, cfg.repetition_law)
        plan[cat] = (term_words, cues, counts)

    # Item = (annotated_category_or_None, [words...]); cue word included.
    items: list[tuple] = []
    for cat, (term_words, cues, counts) in plan.items():
        for words, cue, count in zip(term_words, cues, counts):
            flat = [w for token in words for w in [token]]
            for _ in range(count):
                items.append((cat, [cue] + flat))
            n_decoys = int(round(DECOY_RATE * count))
            for _ in range(n_decoys):
                filler = FILLER_WORDS[int(rng.choice(FILLER_VOCAB_SIZE, p=FILLER_UNIGRAM))]
                items.append((None, [cue, filler]))

    item_words = sum(len(ws) for _, ws in items)
    # Round-robin assignment over shuffled items keeps per-doc load within
    # one item of the mean, so every document keeps room for filler text.
    cap = cfg.words_per_doc - 2
    max_item_len = max((len(ws) for _, ws in items), default=0)
    per_doc_bound = max_item_len * -(-len(items) // cfg.n_docs)
    if item_words > cfg.n_docs * cap or per_doc_bound > cap:
        raise ConfigError(f"planted material ({item_words} words) exceeds corpus capacity ({cfg.n_docs * cap})")
    order = rng.permutation(len(items))
    per_doc_items: list[list[tuple]] = [[] for _ in range(cfg.n_docs)]
    for k, j in enumerate(order):
        per_doc_items[k % cfg.n_docs].append(items[j])

    docs = []
    for d in range(cfg.n_docs):
        doc_items = per_doc_items[d]
        n_chain = cfg.words_per_doc - sum(len(ws) for _, ws in doc_items)
        chain = sample_chain_text(rng, n_chain)
        # Insertion offsets into the chain text, left to right.
        offsets = sorted(int(rng.integers(0, n_chain + 1)) for _ in doc_items)
        words: list[str] = []
        anns: list[Annotation] = []
        cursor = 0
        for (cat, item_ws), off in zip(doc_items, offsets):
            words.extend(chain[cursor:off])
            if cat is not None:
                anns.append(Annotation(len(words) + 1, len(item_ws) - 1, cat))
            words.extend(item_ws)
            cursor = off
        words.extend(chain[cursor:])
        doc = AnnotatedDocument(id=f"doc{d:05d}", words=words, annotations=sorted(anns, key=lambda a: a.start))
        doc.validate()
        docs.append(doc)

    blacklists = {cat: [" ".join(ws) for ws in plan[cat][0]] for cat in plan}
    return docs, blacklists


def write_synthetic_corpus(cfg: GenConfig, outdir) -> dict:
    """Generate and write corpus.jsonl plus one blacklist file per category."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    docs, blacklists = generate_synthetic_corpus(cfg)
    paths = {"corpus": outdir / "corpus.jsonl"}
    save_corpus_jsonl(docs, paths["corpus"])
    for cat, lines in blacklists.items():
        p = outdir / f"blacklist_{cat.lower()}.txt"
        with open(p, "w", encoding="utf-8") as f:
            f.write(f"# {cat.lower()} terms\n")
            for line in lines:
                f.write(line + "\n")
        paths[cat.lower()] = p
    return paths
