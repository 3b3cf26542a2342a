"""Dataset ingestion, vocabularies, embeddings, synthetic evidence-chain corpora and padding."""

from __future__ import annotations

import csv
import json
import logging
import string
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<unk>"
PAD_INDEX = 0
OOV_INDEX = 1
WIKIQA_COLUMNS = ["QuestionID", "Question", "DocumentID", "DocumentTitle", "SentenceID", "Sentence", "Label"]

_PUNCT = set(string.punctuation)


class DataError(ValueError):
    """Malformed input data; the message names the offending line when known."""


@dataclass(frozen=True)
class Candidate:
    cid: str
    text: str
    label: int


@dataclass(frozen=True)
class QAInstance:
    qid: str
    question: str
    candidates: tuple[Candidate, ...]

    @property
    def labels(self) -> list[int]:
        return [c.label for c in self.candidates]


@dataclass(frozen=True)
class IndexedInstance:
    """A QAInstance mapped to token indices (truncated to the length caps)."""

    qid: str
    question: np.ndarray
    candidates: tuple[np.ndarray, ...]
    labels: np.ndarray

    def __len__(self):
        return len(self.candidates)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel boundary punctuation into separate tokens."""
    tokens = []
    for word in text.lower().split():
        lead = []
        while word and word[0] in _PUNCT:
            lead.append(word[0])
            word = word[1:]
        trail = []
        while word and word[-1] in _PUNCT:
            trail.append(word[-1])
            word = word[:-1]
        tokens.extend(lead)
        if word:
            tokens.append(word)
        tokens.extend(reversed(trail))
    return tokens


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = [PAD_TOKEN, OOV_TOKEN]
        self.stoi = {PAD_TOKEN: PAD_INDEX, OOV_TOKEN: OOV_INDEX}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, OOV_INDEX)

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, OOV_INDEX) for t in tokens]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.itos[2:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Vocabulary of tokens seen at least ``min_count`` times, ordered by (count desc, token)."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for inst in corpus:
        counts.update(tokenize(inst.question))
        for cand in inst.candidates:
            counts.update(tokenize(cand.text))
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def load_embeddings(path: str, vocab: Vocabulary, dim: int = 300, seed: int = 0) -> np.ndarray:
    """Embedding matrix for ``vocab``: file vectors where available, U[-0.1, 0.1] otherwise.

    The random rows are drawn for the whole table up front from ``seed``, so the
    values for missing tokens do not depend on which tokens the file covers.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    found = 0
    with open(path, encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) - 1 != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values for {parts[0]!r}, got {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx < 2:
                continue
            table[idx] = np.asarray(parts[1:], dtype=np.float64)
            found += 1
    table[PAD_INDEX] = 0.0
    log.info("embeddings: %d/%d vocabulary tokens found in %s", found, len(vocab) - 2, path)
    return table


def random_embeddings(vocab_size: int, dim: int, seed: int = 0) -> np.ndarray:
    table = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(vocab_size, dim))
    table[PAD_INDEX] = 0.0
    return table


def load_wikiqa_tsv(path: str) -> list[QAInstance]:
    """Group WikiQA rows by QuestionID (file order preserved)."""
    groups: OrderedDict[str, list] = OrderedDict()
    questions = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in WIKIQA_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        col = {name: header.index(name) for name in WIKIQA_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            label = row[col["Label"]].strip()
            if label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            text = row[col["Sentence"]]
            if not tokenize(text):
                raise DataError(f"{path}:{lineno}: empty candidate sentence")
            qid = row[col["QuestionID"]]
            questions.setdefault(qid, row[col["Question"]])
            groups.setdefault(qid, []).append(Candidate(row[col["SentenceID"]], text, int(label)))
    return [QAInstance(qid, questions[qid], tuple(cands)) for qid, cands in groups.items()]


def filter_answerable(instances) -> list[QAInstance]:
    return [inst for inst in instances if any(c.label == 1 for c in inst.candidates)]


# canonical line-delimited format ------------------------------------------------

def instance_to_record(inst: QAInstance) -> dict:
    return {
        "qid": inst.qid,
        "question": inst.question,
        "candidates": [{"cid": c.cid, "text": c.text, "label": c.label} for c in inst.candidates],
    }


def instance_from_record(rec: dict, where: str = "") -> QAInstance:
    try:
        cands = []
        for c in rec["candidates"]:
            label = c["label"]
            if label not in (0, 1) or isinstance(label, bool):
                raise DataError(f"{where}: label must be 0 or 1, got {label!r}")
            if not tokenize(c["text"]):
                raise DataError(f"{where}: empty candidate {c['cid']!r}")
            cands.append(Candidate(str(c["cid"]), c["text"], int(label)))
        if not cands:
            raise DataError(f"{where}: question {rec['qid']!r} has no candidates")
        return QAInstance(str(rec["qid"]), rec["question"], tuple(cands))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{where}: malformed record ({exc})") from None


def write_canonical(instances, path: str):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(instance_to_record(inst), ensure_ascii=False, sort_keys=True) + "\n")


def read_canonical(path: str) -> list[QAInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(instance_from_record(rec, f"{path}:{lineno}"))
    return out


def index_instances(instances, vocab: Vocabulary, max_q_len: int = 40, max_c_len: int = 200):
    out = []
    for inst in instances:
        q = np.asarray(vocab.encode(tokenize(inst.question))[:max_q_len], dtype=np.int64)
        if q.size == 0:
            raise DataError(f"question {inst.qid!r} is empty after tokenization")
        cands = tuple(np.asarray(vocab.encode(tokenize(c.text))[:max_c_len], dtype=np.int64)
                      for c in inst.candidates)
        out.append(IndexedInstance(inst.qid, q, cands, np.asarray(inst.labels, dtype=np.int64)))
    return out


# padding -------------------------------------------------------------------------

def pad_sequences(seqs, max_len: int | None = None):
    """Right-pad (and truncate from the end) to a common length.

    Returns (ids [B, L], mask [B, L] float, lengths [B] of the original sequences).
    """
    lengths = np.asarray([len(s) for s in seqs], dtype=np.int64)
    if (lengths <= 0).any():
        raise ValueError("sequences must be non-empty")
    width = int(lengths.max()) if max_len is None else min(int(lengths.max()), max_len)
    ids = np.full((len(seqs), width), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        n = min(len(s), width)
        ids[i, :n] = np.asarray(s[:n])
        mask[i, :n] = 1.0
    return ids, mask, lengths


@dataclass
class PaddedBatch:
    question_ids: np.ndarray
    question_mask: np.ndarray
    question_lengths: np.ndarray
    candidate_ids: np.ndarray
    candidate_mask: np.ndarray
    candidate_lengths: np.ndarray
    offsets: np.ndarray  # candidate rows of instance i are offsets[i]:offsets[i+1]
    labels: np.ndarray


def pad_batch(instances, max_q_len: int = 40, max_c_len: int = 200) -> PaddedBatch:
    qs = [inst.question for inst in instances]
    cs = [c for inst in instances for c in inst.candidates]
    q_ids, q_mask, q_len = pad_sequences(qs, max_q_len)
    c_ids, c_mask, c_len = pad_sequences(cs, max_c_len)
    offsets = np.cumsum([0] + [len(inst.candidates) for inst in instances])
    labels = np.concatenate([np.asarray(inst.labels) for inst in instances])
    return PaddedBatch(q_ids, q_mask, q_len, c_ids, c_mask, c_len, offsets, labels)


# synthetic evidence-chain corpora ------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Shape of a synthetic corpus in which most correct answers are only
    recognisable through an "anchor" answer that overlaps the question."""

    vocab_size: int = 200
    question_len: int = 6
    candidate_len: int = 7
    candidates: int = 8
    correct: int = 3
    question_overlap: int = 3
    bridge: int = 3
    # "tail": shared blocks contiguous, bridge ends every correct answer;
    # "blocks": bridge at a random offset; "shuffled": all tokens at random positions
    layout: str = "tail"
    splits: dict = field(default_factory=lambda: {"train": 500, "dev": 100, "test": 100})

    def validate(self):
        if self.correct < 1:
            raise ValueError("need at least one correct candidate per question")
        if self.candidates < self.correct:
            raise ValueError(f"candidates ({self.candidates}) < correct ({self.correct})")
        if self.question_overlap < 2 or self.question_overlap > min(self.question_len, self.candidate_len):
            raise ValueError("question_overlap must be >= 2 and fit in both question and candidate")
        if self.bridge < 2 or self.question_overlap + self.bridge > self.candidate_len:
            raise ValueError("bridge must be >= 2 and fit in the anchor next to the question overlap")
        if self.layout not in ("tail", "blocks", "shuffled"):
            raise ValueError(f"unknown layout {self.layout!r}")
        needed = self.question_len + 2 * self.candidate_len
        if self.vocab_size < needed:
            raise ValueError(f"vocab_size must be at least {needed} for this shape")


def _place_block(rng, block, filler):
    """Insert ``block`` (kept contiguous and in order) at a random offset inside ``filler``."""
    at = int(rng.integers(0, len(filler) + 1))
    return np.concatenate([filler[:at], block, filler[at:]])


def _synth_question(cfg: SynthConfig, rng: np.random.Generator, qid: str) -> QAInstance:
    pool = np.arange(cfg.vocab_size)
    q = rng.choice(pool, size=cfg.question_len, replace=False)
    rest = np.setdiff1d(pool, q)
    start = int(rng.integers(0, cfg.question_len - cfg.question_overlap + 1))
    overlap = q[start:start + cfg.question_overlap]  # a contiguous question phrase
    anchor_new = rng.choice(rest, size=cfg.candidate_len - cfg.question_overlap, replace=False)
    bridge, anchor_fill = anchor_new[:cfg.bridge], anchor_new[cfg.bridge:]
    outside = np.setdiff1d(rest, anchor_new)  # shares nothing with question or anchor

    if cfg.layout in ("tail", "blocks"):
        anchor = np.concatenate([overlap, anchor_fill, bridge])
    else:
        anchor = rng.permutation(np.concatenate([overlap, anchor_new]))
    texts = [(anchor, 1)]
    for _ in range(cfg.correct - 1):
        filler = rng.choice(outside, size=cfg.candidate_len - cfg.bridge, replace=False)
        if cfg.layout == "tail":
            toks = np.concatenate([filler, bridge])
        elif cfg.layout == "blocks":
            toks = _place_block(rng, bridge, filler)
        else:
            toks = rng.permutation(np.concatenate([bridge, filler]))
        texts.append((toks, 1))
    for _ in range(cfg.candidates - cfg.correct):
        texts.append((rng.choice(outside, size=cfg.candidate_len, replace=False), 0))

    order = rng.permutation(len(texts))
    cands = []
    for j, k in enumerate(order):
        toks, label = texts[k]
        cands.append(Candidate(f"{qid}-c{j}", " ".join(f"w{t}" for t in toks), label))
    q_text = " ".join(f"w{t}" for t in q)
    return QAInstance(qid, q_text, tuple(cands))


def gen_synthetic(cfg: SynthConfig, seed: int, n_questions: int | None = None, split: str = "train") -> list[QAInstance]:
    """Deterministic evidence-chain corpus for one split.

    Per question: one anchor answer shares ``question_overlap`` tokens with the
    question; the other correct answers share the ``bridge`` tokens with the
    anchor and nothing with the question; wrong answers share nothing with
    either. All non-question tokens come from the same pool, so only the
    relation to the anchor separates later correct answers from wrong ones.
    """
    cfg.validate()
    if n_questions is None:
        n_questions = cfg.splits[split]
    split_no = sorted(cfg.splits).index(split) if split in cfg.splits else len(cfg.splits)
    rng = np.random.default_rng([seed, split_no])
    return [_synth_question(cfg, rng, f"{split}-{seed}-{i}") for i in range(n_questions)]


def gen_synthetic_splits(cfg: SynthConfig, seed: int) -> dict[str, list[QAInstance]]:
    return {name: gen_synthetic(cfg, seed, n, name) for name, n in cfg.splits.items()}
