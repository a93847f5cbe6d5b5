"""Cloze datasets: a synthetic fact-recall generator and a TSV reader.

A synthetic document is a shuffled mix of fact triples ``head rel tail`` and
single distractor words. Each query restates one fact with its tail replaced
by ``@blank``; the answer is that tail entity.
"""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PLACEHOLDER = "@blank"
UNK = "@unk"


class IngestError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Vocabulary:
    """Token strings and ids; ``entities`` is the answer sub-vocabulary."""

    tokens: list[str]
    entities: list[str]
    index: dict[str, int] = field(init=False, repr=False)
    entity_pos: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (PLACEHOLDER, UNK):
            if special not in self.index:
                raise ValueError(f"vocabulary lacks {special}")
        if PLACEHOLDER in self.entities or UNK in self.entities:
            raise ValueError("special tokens cannot be entities")
        missing = [e for e in self.entities if e not in self.index]
        if missing:
            raise ValueError(f"entities not in vocabulary: {missing[:5]}")
        self.entity_pos = {self.index[e]: i for i, e in enumerate(self.entities)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def placeholder_id(self) -> int:
        return self.index[PLACEHOLDER]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def encode(self, words) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.index.get(w, unk) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "entities": self.entities})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(obj["tokens"], obj["entities"])


@dataclass(frozen=True)
class ClozeExample:
    doc_id: int
    doc: np.ndarray
    query: np.ndarray
    answer: int


def _synthetic_vocab(n_entities: int, n_relations: int, n_words: int) -> Vocabulary:
    ents = [f"ent{i}" for i in range(n_entities)]
    rels = [f"rel{i}" for i in range(n_relations)]
    words = [f"w{i}" for i in range(n_words)]
    return Vocabulary([PLACEHOLDER, UNK] + ents + rels + words, ents)


def generate_synthetic_cloze(cfg, seed: int | None = None):
    """Build ``(train, valid, vocab)`` from a :class:`~linattn.qa.train.TrainConfig`.

    Train holds ``cfg.n_docs`` documents and valid ``cfg.n_valid_docs``; the
    split is by document. Within a document every (head, relation) pair is
    unique, so each query has exactly one answer.
    """
    seed = cfg.seed if seed is None else seed
    E, Rn, F = cfg.n_entities, cfg.n_relations, cfg.facts
    if E < 4:
        raise ValueError("need at least 4 entities")
    if F < 1 or F > E * Rn:
        raise ValueError(f"cannot place {F} distinct facts with {E} entities and {Rn} relations")
    if cfg.doc_len < 3 * F:
        raise ValueError(f"doc_len {cfg.doc_len} < 3 * facts ({3 * F})")
    if not 1 <= cfg.m <= F:
        raise ValueError(f"m={cfg.m} queries per document needs 1 <= m <= facts={F}")
    n_distract = cfg.doc_len - 3 * F
    if n_distract and cfg.n_words < 1:
        raise ValueError("distractors requested but n_words == 0")

    vocab = _synthetic_vocab(E, Rn, cfg.n_words)
    ent0 = vocab.index["ent0"]
    rel0 = vocab.index["rel0"] if Rn else 0
    word0 = vocab.index["w0"] if cfg.n_words else 0
    blank = vocab.placeholder_id
    rng = np.random.default_rng(seed)

    def make_doc(doc_id: int) -> list[ClozeExample]:
        pairs = rng.choice(E * Rn, size=F, replace=False)
        heads, rels = pairs // Rn, pairs % Rn
        tails = (heads + rng.integers(1, E, size=F)) % E
        triples = [[ent0 + h, rel0 + r, ent0 + t] for h, r, t in zip(heads, rels, tails)]
        units = triples + [[word0 + w] for w in rng.integers(0, max(cfg.n_words, 1), size=n_distract)]
        order = rng.permutation(len(units))
        doc = np.array([tok for i in order for tok in units[i]], dtype=np.int64)
        out = []
        for j in rng.choice(F, size=cfg.m, replace=False):
            h, r, t = triples[j]
            out.append(ClozeExample(doc_id, doc, np.array([h, r, blank], dtype=np.int64), int(t)))
        return out

    train = [ex for i in range(cfg.n_docs) for ex in make_doc(i)]
    valid = [ex for i in range(cfg.n_docs, cfg.n_docs + cfg.n_valid_docs) for ex in make_doc(i)]
    return train, valid, vocab


def _read_records(path):
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestError(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        doc, query, answer = (p.split() for p in parts)
        if len(answer) != 1:
            raise IngestError(lineno, "answer must be a single token")
        n_blank = query.count(PLACEHOLDER)
        if n_blank != 1:
            raise IngestError(lineno, f"query must contain exactly one {PLACEHOLDER}, found {n_blank}")
        yield lineno, doc, query, answer[0]


def ingest_examples(path, vocab: Vocabulary | None = None):
    """Read ``doc<TAB>query<TAB>answer`` lines into ``(examples, vocab)``.

    Without ``vocab`` one is built from the file: every answer token becomes
    an entity. With ``vocab``, unseen words map to ``@unk`` and an answer
    outside its entity set is an error.
    """
    records = list(_read_records(path))
    if vocab is None:
        entities = sorted({a for _, _, _, a in records})
        words = sorted({w for _, d, q, _ in records for w in d + q} - set(entities) - {PLACEHOLDER, UNK})
        vocab = Vocabulary([PLACEHOLDER, UNK] + entities + words, entities)
    doc_ids: dict[tuple, int] = {}
    examples = []
    for lineno, doc, query, answer in records:
        if answer not in vocab.entities:
            raise IngestError(lineno, f"answer {answer!r} is not a known entity")
        if answer not in doc:
            warnings.warn(f"line {lineno}: answer {answer!r} does not occur in the document", stacklevel=2)
        key = tuple(doc)
        doc_id = doc_ids.setdefault(key, len(doc_ids))
        examples.append(ClozeExample(doc_id, vocab.encode(doc), vocab.encode(query), vocab.index[answer]))
    return examples, vocab


def write_examples(path, examples, vocab: Vocabulary):
    """Inverse of :func:`ingest_examples` for a vocabulary-encoded dataset."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write("\t".join([" ".join(vocab.decode(ex.doc)), " ".join(vocab.decode(ex.query)),
                                vocab.tokens[ex.answer]]) + "\n")


@dataclass
class Batch:
    """Documents of one length plus all of their queries.

    ``doc_of[j]`` is the row of ``docs`` that query ``j`` asks about and
    ``slot_of[j]`` its position among that document's queries;
    ``query_groups`` holds ``(positions, tokens)`` per query length.
    """

    docs: np.ndarray
    doc_of: np.ndarray
    slot_of: np.ndarray
    query_groups: list[tuple[np.ndarray, np.ndarray]]
    answers: np.ndarray | None

    @property
    def max_queries(self) -> int:
        return int(self.slot_of.max()) + 1 if len(self.slot_of) else 0

    @property
    def n_queries(self) -> int:
        return len(self.doc_of)

    @classmethod
    def from_examples(cls, examples, vocab: Vocabulary | None = None) -> "Batch":
        rows: dict[int, int] = {}
        docs = []
        for ex in examples:
            if ex.doc_id not in rows:
                rows[ex.doc_id] = len(docs)
                docs.append(ex.doc)
        lengths = {len(d) for d in docs}
        if len(lengths) != 1:
            raise ValueError(f"batch mixes document lengths {sorted(lengths)}")
        doc_of = np.array([rows[ex.doc_id] for ex in examples], dtype=np.int64)
        seen = defaultdict(int)
        slot_of = np.empty(len(examples), dtype=np.int64)
        for j, row in enumerate(doc_of):
            slot_of[j] = seen[row]
            seen[row] += 1
        by_len = defaultdict(list)
        for j, ex in enumerate(examples):
            by_len[len(ex.query)].append(j)
        groups = [(np.array(pos), np.stack([examples[j].query for j in pos]))
                  for _, pos in sorted(by_len.items())]
        answers = None
        if vocab is not None:
            answers = np.array([vocab.entity_pos[ex.answer] for ex in examples], dtype=np.int64)
        return cls(np.stack(docs), doc_of, slot_of, groups, answers)


def iter_batches(examples, vocab: Vocabulary, batch_docs: int, rng: np.random.Generator | None = None):
    """Yield :class:`Batch` objects of up to ``batch_docs`` documents.

    Documents are bucketed by length; order is shuffled when ``rng`` is given.
    """
    by_doc = defaultdict(list)
    for ex in examples:
        by_doc[ex.doc_id].append(ex)
    buckets = defaultdict(list)
    for doc_id, exs in by_doc.items():
        buckets[len(exs[0].doc)].append(doc_id)
    chunks = []
    for length in sorted(buckets):
        ids = buckets[length]
        if rng is not None:
            ids = [ids[i] for i in rng.permutation(len(ids))]
        chunks += [ids[i:i + batch_docs] for i in range(0, len(ids), batch_docs)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield Batch.from_examples([ex for d in chunk for ex in by_doc[d]], vocab)
