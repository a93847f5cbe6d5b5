"""On-disk store of fixed-size document sketches with O(k^2) lookups.

Sketch file layout (all little-endian)::

    offset  size   field
    0       4      magic b"LATC"
    4       4      format version (u32)
    8       4      k (u32)
    12      4      n, source document length (u32, informational)
    16      1      flags (u8); bit 0 set when k > n
    17      8*k*k  C, float64, row-major
    17+8k^2 4      CRC32 of every preceding byte

A store directory holds ``index.tsv`` (doc_id, relative path, n, k per line),
``encoder.npz`` and a ``sketches/`` directory.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from linattn.attention import Sketch, build_sketch_chunked, linear_attention
from linattn.qa.data import PLACEHOLDER, UNK, Vocabulary
from linattn.rnn import EmbeddingTable, GRUParams, encode_query, iter_state_chunks

MAGIC = b"LATC"
VERSION = 1
HEADER = struct.Struct("<4sIIIB")
CRC = struct.Struct("<I")
FLAG_K_EXCEEDS_N = 0x01
INDEX_NAME = "index.tsv"
ENCODER_NAME = "encoder.npz"
SKETCH_DIR = "sketches"


class SketchFileError(ValueError):
    pass


class BadMagicError(SketchFileError):
    pass


class UnsupportedVersionError(SketchFileError):
    pass


class ChecksumError(SketchFileError):
    pass


class UnknownDocumentError(KeyError):
    pass


def sketch_file_size(k: int) -> int:
    return HEADER.size + 8 * k * k + CRC.size


def encode_sketch(C, n: int) -> bytes:
    C = C.C if isinstance(C, Sketch) else np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 1:
        raise SketchFileError(f"sketch must be a non-empty square matrix, got {C.shape}")
    k = C.shape[0]
    flags = FLAG_K_EXCEEDS_N if k > n else 0
    body = HEADER.pack(MAGIC, VERSION, k, n, flags) + C.astype("<f8").tobytes(order="C")
    return body + CRC.pack(zlib.crc32(body))


def decode_sketch(data: bytes) -> tuple[Sketch, int]:
    """Parse sketch bytes; returns ``(sketch, flags)``."""
    if len(data) < HEADER.size + CRC.size:
        raise SketchFileError(f"truncated sketch file ({len(data)} bytes)")
    magic, version, k, n, flags = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported")
    if len(data) != sketch_file_size(k):
        raise SketchFileError(f"expected {sketch_file_size(k)} bytes for k={k}, got {len(data)}")
    (crc,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(data[:-CRC.size]) != crc:
        raise ChecksumError("CRC32 mismatch; sketch file is corrupt")
    if k < 1:
        raise SketchFileError("k must be at least 1")
    C = np.frombuffer(data, dtype="<f8", count=k * k, offset=HEADER.size).reshape(k, k)
    return Sketch(C.astype(np.float64), n), flags


def _file_name(doc_id: str) -> str:
    return hashlib.sha256(doc_id.encode("utf-8")).hexdigest()[:24] + ".latc"


def save_sketch(C, n: int, doc_id: str, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / _file_name(doc_id)
    path.write_bytes(encode_sketch(C, n))
    return path


def load_sketch(path) -> Sketch:
    return decode_sketch(Path(path).read_bytes())[0]


@dataclass
class Encoder:
    """Vocabulary plus separate document and query GRU encoders."""

    vocab: Vocabulary
    doc_embed: EmbeddingTable
    doc_gru: GRUParams
    query_embed: EmbeddingTable
    query_gru: GRUParams

    @property
    def k(self) -> int:
        return self.doc_gru.k

    @classmethod
    def random(cls, vocab: Vocabulary, d: int, k: int, seed: int = 0, embed_scale: float = 1.0) -> "Encoder":
        rng = np.random.default_rng(seed)
        return cls(vocab, EmbeddingTable.init(len(vocab), d, rng, embed_scale), GRUParams.init(d, k, rng),
                   EmbeddingTable.init(len(vocab), d, rng, embed_scale), GRUParams.init(d, k, rng))

    @classmethod
    def from_model(cls, params, vocab: Vocabulary) -> "Encoder":
        return cls(vocab, params.doc_embed, params.doc_gru, params.query_embed, params.query_gru)

    def sketch(self, words) -> Sketch:
        """Stream the document through the GRU into a sketch.

        States are produced and folded into ``C`` one block at a time, so the
        full ``H`` is never held.
        """
        ids = self.vocab.encode(words)
        return build_sketch_chunked(iter_state_chunks(ids, self.doc_embed, self.doc_gru), self.k)

    def query(self, words) -> np.ndarray:
        return encode_query(self.vocab.encode(words), self.query_embed, self.query_gru)

    def save(self, path):
        arrays = {"doc_embed": self.doc_embed.E, "query_embed": self.query_embed.E}
        for prefix, p in (("doc_gru.", self.doc_gru), ("query_gru.", self.query_gru)):
            arrays.update({prefix + name: val for name, val in vars(p).items()})
        np.savez(path, vocab=np.array(self.vocab.to_json()), **arrays)

    @classmethod
    def load(cls, path) -> "Encoder":
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}

        def gru(prefix):
            return GRUParams(**{k[len(prefix):]: v for k, v in data.items() if k.startswith(prefix)})

        return cls(Vocabulary.from_json(str(data["vocab"])), EmbeddingTable(data["doc_embed"]),
                   gru("doc_gru."), EmbeddingTable(data["query_embed"]), gru("query_gru."))


def vocab_from_corpus(corpus_dir) -> Vocabulary:
    """Vocabulary of every whitespace token under ``corpus_dir``; no entities."""
    words = set()
    for path in _corpus_files(corpus_dir):
        try:
            words.update(path.read_text(encoding="utf-8").split())
        except (OSError, UnicodeDecodeError):
            continue
    words -= {PLACEHOLDER, UNK}
    return Vocabulary([PLACEHOLDER, UNK] + sorted(words), [])


@dataclass(frozen=True)
class IndexEntry:
    doc_id: str
    path: str
    n: int
    k: int


class StoreIndex:
    """doc_id -> sketch file mapping, persisted as ``index.tsv``."""

    def __init__(self, root, entries: dict[str, IndexEntry] | None = None):
        self.root = Path(root)
        self.entries: dict[str, IndexEntry] = entries or {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.entries

    def add(self, entry: IndexEntry):
        if entry.doc_id in self.entries:
            raise ValueError(f"duplicate document id {entry.doc_id!r}")
        self.entries[entry.doc_id] = entry

    def path_of(self, doc_id: str) -> Path:
        try:
            return self.root / self.entries[doc_id].path
        except KeyError:
            raise UnknownDocumentError(doc_id) from None

    def sketch_bytes(self) -> int:
        """Total size of the sketch files (index and encoder excluded)."""
        return sum((self.root / e.path).stat().st_size for e in self.entries.values())

    def save(self):
        lines = [f"{e.doc_id}\t{e.path}\t{e.n}\t{e.k}\n" for e in self.entries.values()]
        (self.root / INDEX_NAME).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def open(cls, root) -> "StoreIndex":
        root = Path(root)
        index = cls(root)
        text = (root / INDEX_NAME).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise SketchFileError(f"{INDEX_NAME} line {lineno}: expected 4 fields")
            doc_id, rel, n, k = parts
            entry = IndexEntry(doc_id, rel, int(n), int(k))
            if not (root / rel).is_file():
                raise FileNotFoundError(f"{INDEX_NAME} line {lineno}: missing sketch file {rel}")
            index.add(entry)
        return index


def _corpus_files(corpus_dir) -> list[Path]:
    return sorted(p for p in Path(corpus_dir).rglob("*") if p.is_file())


def encode_corpus(corpus_dir, encoder: Encoder, store_dir) -> StoreIndex:
    """Write one sketch per corpus file; doc ids are paths relative to the corpus."""
    corpus_dir, store_dir = Path(corpus_dir), Path(store_dir)
    (store_dir / SKETCH_DIR).mkdir(parents=True, exist_ok=True)
    index = StoreIndex(store_dir)
    for path in _corpus_files(corpus_dir):
        doc_id = path.relative_to(corpus_dir).as_posix()
        try:
            words = path.read_text(encoding="utf-8").split()
        except (OSError, UnicodeDecodeError) as exc:
            warnings.warn(f"skipping unreadable document {doc_id!r}: {exc}", stacklevel=2)
            continue
        if not words:
            warnings.warn(f"document {doc_id!r} is empty; storing a zero sketch", stacklevel=2)
        sketch = encoder.sketch(words)
        if encoder.k > sketch.n:
            warnings.warn(f"document {doc_id!r} has n={sketch.n} < k={encoder.k}; "
                          "its hidden states would be smaller than the sketch", stacklevel=2)
        out = save_sketch(sketch, sketch.n, doc_id, store_dir / SKETCH_DIR)
        index.add(IndexEntry(doc_id, out.relative_to(store_dir).as_posix(), sketch.n, encoder.k))
    encoder.save(store_dir / ENCODER_NAME)
    index.save()
    return index


class SketchStore:
    """Read side of a store: LRU-cached sketches and ``C q`` lookups."""

    def __init__(self, root, encoder: Encoder | None = None, cache_size: int = 1024):
        self.index = StoreIndex.open(root)
        self.encoder = encoder if encoder is not None else Encoder.load(Path(root) / ENCODER_NAME)
        self.cache_size = cache_size
        self._cache: OrderedDict[str, Sketch] = OrderedDict()

    def sketch(self, doc_id: str) -> Sketch:
        if doc_id in self._cache:
            self._cache.move_to_end(doc_id)
            return self._cache[doc_id]
        sk = load_sketch(self.index.path_of(doc_id))
        if self.cache_size > 0:
            self._cache[doc_id] = sk
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return sk

    def lookup(self, doc_id: str, q) -> np.ndarray:
        return linear_attention(self.sketch(doc_id), q)

    def query(self, doc_id: str, words) -> np.ndarray:
        return self.lookup(doc_id, self.encoder.query(words))


def query_store(index: StoreIndex, doc_id: str, query_words, encoder: Encoder) -> np.ndarray:
    """Encode the query and return ``C q`` for the stored document."""
    q = encoder.query(query_words)
    return linear_attention(load_sketch(index.path_of(doc_id)), q)


def describe(index: StoreIndex) -> str:
    return json.dumps({"documents": len(index), "sketch_bytes": index.sketch_bytes()})
