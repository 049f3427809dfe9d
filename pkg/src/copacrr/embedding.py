"""Pre-trained word embeddings and the model's two similarity inputs.

The scorer consumes, per (query, document) pair, a term-by-term cosine
similarity matrix and a per-position context-to-query cosine vector. Both
are truncated to fixed dimensions (keeping the first vector_len document
terms) and zero-padded beyond the real lengths.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .corpus import Document, Query
from .errors import ConfigError, DataError, OovQueryError
from .numerics import Tensor

CACHE_MAGIC = b"CPEM"
CACHE_VERSION = 1


class EmbeddingTable:
    """Immutable term -> vector map of a fixed dimension.

    Lookups of absent terms return None, which is distinct from a stored
    zero vector.
    """

    def __init__(self, dimension: int, vectors: dict[str, np.ndarray]):
        if dimension < 1:
            raise DataError(f"embedding dimension must be >= 1, got {dimension}")
        self.dimension = dimension
        self._vectors: dict[str, np.ndarray] = {}
        for term, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (dimension,):
                raise DataError(
                    f"vector for {term!r} has shape {arr.shape}, expected ({dimension},)"
                )
            arr.setflags(write=False)
            self._vectors[term] = arr

    def lookup(self, term: str) -> np.ndarray | None:
        return self._vectors.get(term)

    def __contains__(self, term: str) -> bool:
        return term in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def terms(self) -> list[str]:
        return list(self._vectors)

    def fingerprint(self) -> str:
        """Content hash over (dimension, sorted terms, float32 values)."""
        h = hashlib.sha256()
        h.update(str(self.dimension).encode())
        for term in sorted(self._vectors):
            h.update(term.encode("utf-8"))
            h.update(self._vectors[term].astype("<f4").tobytes())
        return h.hexdigest()

    @classmethod
    def load_text(cls, path: str) -> "EmbeddingTable":
        """Read the word2vec text format: a "count dim" header line, then
        one "term v1 .. vdim" line per term."""
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataError(f"{path}:1: expected 'count dim' header")
            try:
                count, dim = int(header[0]), int(header[1])
            except ValueError:
                raise DataError(f"{path}:1: non-integer header fields") from None
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split(" ")
                if len(fields) != dim + 1:
                    raise DataError(
                        f"{path}:{lineno}: expected {dim} components, got {len(fields) - 1}"
                    )
                try:
                    vectors[fields[0]] = np.array([float(v) for v in fields[1:]])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric component") from None
        if len(vectors) != count:
            raise DataError(
                f"{path}: header promised {count} terms, found {len(vectors)}"
            )
        return cls(dim, vectors)

    def save_cache(self, path: str) -> None:
        """Write the binary cache: magic ``CPEM``, u32 version, u32 dim,
        u32 term count, then per term a u16 utf-8 length, the term bytes,
        and dim little-endian float32 values; a trailing u32 CRC32 covers
        everything after the magic."""
        body = bytearray()
        body += struct.pack("<III", CACHE_VERSION, self.dimension, len(self._vectors))
        for term, vec in self._vectors.items():
            raw = term.encode("utf-8")
            body += struct.pack("<H", len(raw))
            body += raw
            body += vec.astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(bytes(body))))

    @classmethod
    def load_cache(cls, path: str) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CACHE_MAGIC:
            raise DataError(f"{path}: bad magic, not an embedding cache")
        body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise DataError(f"{path}: checksum mismatch")
        version, dim, count = struct.unpack_from("<III", body, 0)
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        offset = 12
        vectors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (tlen,) = struct.unpack_from("<H", body, offset)
            offset += 2
            term = body[offset : offset + tlen].decode("utf-8")
            offset += tlen
            vec = np.frombuffer(body, dtype="<f4", count=dim, offset=offset)
            offset += 4 * dim
            vectors[term] = vec.astype(np.float64)
        return cls(dim, vectors)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; defined as 0 when either vector is zero."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def term_sim(a: str, b: str, table: EmbeddingTable) -> float:
    """Identical terms match at 1.0 even when out of vocabulary; otherwise
    the embedding cosine, or 0.0 if either term is missing."""
    if a == b:
        return 1.0
    va = table.lookup(a)
    vb = table.lookup(b)
    if va is None or vb is None:
        return 0.0
    return cosine(va, vb)


def build_sim_matrix(
    query: Query, doc: Document, table: EmbeddingTable, l_q: int, l_d: int
) -> Tensor:
    """Term similarity grid of fixed shape (l_q, l_d): cell (i, j) compares
    query term i with document term j. Documents keep their first l_d
    terms; cells beyond the real query/document lengths stay 0."""
    if len(query.tokens) > l_q:
        raise ConfigError(
            f"query {query.query_id} has {len(query.tokens)} terms, limit l_q={l_q}"
        )
    sim = np.zeros((l_q, l_d))
    d_len = min(len(doc.tokens), l_d)
    for i, q_term in enumerate(query.tokens):
        for j in range(d_len):
            sim[i, j] = term_sim(q_term, doc.tokens[j], table)
    return Tensor(sim)


def query_vec(query: Query, table: EmbeddingTable) -> np.ndarray:
    """Mean embedding of the query's in-vocabulary terms; out-of-vocabulary
    terms are excluded from the mean. All terms missing is an error."""
    found = [table.lookup(t) for t in query.tokens]
    found = [v for v in found if v is not None]
    if not found:
        raise OovQueryError(
            f"query {query.query_id}: no term is in the embedding vocabulary"
        )
    return np.mean(found, axis=0)


def context_vec(
    doc: Document, i: int, w_c: int, table: EmbeddingTable
) -> np.ndarray:
    """Mean embedding of the in-vocabulary tokens in the window
    [i - w_c, i + w_c], clipped to the document; the divisor is the count
    of contributing tokens, so edge windows are not shrunk. A window with
    no known token yields the zero vector."""
    if not 0 <= i < len(doc.tokens):
        raise ValueError(f"position {i} outside document of {len(doc.tokens)} tokens")
    lo = max(0, i - w_c)
    hi = min(len(doc.tokens) - 1, i + w_c)
    vecs = [table.lookup(doc.tokens[j]) for j in range(lo, hi + 1)]
    vecs = [v for v in vecs if v is not None]
    if not vecs:
        return np.zeros(table.dimension)
    return np.mean(vecs, axis=0)


def build_querysim(
    query: Query, doc: Document, table: EmbeddingTable, w_c: int, l_d: int
) -> Tensor:
    """Per-position cosine between the document's windowed context vector
    and the query's mean vector, zero beyond min(len(doc), l_d)."""
    qv = query_vec(query, table)
    out = np.zeros(l_d)
    for j in range(min(len(doc.tokens), l_d)):
        out[j] = cosine(context_vec(doc, j, w_c, table), qv)
    return Tensor(out)


@dataclass
class SimInput:
    """Everything the scorer consumes for one (query, document) pair:
    the similarity matrix, the context-similarity vector, the real lengths,
    and the query's zero-padded normalized idf weights."""

    sim: Tensor
    querysim: Tensor
    q_len: int
    d_len: int
    idf_norm: Tensor

    def __post_init__(self):
        l_q, l_d = self.sim.shape
        if self.querysim.shape != (l_d,):
            raise ConfigError(
                f"querysim shape {self.querysim.shape} does not match l_d={l_d}"
            )
        if self.idf_norm.shape != (l_q,):
            raise ConfigError(
                f"idf_norm shape {self.idf_norm.shape} does not match l_q={l_q}"
            )


def padded_idf(query: Query, l_q: int) -> Tensor:
    """Query idf weights zero-padded to l_q entries."""
    if len(query.tokens) > l_q:
        raise ConfigError(
            f"query {query.query_id} has {len(query.tokens)} terms, limit l_q={l_q}"
        )
    out = np.zeros(l_q)
    out[: len(query.idf_norm)] = query.idf_norm
    return Tensor(out)


def build_sim_input(
    query: Query,
    doc: Document,
    table: EmbeddingTable,
    l_q: int,
    l_d: int,
    w_c: int,
) -> SimInput:
    """Assemble the full scorer input for one (query, document) pair."""
    return SimInput(
        sim=build_sim_matrix(query, doc, table, l_q, l_d),
        querysim=build_querysim(query, doc, table, w_c, l_d),
        q_len=len(query.tokens),
        d_len=min(len(doc.tokens), l_d),
        idf_norm=padded_idf(query, l_q),
    )
