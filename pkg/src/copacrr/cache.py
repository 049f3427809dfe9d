"""Content-addressed cache of scorer inputs.

Each (query, document) pair yields two independent entries stored as .npy
files (self-describing numpy headers):

* ``sim-<key>.npy``: the term similarity matrix; the key hashes the
  embedding-table fingerprint, l_q, l_d, and the token sequences.
* ``ctx-<key>.npy``: the context-similarity vector; the key additionally
  hashes the context half-window w_c (so changing w_c invalidates only
  these entries).

Keys are hex SHA-256 digests; identical content always maps to the same
file, which makes preparation idempotent.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .corpus import Document, Query
from .embedding import (
    EmbeddingTable,
    SimInput,
    build_querysim,
    build_sim_matrix,
    padded_idf,
)
from .numerics import Tensor


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class SimInputCache:
    """Compute-on-miss store for similarity inputs of one corpus setup."""

    def __init__(
        self,
        directory: str,
        table: EmbeddingTable,
        l_q: int,
        l_d: int,
        w_c: int,
    ):
        self.directory = directory
        self.table = table
        self.l_q = l_q
        self.l_d = l_d
        self.w_c = w_c
        self._fingerprint = table.fingerprint()
        self.stats = {"sim_hits": 0, "sim_misses": 0, "ctx_hits": 0, "ctx_misses": 0}
        os.makedirs(directory, exist_ok=True)

    def sim_key(self, query: Query, doc: Document) -> str:
        return _digest(
            "sim",
            self._fingerprint,
            str(self.l_q),
            str(self.l_d),
            " ".join(query.tokens),
            " ".join(doc.tokens),
        )

    def ctx_key(self, query: Query, doc: Document) -> str:
        return _digest(
            "ctx",
            self._fingerprint,
            str(self.l_d),
            str(self.w_c),
            " ".join(query.tokens),
            " ".join(doc.tokens),
        )

    def _path(self, kind: str, key: str) -> str:
        return os.path.join(self.directory, f"{kind}-{key}.npy")

    def _load_or_build(self, kind: str, key: str, build) -> np.ndarray:
        path = self._path(kind, key)
        if os.path.exists(path):
            self.stats[f"{kind}_hits"] += 1
            return np.load(path)
        self.stats[f"{kind}_misses"] += 1
        arr = build()
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            np.save(fh, arr)
        os.replace(tmp, path)
        return arr

    def get(self, query: Query, doc: Document) -> SimInput:
        sim = self._load_or_build(
            "sim",
            self.sim_key(query, doc),
            lambda: build_sim_matrix(query, doc, self.table, self.l_q, self.l_d).values,
        )
        ctx = self._load_or_build(
            "ctx",
            self.ctx_key(query, doc),
            lambda: build_querysim(query, doc, self.table, self.w_c, self.l_d).values,
        )
        return SimInput(
            sim=Tensor(sim),
            querysim=Tensor(ctx),
            q_len=len(query.tokens),
            d_len=min(len(doc.tokens), self.l_d),
            idf_norm=padded_idf(query, self.l_q),
        )
