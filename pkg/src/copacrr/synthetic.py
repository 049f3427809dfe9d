"""Synthetic corpora with planted relevance structure.

Two generators:

* an n-gram corpus where highly relevant documents contain the query terms
  as adjacent bigrams, mid-grade documents contain the same terms scattered,
  and non-relevant documents are pure noise; and
* an ambiguity corpus built around polysemous terms whose term-level match
  pattern is identical across grades, while the surrounding context windows
  either cancel (real sense) or pile up (false sense), so only the
  context-similarity input separates the grades.

Run as a module to write a corpus to disk in the formats the CLI reads:
``python -m copacrr.synthetic --kind ngram --out DIR``.
"""

from __future__ import annotations

import argparse
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    build_queries,
    CollectionStats,
    Document,
    Query,
    tokenize,
)
from .embedding import EmbeddingTable


@dataclass
class SyntheticCorpus:
    query_texts: dict[str, str]
    doc_texts: dict[str, str]
    qrels: dict[tuple[str, str], int]
    table: EmbeddingTable
    groups: dict[str, str] = field(default_factory=dict)

    def documents(self) -> dict[str, Document]:
        return {did: Document(did, tokenize(text)) for did, text in self.doc_texts.items()}

    def queries(self) -> dict[str, Query]:
        stats = CollectionStats(self.documents())
        return build_queries(self.query_texts, stats)

    def query_ids_in_group(self, group: str) -> list[str]:
        return [qid for qid, g in self.groups.items() if g == group]

    def write(self, out_dir: str) -> None:
        """Write queries.tsv, docs.tsv, qrels.txt, groups.tsv, embeddings.txt."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "queries.tsv"), "w", encoding="utf-8") as fh:
            for qid, text in self.query_texts.items():
                fh.write(f"{qid}\t{text}\n")
        with open(os.path.join(out_dir, "docs.tsv"), "w", encoding="utf-8") as fh:
            for did, text in self.doc_texts.items():
                fh.write(f"{did}\t{text}\n")
        with open(os.path.join(out_dir, "qrels.txt"), "w", encoding="utf-8") as fh:
            for (qid, did), grade in self.qrels.items():
                fh.write(f"{qid} 0 {did} {grade}\n")
        with open(os.path.join(out_dir, "groups.tsv"), "w", encoding="utf-8") as fh:
            for qid, group in self.groups.items():
                fh.write(f"{qid}\t{group}\n")
        write_embeddings_text(
            self.table, os.path.join(out_dir, "embeddings.txt")
        )


def write_embeddings_text(table: EmbeddingTable, path: str) -> None:
    """Word2vec text format: 'count dim' header, then one term per line."""
    terms = table.terms()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(terms)} {table.dimension}\n")
        for term in terms:
            vec = table.lookup(term)
            fh.write(term + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def make_ngram_corpus(
    n_queries: int = 50,
    docs_per_query: int = 20,
    dim: int = 50,
    doc_len: int = 64,
    n_groups: int = 5,
    seed: int = 0,
) -> SyntheticCorpus:
    """Corpus whose grade ladder is: adjacent query bigrams (grade 2),
    the same query terms scattered and never adjacent (grade 1), pure
    noise (grade 0). Both graded classes contain each query term exactly
    three times, so unigram counts cannot separate grade 2 from grade 1;
    only window-level matching can.
    """
    rng = np.random.default_rng(seed)
    noise_vocab = [f"n{i}" for i in range(200)]
    vectors = {term: _unit(rng, dim) for term in noise_vocab}

    n_hrel = docs_per_query * 3 // 10
    n_rel = docs_per_query * 3 // 10
    n_nrel = docs_per_query - n_hrel - n_rel
    block = 8
    n_blocks = doc_len // block
    if n_blocks < 3:
        raise ValueError(f"doc_len {doc_len} too short for 3 signal blocks")

    query_texts: dict[str, str] = {}
    doc_texts: dict[str, str] = {}
    qrels: dict[tuple[str, str], int] = {}
    groups: dict[str, str] = {}

    def noise_doc() -> list[str]:
        return [noise_vocab[int(rng.integers(len(noise_vocab)))] for _ in range(doc_len)]

    for qi in range(n_queries):
        qa, qb = f"qa{qi}", f"qb{qi}"
        vectors[qa] = _unit(rng, dim)
        vectors[qb] = _unit(rng, dim)
        qid = f"q{qi}"
        query_texts[qid] = f"{qa} {qb}"
        groups[qid] = f"g{qi % n_groups}"

        serial = 0
        for _ in range(n_hrel):
            tokens = noise_doc()
            for b in rng.choice(n_blocks, size=3, replace=False):
                start = int(b) * block
                tokens[start] = qa
                tokens[start + 1] = qb
            did = f"d{qi}x{serial}"
            serial += 1
            doc_texts[did] = " ".join(tokens)
            qrels[(qid, did)] = 2
        for _ in range(n_rel):
            tokens = noise_doc()
            # same term counts as a grade-2 doc, but qa and qb sit half a
            # block apart so no window of length <= block//2 sees both
            for b in rng.choice(n_blocks, size=3, replace=False):
                tokens[int(b) * block] = qa
                tokens[int(b) * block + block // 2] = qb
            did = f"d{qi}x{serial}"
            serial += 1
            doc_texts[did] = " ".join(tokens)
            qrels[(qid, did)] = 1
        for _ in range(n_nrel):
            did = f"d{qi}x{serial}"
            serial += 1
            doc_texts[did] = " ".join(noise_doc())
            qrels[(qid, did)] = 0

    return SyntheticCorpus(
        query_texts, doc_texts, qrels, EmbeddingTable(dim, vectors), groups
    )


def make_ambiguity_corpus(
    n_train_queries: int = 12,
    n_heldout_queries: int = 4,
    docs_per_class: int = 5,
    dim: int = 50,
    doc_len: int = 48,
    w_c: int = 4,
    seed: int = 0,
) -> SyntheticCorpus:
    """Corpus where term-level matches are uninformative by construction.

    Every document contains the query's (polysemous) term at the same three
    positions. In grade-2 documents the context slots around an occurrence
    hold paired +w / -w vectors that cancel, leaving the window mean aligned
    with the query; in grade-0 documents all eight slots share one +w vector
    orthogonal to the query term, which dominates the window mean and drags
    the context-query cosine down. Only the context-similarity channel
    separates the grades.
    """
    rng = np.random.default_rng(seed)
    noise_vocab = [f"n{i}" for i in range(200)]
    vectors: dict[str, np.ndarray] = {
        term: _unit(rng, dim) for term in noise_vocab
    }

    occurrences = [8, 24, 40]
    if doc_len < occurrences[-1] + w_c + 1:
        raise ValueError(f"doc_len {doc_len} too short for occurrence slots")
    query_texts: dict[str, str] = {}
    doc_texts: dict[str, str] = {}
    qrels: dict[tuple[str, str], int] = {}
    groups: dict[str, str] = {}

    def orthogonal_unit(base: np.ndarray) -> np.ndarray:
        w = rng.normal(size=dim)
        w -= base * np.dot(w, base)
        return w / np.linalg.norm(w)

    n_total = n_train_queries + n_heldout_queries
    serial = 0
    for qi in range(n_total):
        term = f"t{qi}"
        base = _unit(rng, dim)
        vectors[term] = base
        qid = f"q{qi}"
        query_texts[qid] = term
        groups[qid] = "train" if qi < n_train_queries else "heldout"

        for grade in (2, 0):
            for _ in range(docs_per_class):
                tokens = [
                    noise_vocab[int(rng.integers(len(noise_vocab)))]
                    for _ in range(doc_len)
                ]
                for occ, pos in enumerate(occurrences):
                    tokens[pos] = term
                    w = orthogonal_unit(base)
                    slots = [pos + d for d in range(-w_c, w_c + 1) if d != 0]
                    for s, slot in enumerate(slots):
                        name = f"x{serial}o{occ}s{s}"
                        if grade == 2:
                            # paired signs cancel across the window
                            vectors[name] = w if s % 2 == 0 else -w
                        else:
                            vectors[name] = w
                        tokens[slot] = name
                did = f"d{serial}"
                serial += 1
                doc_texts[did] = " ".join(tokens)
                qrels[(qid, did)] = grade

    return SyntheticCorpus(
        query_texts, doc_texts, qrels, EmbeddingTable(dim, vectors), groups
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate a synthetic corpus in the formats the CLI reads."
    )
    parser.add_argument("--kind", choices=["ngram", "ambiguity"], default="ngram")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--queries", type=int, default=None, help="query count")
    args = parser.parse_args(argv)
    if args.kind == "ngram":
        corpus = make_ngram_corpus(
            n_queries=args.queries or 50, seed=args.seed
        )
    else:
        total = args.queries or 16
        corpus = make_ambiguity_corpus(
            n_train_queries=max(1, total * 3 // 4),
            n_heldout_queries=max(1, total - max(1, total * 3 // 4)),
            seed=args.seed,
        )
    corpus.write(args.out)
    print(
        f"wrote {len(corpus.query_texts)} queries, {len(corpus.doc_texts)} docs, "
        f"{len(corpus.qrels)} judgments to {args.out}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
