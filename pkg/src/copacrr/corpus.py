"""TREC-style corpus ingestion: queries, documents, qrels, and run files.

Documents come either as a directory of ``<doc_id>.txt`` files or a single
TSV of ``doc_id <TAB> text``; queries as TSV ``query_id <TAB> text``. Qrels
use the four-column whitespace format ``qid 0 docid grade``; runs the
six-column ``qid Q0 docid rank score tag`` format.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field

from .errors import DataError

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Raw relevance grades used by the Web Track judgments.
GRADE_NAMES = {-2: "Junk", 0: "NRel", 1: "Rel", 2: "HRel", 3: "Key", 4: "Nav"}

# Merged grades carried through training and evaluation.
MERGED_NREL = 0
MERGED_REL = 1
MERGED_HREL = 2
MERGED_NAMES = {MERGED_NREL: "NRel", MERGED_REL: "Rel", MERGED_HREL: "HRel"}


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


def compute_idf(df: int, n_docs: int) -> float:
    """Smoothed inverse document frequency, clamped below at 0.

    idf = max(0, ln((n_docs - df + 0.5) / (df + 0.5)))
    """
    if n_docs < 1:
        raise ValueError(f"n_docs must be >= 1, got {n_docs}")
    if not 0 <= df <= n_docs:
        raise ValueError(f"df {df} outside [0, {n_docs}]")
    return max(0.0, math.log((n_docs - df + 0.5) / (df + 0.5)))


def normalize_idf(idfs: list[float]) -> list[float]:
    """Softmax over a query's term idfs: positive weights summing to 1."""
    if not idfs:
        raise ValueError("normalize_idf needs at least one value")
    peak = max(idfs)
    exps = [math.exp(v - peak) for v in idfs]
    total = sum(exps)
    return [v / total for v in exps]


def merge_labels(grade: int) -> int | None:
    """Collapse the six raw levels onto {NRel, Rel, HRel}; Nav is excluded.

    Junk and NRel map to NRel; HRel and Key map to HRel; Nav returns None.
    """
    if grade not in GRADE_NAMES:
        raise DataError(f"unknown relevance grade code {grade}")
    name = GRADE_NAMES[grade]
    if name == "Nav":
        return None
    if name in ("Junk", "NRel"):
        return MERGED_NREL
    if name == "Rel":
        return MERGED_REL
    return MERGED_HREL  # HRel, Key


@dataclass
class Document:
    """A document as an ordered list of lowercase terms."""

    doc_id: str
    tokens: list[str]

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("document with empty doc_id")
        if not self.tokens:
            log.warning("document %s has no tokens", self.doc_id)


@dataclass
class Query:
    """A query's terms plus their normalized idf weights."""

    query_id: str
    tokens: list[str]
    idf_norm: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"query {self.query_id} has no tokens")
        if self.idf_norm and len(self.idf_norm) != len(self.tokens):
            raise DataError(
                f"query {self.query_id}: {len(self.idf_norm)} idf weights for "
                f"{len(self.tokens)} tokens"
            )


@dataclass
class RunEntry:
    doc_id: str
    score: float
    rank: int


@dataclass
class RankedList:
    """Per-query ordered candidates; scores are non-increasing with rank."""

    query_id: str
    entries: list[RunEntry]

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


class Judgments:
    """Graded relevance judgments keyed by (query_id, doc_id).

    Holds the raw grades and exposes a merged view in which Nav entries are
    excluded and the remaining levels are collapsed onto {NRel, Rel, HRel}.
    """

    def __init__(self, grades: dict[tuple[str, str], int] | None = None):
        self._raw: dict[tuple[str, str], int] = {}
        self._merged: dict[tuple[str, str], int] = {}
        if grades:
            for (qid, did), grade in grades.items():
                self.add(qid, did, grade)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        merged = merge_labels(grade)  # also validates the code
        self._raw[(query_id, doc_id)] = grade
        if merged is None:
            self._merged.pop((query_id, doc_id), None)
        else:
            self._merged[(query_id, doc_id)] = merged

    def raw_grade(self, query_id: str, doc_id: str) -> int | None:
        return self._raw.get((query_id, doc_id))

    def merged_grade(self, query_id: str, doc_id: str) -> int | None:
        """Merged grade, or None when unjudged or excluded (Nav)."""
        return self._merged.get((query_id, doc_id))

    def merged_by_query(self, query_id: str) -> dict[str, int]:
        return {
            did: g for (qid, did), g in self._merged.items() if qid == query_id
        }

    def query_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for qid, _ in self._raw:
            seen.setdefault(qid)
        return list(seen)

    def judged_docs(self, query_id: str) -> list[str]:
        """All judged doc ids for a query, Nav entries included, sorted."""
        return sorted(did for (qid, did) in self._raw if qid == query_id)

    def __len__(self) -> int:
        return len(self._raw)


def read_qrels(path: str) -> Judgments:
    """Parse a four-column qrels file: ``qid 0 docid grade``."""
    judgments = Judgments()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 qrels fields, got {len(fields)}"
                )
            qid, _, did, grade_s = fields
            try:
                grade = int(grade_s)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: grade {grade_s!r} is not an integer"
                ) from None
            try:
                judgments.add(qid, did, grade)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return judgments


def read_run(path: str) -> list[RankedList]:
    """Parse a six-column run file, one RankedList per query in file order.

    Entries whose rank/score order disagree are re-sorted by descending
    score (stable) with a warning.
    """
    per_query: dict[str, list[RunEntry]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 6:
                raise DataError(
                    f"{path}:{lineno}: expected 6 run fields, got {len(fields)}"
                )
            qid, _, did, rank_s, score_s, _tag = fields
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: bad rank/score {rank_s!r} {score_s!r}"
                ) from None
            per_query.setdefault(qid, []).append(RunEntry(did, score, rank))
    lists = []
    for qid, entries in per_query.items():
        seen = set()
        for e in entries:
            if e.doc_id in seen:
                raise DataError(f"{path}: duplicate doc {e.doc_id} for query {qid}")
            seen.add(e.doc_id)
        entries.sort(key=lambda e: e.rank)
        scores = [e.score for e in entries]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            log.warning(
                "run %s query %s: scores increase with rank, re-sorting by score",
                path,
                qid,
            )
            entries.sort(key=lambda e: -e.score)
        for i, e in enumerate(entries, start=1):
            e.rank = i
        lists.append(RankedList(qid, entries))
    return lists


def write_run(lists: list[RankedList], path: str, tag: str) -> None:
    """Write ranked lists in the six-column run format, ranks 1..n and
    scores at 6 decimal places."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in lists:
            for i, entry in enumerate(ranked.entries, start=1):
                fh.write(
                    f"{ranked.query_id} Q0 {entry.doc_id} {i} {entry.score:.6f} {tag}\n"
                )


def load_documents(path: str) -> dict[str, Document]:
    """Load documents from a directory of ``<doc_id>.txt`` files or a TSV."""
    docs: dict[str, Document] = {}
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            if not name.endswith(".txt"):
                continue
            doc_id = name[: -len(".txt")]
            with open(os.path.join(path, name), encoding="utf-8") as fh:
                docs[doc_id] = Document(doc_id, tokenize(fh.read()))
    elif os.path.isfile(path):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if "\t" not in line:
                    raise DataError(f"{path}:{lineno}: expected 'doc_id<TAB>text'")
                doc_id, text = line.split("\t", 1)
                docs[doc_id] = Document(doc_id, tokenize(text))
    else:
        raise DataError(f"document source {path} does not exist")
    if not docs:
        raise DataError(f"no documents found at {path}")
    return docs


def load_query_texts(path: str) -> dict[str, str]:
    """Load raw query texts from a TSV of ``query_id <TAB> text``."""
    texts: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'query_id<TAB>text'")
            qid, text = line.split("\t", 1)
            texts[qid] = text
    if not texts:
        raise DataError(f"no queries found at {path}")
    return texts


class CollectionStats:
    """Document frequencies over a collection, for idf weighting."""

    def __init__(self, documents: dict[str, Document]):
        self.n_docs = len(documents)
        self.df: dict[str, int] = {}
        for doc in documents.values():
            for term in set(doc.tokens):
                self.df[term] = self.df.get(term, 0) + 1

    def idf(self, term: str) -> float:
        return compute_idf(self.df.get(term, 0), self.n_docs)


def build_queries(
    texts: dict[str, str], stats: CollectionStats
) -> dict[str, Query]:
    """Tokenize query texts and attach normalized idf weights."""
    queries: dict[str, Query] = {}
    for qid, text in texts.items():
        tokens = tokenize(text)
        if not tokens:
            raise DataError(f"query {qid} tokenizes to nothing: {text!r}")
        weights = normalize_idf([stats.idf(t) for t in tokens])
        queries[qid] = Query(qid, tokens, weights)
    return queries
