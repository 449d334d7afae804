"""Click-log data model: sessions, feature tables, splitting and filtering."""

from __future__ import annotations

import bisect
import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

FEATURE_DIM = 64

# left-closed, right-open; the last bucket is unbounded
BUCKET_EDGES = (1, 10, 30, 100, 500, 2000, 10000)
BUCKET_LABELS = ("1-10", "10-30", "30-100", "100-500", "500-2000", "2000-10000", ">=10000")


class ClickLogError(ValueError):
    """Malformed click log or feature table."""


class Impression(NamedTuple):
    doc: str
    clicked: bool


@dataclass(frozen=True)
class Session:
    session_id: str
    query: str
    impressions: tuple[Impression, ...]

    def __post_init__(self):
        if not self.impressions:
            raise ClickLogError(f"empty session {self.session_id!r}")
        docs = [imp.doc for imp in self.impressions]
        if len(set(docs)) != len(docs):
            raise ClickLogError(f"duplicate document in session {self.session_id!r}")

    def __len__(self) -> int:
        return len(self.impressions)

    @property
    def docs(self) -> list[str]:
        return [imp.doc for imp in self.impressions]

    @property
    def clicks(self) -> list[bool]:
        return [imp.clicked for imp in self.impressions]

    def to_record(self) -> dict:
        return {
            "sid": self.session_id,
            "query": self.query,
            "docs": [{"id": imp.doc, "click": int(imp.clicked)} for imp in self.impressions],
        }


class FeatureTable:
    """Immutable map from document id to a 64-dim feature vector."""

    def __init__(self, doc_ids: Iterable[str], matrix: np.ndarray):
        doc_ids = list(doc_ids)
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != FEATURE_DIM:
            raise ClickLogError(f"feature matrix must be (n, {FEATURE_DIM}), got {matrix.shape}")
        if matrix.shape[0] != len(doc_ids):
            raise ClickLogError("feature matrix rows do not match doc ids")
        if not np.all(np.isfinite(matrix)):
            raise ClickLogError("feature table contains non-finite values")
        if len(set(doc_ids)) != len(doc_ids):
            raise ClickLogError("duplicate doc id in feature table")
        matrix.setflags(write=False)
        self.doc_ids = doc_ids
        self.matrix = matrix
        self._index = {d: i for i, d in enumerate(doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc: str) -> bool:
        return doc in self._index

    def __getitem__(self, doc: str) -> np.ndarray:
        return self.matrix[self._index[doc]]

    def rows(self, docs: Iterable[str]) -> np.ndarray:
        docs = list(docs)
        missing = [d for d in docs if d not in self._index]
        if missing:
            raise ClickLogError(f"documents missing from feature table: {missing[:20]}")
        return self.matrix[[self._index[d] for d in docs]]


@dataclass
class Dataset:
    sessions: list[Session] = field(default_factory=list)
    features: FeatureTable | None = None

    def __post_init__(self):
        seen = set()
        for s in self.sessions:
            if s.session_id in seen:
                raise ClickLogError(f"duplicate session id {s.session_id!r}")
            seen.add(s.session_id)

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self) -> Iterator[Session]:
        return iter(self.sessions)

    def by_query(self) -> dict[str, list[Session]]:
        out: dict[str, list[Session]] = {}
        for s in self.sessions:
            out.setdefault(s.query, []).append(s)
        return out

    def queries(self) -> set[str]:
        return {s.query for s in self.sessions}

    def documents(self) -> set[str]:
        return {imp.doc for s in self.sessions for imp in s.impressions}

    def n_impressions(self) -> int:
        return sum(len(s) for s in self.sessions)


def _parse_record(rec: dict, lineno: int) -> Session:
    try:
        sid = str(rec["sid"])
        query = str(rec["query"])
        docs = rec["docs"]
    except (KeyError, TypeError) as exc:
        raise ClickLogError(f"line {lineno}: missing field {exc}") from None
    if not isinstance(docs, list):
        raise ClickLogError(f"line {lineno}: 'docs' must be a list")
    if not docs:
        raise ClickLogError(f"line {lineno}: empty session")
    imps = []
    for item in docs:
        click = item.get("click") if isinstance(item, dict) else None
        if click not in (0, 1) or isinstance(click, float):
            raise ClickLogError(f"line {lineno}: click must be 0 or 1")
        imps.append(Impression(str(item["id"]), bool(click)))
    try:
        return Session(sid, query, tuple(imps))
    except ClickLogError as exc:
        raise ClickLogError(f"line {lineno}: {exc}") from None


def load_sessions(path: str | Path) -> Dataset:
    sessions = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ClickLogError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            s = _parse_record(rec, lineno)
            if s.session_id in seen:
                raise ClickLogError(f"line {lineno}: duplicate session id {s.session_id!r}")
            seen.add(s.session_id)
            sessions.append(s)
    return Dataset(sessions)


def save_sessions(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset.sessions:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")


def load_features(path: str | Path) -> FeatureTable:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["doc_id"] + [f"f{i}" for i in range(1, FEATURE_DIM + 1)]
        if header != expected:
            raise ClickLogError(f"feature CSV header must be doc_id,f1,...,f{FEATURE_DIM}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, 2):
            if len(row) != FEATURE_DIM + 1:
                raise ClickLogError(f"line {lineno}: expected {FEATURE_DIM} feature columns")
            try:
                vec = [float(v) for v in row[1:]]
            except ValueError:
                raise ClickLogError(f"line {lineno}: non-numeric feature") from None
            if not all(math.isfinite(v) for v in vec):
                raise ClickLogError(f"line {lineno}: non-finite feature")
            ids.append(row[0])
            rows.append(vec)
    return FeatureTable(ids, np.array(rows).reshape(-1, FEATURE_DIM))


def save_features(table: FeatureTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["doc_id"] + [f"f{i}" for i in range(1, FEATURE_DIM + 1)])
        for doc, vec in zip(table.doc_ids, table.matrix):
            writer.writerow([doc] + [repr(float(v)) for v in vec])


def chronological_split(dataset: Dataset, train_fraction: float = 0.75) -> tuple[Dataset, Dataset]:
    """Split by file order: the first ``floor(fraction * n)`` sessions train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if not dataset.sessions:
        raise ValueError("cannot split an empty dataset")
    cut = math.floor(train_fraction * len(dataset.sessions))
    return (
        Dataset(dataset.sessions[:cut], dataset.features),
        Dataset(dataset.sessions[cut:], dataset.features),
    )


def filter_test(test: Dataset, train: Dataset) -> Dataset:
    """Drop test queries and documents never seen in training.

    Sessions emptied by document removal are dropped; ranks of the survivors
    are re-compacted by position.
    """
    queries = train.queries()
    docs = train.documents()
    kept = []
    for s in test.sessions:
        if s.query not in queries:
            continue
        imps = tuple(imp for imp in s.impressions if imp.doc in docs)
        if not imps:
            continue
        kept.append(s if len(imps) == len(s.impressions) else Session(s.session_id, s.query, imps))
    return Dataset(kept, test.features)


def bucket_label(count: int) -> str:
    if count < 1:
        raise ValueError("query frequency must be >= 1")
    return BUCKET_LABELS[bisect.bisect_right(BUCKET_EDGES, count) - 1]


@dataclass(frozen=True)
class QueryFrequencyIndex:
    counts: dict[str, int]

    @classmethod
    def from_dataset(cls, train: Dataset) -> "QueryFrequencyIndex":
        return cls(dict(Counter(s.query for s in train.sessions)))

    def __len__(self) -> int:
        return len(self.counts)

    def bucket(self, query: str) -> str | None:
        """Bucket label for a training query; None for unseen queries."""
        count = self.counts.get(query)
        return None if count is None else bucket_label(count)


def query_frequency_index(train: Dataset) -> QueryFrequencyIndex:
    return QueryFrequencyIndex.from_dataset(train)
