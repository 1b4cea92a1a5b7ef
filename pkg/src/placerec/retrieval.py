"""Descriptor database, exact nearest-neighbour search and Recall@N evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CorruptFile,
    EmptyDatabase,
    EmptyQueries,
    SingleTraversal,
    UnknownTraversal,
)

SUCCESS_RADIUS = 25.0
DEFAULT_NS = (1, 2, 3, 4, 5, 10, 15, 20, 25)


@dataclass(frozen=True, eq=False)
class DescriptorDB:
    ids: tuple[str, ...]
    descriptors: np.ndarray
    locations: np.ndarray
    traversals: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        loc = np.asarray(self.locations, dtype=np.float64).reshape(-1, 2)
        trav = tuple(str(t) for t in self.traversals)
        if desc.ndim != 2 and len(ids) == 0:
            desc = desc.reshape(0, 0)
        if not (len(ids) == len(desc) == len(loc) == len(trav)):
            raise ValueError("record fields have different lengths")
        if len(set(ids)) != len(ids):
            raise ValueError("cloud ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "traversals", trav)

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "DescriptorDB":
        records = list(records)
        return cls(
            tuple(r["id"] for r in records),
            np.array([r["descriptor"] for r in records], dtype=np.float64),
            np.array([(r["easting"], r["northing"]) for r in records], dtype=np.float64).reshape(-1, 2),
            tuple(r["traversal"] for r in records),
        )

    def __len__(self):
        return len(self.ids)

    def subset(self, mask_or_idx) -> "DescriptorDB":
        idx = np.arange(len(self))[mask_or_idx]
        return DescriptorDB(tuple(self.ids[i] for i in idx), self.descriptors[idx],
                            self.locations[idx], tuple(self.traversals[i] for i in idx))

    def traversal_ids(self) -> list[str]:
        return sorted(set(self.traversals))

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "id": self.ids[i], "traversal": self.traversals[i],
                    "easting": float(self.locations[i, 0]), "northing": float(self.locations[i, 1]),
                    "descriptor": self.descriptors[i].tolist(),
                }) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "DescriptorDB":
        try:
            with open(path) as fh:
                records = [json.loads(line) for line in fh if line.strip()]
            return cls.from_records(records)
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptFile(f"{path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class EvalSplit:
    queries: DescriptorDB
    database: DescriptorDB

    def __post_init__(self):
        shared = set(self.queries.traversals) & set(self.database.traversals)
        if shared:
            raise ValueError(f"database shares traversals with the queries: {sorted(shared)}")


def _ranking(query: np.ndarray, db: DescriptorDB) -> tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(((db.descriptors - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    return d, np.asarray(db.ids, dtype=object)


def knn(query: np.ndarray, db: DescriptorDB, n: int) -> list[tuple[str, float]]:
    """Exact Euclidean neighbours, ascending; equal distances ordered by cloud id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(db) == 0:
        raise EmptyDatabase("database is empty")
    d, ids = _ranking(query, db)
    n = min(n, len(db))
    if n < len(db):
        cut = np.partition(d, n - 1)[n - 1]
        cand = np.flatnonzero(d <= cut)
    else:
        cand = np.arange(len(db))
    order = sorted(cand, key=lambda i: (d[i], ids[i]))[:n]
    return [(ids[i], float(d[i])) for i in order]


def first_hit_ranks(split: EvalSplit, success_radius: float = SUCCESS_RADIUS) -> np.ndarray:
    """1-based rank of the first database record within the radius, per query (inf if none)."""
    q, db = split.queries, split.database
    if len(q) == 0:
        raise EmptyQueries("no queries")
    if len(db) == 0:
        raise EmptyDatabase("database is empty")
    ids = np.asarray(db.ids)
    id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    out = np.full(len(q), np.inf)
    for r in range(len(q)):
        d = np.sqrt(((db.descriptors - q.descriptors[r]) ** 2).sum(axis=1))
        order = np.lexsort((id_rank, d))
        geo = np.sqrt(((db.locations[order] - q.locations[r]) ** 2).sum(axis=1))
        hits = np.flatnonzero(geo <= success_radius)
        if len(hits):
            out[r] = hits[0] + 1
    return out


def recall_at_n(split: EvalSplit, n: int, success_radius: float = SUCCESS_RADIUS) -> float:
    """Percentage of queries with a true match among their top-``n`` retrievals."""
    ranks = first_hit_ranks(split, success_radius)
    return 100.0 * float(np.mean(ranks <= n))


def one_percent_n(db_size: int) -> int:
    """1% of the database size, rounded half up in integer arithmetic, at least 1."""
    return max(1, (int(db_size) + 50) // 100)


def average_recall_at_1pct(split: EvalSplit, success_radius: float = SUCCESS_RADIUS) -> float:
    return recall_at_n(split, one_percent_n(len(split.database)), success_radius)


def build_eval_split(db: DescriptorDB, query_traversal: str) -> EvalSplit:
    """Queries from one traversal against every record of the other traversals."""
    travs = db.traversal_ids()
    if str(query_traversal) not in travs:
        raise UnknownTraversal(f"traversal {query_traversal!r} not in database")
    if len(travs) < 2:
        raise SingleTraversal("evaluation needs at least two traversals")
    is_q = np.array([t == str(query_traversal) for t in db.traversals])
    return EvalSplit(db.subset(is_q), db.subset(~is_q))


def rotating_splits(db: DescriptorDB) -> list[tuple[str, EvalSplit]]:
    return [(t, build_eval_split(db, t)) for t in db.traversal_ids()]


def evaluate(db: DescriptorDB, ns: Sequence[int] = DEFAULT_NS,
             success_radius: float = SUCCESS_RADIUS) -> dict:
    """Rotate the query traversal over all traversals; pool queries, also report per traversal."""
    ns = sorted(set(int(n) for n in ns) | {1})
    hits = {n: 0 for n in ns}
    hits_1pct = 0
    n_queries = 0
    db_sizes = []
    per_trav = {}
    for trav, split in rotating_splits(db):
        ranks = first_hit_ranks(split, success_radius)
        n1 = one_percent_n(len(split.database))
        for n in ns:
            hits[n] += int(np.sum(ranks <= n))
        hits_1pct += int(np.sum(ranks <= n1))
        n_queries += len(ranks)
        db_sizes.append(len(split.database))
        per_trav[trav] = {
            "ar_at_1": 100.0 * float(np.mean(ranks <= 1)),
            "ar_at_1pct": 100.0 * float(np.mean(ranks <= n1)),
            "n_queries": len(ranks),
            "n_db": len(split.database),
        }
    return {
        "recall_at": {str(n): 100.0 * hits[n] / n_queries for n in ns},
        "ar_at_1pct": 100.0 * hits_1pct / n_queries,
        "n_queries": n_queries,
        "n_db": int(round(float(np.mean(db_sizes)))) if len(set(db_sizes)) == 1 else db_sizes,
        "per_traversal": per_trav,
    }
