"""
Exact k-nearest-neighbour retrieval over unit-norm global descriptors.

Scores are cosine similarities computed in float64 against a contiguous
descriptor matrix, scanned in row blocks. Order is (score desc, image_id
asc); for unit vectors that is the same order as ascending L2 distance,
since d^2 = 2 - 2 cos.

GUIX layout (little-endian):
  b"GUIX" | u32 version=1 | u32 N | u32 dim | N*dim f32 rows
  | u32 meta_len | meta_len bytes of JSON {"ids": [...], "geo_tags": [...]}
"""

from __future__ import annotations
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, FormatError, QueryError
from .log import get_logger
from .metrics import GeoTag

log = get_logger(__name__)

MAGIC = b"GUIX"
VERSION = 1
BLOCK_ROWS = 4096


# ================= data model =================
@dataclass(frozen=True)
class IndexEntry:
    image_id: str
    descriptor: np.ndarray
    geo_tag: Optional[GeoTag] = None


@dataclass(frozen=True)
class Candidate:
    entry: IndexEntry
    score: float

    @property
    def distance(self) -> float:
        return math.sqrt(max(0.0, 2.0 - 2.0 * self.score))


class CandidateSet:
    """Top-k results, scores non-increasing."""

    def __init__(self, items: Sequence[Candidate]):
        if not items:
            raise QueryError("candidate set must hold at least one entry")
        scores = [c.score for c in items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise DimensionError(f"candidate scores must be non-increasing, got {scores}")
        self.items: List[Candidate] = list(items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.items)

    def __getitem__(self, i: int) -> Candidate:
        return self.items[i]

    def ids(self) -> List[str]:
        return [c.entry.image_id for c in self.items]

    def scores(self) -> List[float]:
        return [c.score for c in self.items]


# ================= index =================
class RetrievalIndex:
    def __init__(self, ids: Sequence[str], matrix: np.ndarray, geo_tags: Sequence[Optional[GeoTag]]):
        self.ids = list(ids)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self.geo_tags = list(geo_tags)
        self._m64 = self.matrix.astype(np.float64)
        # rank of each id under ascending string order; the tie-break key
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._pos = {iid: i for i, iid in enumerate(self.ids)}

    # ---- construction ----
    @classmethod
    def build(cls, entries: Sequence[IndexEntry]) -> "RetrievalIndex":
        if not entries:
            raise DimensionError("cannot build an index from zero entries")
        dim = np.asarray(entries[0].descriptor).size
        seen = set()
        rows = np.empty((len(entries), dim), dtype=np.float32)
        for i, e in enumerate(entries):
            if e.image_id in seen:
                raise DimensionError(f"duplicate image id in index: {e.image_id}")
            seen.add(e.image_id)
            v = np.asarray(e.descriptor, dtype=np.float32).reshape(-1)
            if v.size != dim:
                raise DimensionError(f"{e.image_id}: descriptor dim {v.size} != {dim}")
            rows[i] = v
        return cls([e.image_id for e in entries], rows, [e.geo_tag for e in entries])

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def entry(self, image_id: str) -> IndexEntry:
        i = self._pos.get(image_id)
        if i is None:
            raise QueryError(f"unknown image id: {image_id}")
        return IndexEntry(image_id, self.matrix[i], self.geo_tags[i])

    def geo_tag(self, image_id: str) -> Optional[GeoTag]:
        return self.entry(image_id).geo_tag

    # ---- query ----
    def scores(self, v) -> np.ndarray:
        q = np.asarray(v, dtype=np.float64).reshape(-1)
        if q.size != self.dim:
            raise DimensionError(f"query dim {q.size} != index dim {self.dim}")
        out = np.empty(len(self.ids), dtype=np.float64)
        for s in range(0, len(self.ids), BLOCK_ROWS):
            out[s : s + BLOCK_ROWS] = self._m64[s : s + BLOCK_ROWS] @ q
        return out

    def knn_query(self, v, k: int) -> CandidateSet:
        n = len(self.ids)
        if k < 1 or k > n:
            raise QueryError(f"k={k} outside 1..{n} (index size)")
        sc = self.scores(v)
        if k < n:
            # every entry scoring at least the k-th best, ties included
            kth = np.partition(sc, n - k)[n - k]
            pool = np.flatnonzero(sc >= kth)
        else:
            pool = np.arange(n)
        order = pool[np.lexsort((self._id_rank[pool], -sc[pool]))][:k]
        return CandidateSet([
            Candidate(IndexEntry(self.ids[i], self.matrix[i], self.geo_tags[i]), float(sc[i]))
            for i in order
        ])

    # ---- persistence ----
    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = json.dumps({
            "ids": self.ids,
            "geo_tags": [g.to_dict() if g is not None else None for g in self.geo_tags],
        }, sort_keys=True).encode("utf-8")
        n, dim = self.matrix.shape
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<III", VERSION, n, dim))
            f.write(self.matrix.astype("<f4").tobytes(order="C"))
            f.write(struct.pack("<I", len(meta)) + meta)
        log.debug("saved %d x %d index to %s", n, dim, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RetrievalIndex":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except FileNotFoundError:
            raise FormatError(f"missing index file: {path}") from None
        if len(buf) < 16 or buf[:4] != MAGIC:
            raise FormatError(f"{path}: not a GUIX index (bad magic or header)")
        version, n, dim = struct.unpack_from("<III", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: GUIX version {version} unsupported (expected {VERSION})")
        off = 16 + 4 * n * dim
        if len(buf) < off + 4:
            raise FormatError(f"{path}: truncated descriptor block")
        rows = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=16).reshape(n, dim)
        (mlen,) = struct.unpack_from("<I", buf, off)
        if len(buf) != off + 4 + mlen:
            raise FormatError(f"{path}: metadata block is {len(buf) - off - 4} bytes, header says {mlen}")
        try:
            meta = json.loads(buf[off + 4 :].decode("utf-8"))
            ids = meta["ids"]
            tags = [GeoTag.from_dict(g) if g is not None else None for g in meta["geo_tags"]]
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"{path}: corrupt metadata: {e}") from None
        if len(ids) != n or len(tags) != n:
            raise FormatError(f"{path}: metadata lists {len(ids)} ids for {n} rows")
        return cls(ids, rows.astype(np.float32), tags)


def brute_force_knn(ids: Sequence[str], matrix: np.ndarray, v, k: int) -> List[str]:
    """Exhaustive reference ranking: full sort on (score desc, id asc)."""
    q = np.asarray(v, dtype=np.float64).reshape(-1)
    m = np.asarray(matrix, dtype=np.float64)
    scored = [(float(m[i] @ q), ids[i]) for i in range(len(ids))]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [iid for _, iid in scored[:k]]
