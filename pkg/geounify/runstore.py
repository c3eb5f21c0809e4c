"""
Per-run SQLite store (run.db).

The pipeline is the single writer (WAL, synchronous=NORMAL, batched
commits); `eval` and reporting open the file read-only through a mode=ro
URI with query_only set, so a reader never takes the writer lock.
"""

from __future__ import annotations
import json
import math
import os
import sqlite3
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import DatasetError, LockError
from .log import get_logger

log = get_logger(__name__)

SCHEMA_PATH = Path(__file__).with_name("schema.sql")
DB_NAME = "run.db"
BATCH_ROWS = 800
PathLike = Union[str, os.PathLike]


# ================= connections =================
def connect_db(db_path: PathLike) -> sqlite3.Connection:
    con = sqlite3.connect(str(db_path), timeout=60.0, isolation_level=None)
    for pragma in ("journal_mode=WAL", "synchronous=NORMAL", "temp_store=MEMORY", "busy_timeout=60000"):
        con.execute(f"PRAGMA {pragma};")
    return con


def connect_db_ro(db_path: PathLike) -> sqlite3.Connection:
    p = Path(db_path)
    if not p.exists():
        raise DatasetError(f"no run database at {p}")
    uri = "file:" + urllib.parse.quote(str(p.resolve()), safe="/:\\") + "?mode=ro&cache=shared"
    con = sqlite3.connect(uri, uri=True, timeout=30, isolation_level=None)
    con.execute("PRAGMA query_only=ON;")
    con.execute("PRAGMA busy_timeout=8000;")
    return con


def ensure_schema(con: sqlite3.Connection) -> None:
    with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
        con.executescript(f.read())


def acquire_lock(lock_path: Path) -> None:
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
    except FileExistsError:
        raise LockError(f"another run appears to be writing here (lock: {lock_path})") from None


def release_lock(lock_path: Path) -> None:
    try:
        lock_path.unlink(missing_ok=True)
    except OSError:
        pass


# ================= rows =================
@dataclass
class ResultRow:
    query_id: str
    split: str
    gt_tile: str
    gt_pixel: Tuple[int, int]
    positives: List[str]
    semi_positives: List[str]
    retrieval_top1: str
    pred_tile: str
    pred_pixel: Tuple[int, int]
    covered: bool
    error_m: float                      # inf when not covered
    gt_tile_pixel: Optional[Tuple[int, int]] = None
    gt_tile_error_m: Optional[float] = None

    def as_db(self) -> tuple:
        gx, gy = self.gt_tile_pixel if self.gt_tile_pixel is not None else (None, None)
        return (self.query_id, self.split, self.gt_tile, int(self.gt_pixel[0]), int(self.gt_pixel[1]),
                json.dumps(self.positives), json.dumps(self.semi_positives), self.retrieval_top1,
                self.pred_tile, int(self.pred_pixel[0]), int(self.pred_pixel[1]), int(self.covered),
                self.error_m if math.isfinite(self.error_m) else None, gx, gy, self.gt_tile_error_m)


@dataclass
class QueryRecord:
    result: ResultRow
    ranking: List[Tuple[str, float]]
    trace: List[Dict[str, object]]


class RunWriter:
    """Single writer for run.db; rows are flushed every BATCH_ROWS queries."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.lock_path = self.out_dir / "run.lock"
        self.db_path = self.out_dir / DB_NAME
        self._pending: List[QueryRecord] = []
        self.written = 0
        self.con: Optional[sqlite3.Connection] = None

    def __enter__(self) -> "RunWriter":
        acquire_lock(self.lock_path)
        try:
            for suffix in ("", "-wal", "-shm"):
                Path(str(self.db_path) + suffix).unlink(missing_ok=True)
            self.con = connect_db(self.db_path)
            ensure_schema(self.con)
        except Exception:
            release_lock(self.lock_path)
            raise
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            if exc_type is None:
                self.flush()
            if self.con is not None:
                self.con.execute("PRAGMA wal_checkpoint(TRUNCATE);")
                self.con.close()
            log.debug("closed %s after %d rows", self.db_path, self.written)
        finally:
            release_lock(self.lock_path)

    def write_meta(self, meta: Dict[str, object]) -> None:
        self.con.execute("BEGIN")
        self.con.executemany("INSERT OR REPLACE INTO meta(key, value) VALUES (?, ?)",
                             [(k, json.dumps(v, sort_keys=True)) for k, v in sorted(meta.items())])
        self.con.execute("COMMIT")

    def add(self, rec: QueryRecord) -> None:
        self._pending.append(rec)
        if len(self._pending) >= BATCH_ROWS:
            self.flush()

    def flush(self) -> None:
        if not self._pending:
            return
        con = self.con
        con.execute("BEGIN")
        con.executemany("INSERT INTO results VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
                        [r.result.as_db() for r in self._pending])
        con.executemany("INSERT INTO rankings VALUES (?,?,?,?)",
                        [(r.result.query_id, i, iid, float(s))
                         for r in self._pending for i, (iid, s) in enumerate(r.ranking)])
        con.executemany("INSERT INTO candidates VALUES (?,?,?,?,?,?)",
                        [(r.result.query_id, i, t["candidate_id"], float(t["s_t"]), float(t["max_m0"]),
                          float(t["combined"]))
                         for r in self._pending for i, t in enumerate(r.trace)])
        con.execute("COMMIT")
        self.written += len(self._pending)
        self._pending.clear()


# ================= readers =================
def read_meta(con: sqlite3.Connection) -> Dict[str, object]:
    return {k: json.loads(v) for k, v in con.execute("SELECT key, value FROM meta ORDER BY key")}


def read_results(con: sqlite3.Connection, split: Optional[str] = None) -> List[ResultRow]:
    sql = "SELECT * FROM results"
    args: Sequence = ()
    if split:
        sql += " WHERE split=?"
        args = (split,)
    rows = []
    for r in con.execute(sql + " ORDER BY query_id", args):
        (qid, sp, gt_tile, gx, gy, pos, semi, top1, pred_tile, px, py, covered, err,
         tx, ty, terr) = r
        rows.append(ResultRow(
            query_id=qid, split=sp, gt_tile=gt_tile, gt_pixel=(gx, gy),
            positives=json.loads(pos), semi_positives=json.loads(semi), retrieval_top1=top1,
            pred_tile=pred_tile, pred_pixel=(px, py), covered=bool(covered),
            error_m=float(err) if err is not None else math.inf,
            gt_tile_pixel=(tx, ty) if tx is not None else None, gt_tile_error_m=terr))
    return rows


def read_rankings(con: sqlite3.Connection) -> Dict[str, List[Tuple[str, float]]]:
    out: Dict[str, List[Tuple[str, float]]] = {}
    for qid, _, iid, s in con.execute("SELECT query_id, rank, image_id, score FROM rankings "
                                      "ORDER BY query_id, rank"):
        out.setdefault(qid, []).append((iid, s))
    return out

