"""
Dataset manifests.

manifest.json (sorted keys, every file path relative to the manifest or
absolute, every file carrying its SHA-256):

  {"version": 1, "kind": "images" | "features", "tile_size_px": L,
   "tiles":   [{"id", "geo_tag", "decoy", "image" | "features": {role: path},
                "sha256": {role: hex}}],
   "queries": [{"id", "split", "image" | "features": {role: path},
                "gt": {"tile_id", "pixel": [x, y]}, "positives", "semi_positives",
                "sha256": {role: hex}}]}

Feature roles: tiles carry F0, level1..level{n-1} and G; queries carry F0
and G. An images manifest stores one "image" role per record.
"""

from __future__ import annotations
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import PipelineConfig
from .errors import DatasetError, FormatError
from .log import get_logger
from .metrics import GeoTag, GroundTruthLabel
from .tensor import no_grad
from .tensorio import read_tensor, sha256_file, write_tensor

log = get_logger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
KINDS = ("images", "features")
PathLike = Union[str, Path]


# ================= data model =================
@dataclass
class TileRecord:
    id: str
    geo_tag: GeoTag
    files: Dict[str, Path]
    sha256: Dict[str, str] = field(default_factory=dict)
    decoy: bool = False


@dataclass
class QueryRecord:
    id: str
    files: Dict[str, Path]
    gt_tile: str
    gt_pixel: Tuple[int, int]
    positives: List[str]
    semi_positives: List[str]
    split: str = "test"
    sha256: Dict[str, str] = field(default_factory=dict)

    def label(self) -> GroundTruthLabel:
        return GroundTruthLabel(self.id, tuple(self.positives), tuple(self.semi_positives), self.gt_pixel)


class Dataset:
    def __init__(self, root: Path, kind: str, tile_size: int, tiles: Sequence[TileRecord],
                 queries: Sequence[QueryRecord], spec: Optional[dict] = None):
        if kind not in KINDS:
            raise DatasetError(f"unknown dataset kind '{kind}' (expected one of {KINDS})")
        self.root = Path(root)
        self.kind = kind
        self.tile_size = int(tile_size)
        self.tiles: Dict[str, TileRecord] = {t.id: t for t in tiles}
        self.queries: Dict[str, QueryRecord] = {q.id: q for q in queries}
        self.spec = spec or {}
        if len(self.tiles) != len(tiles) or len(self.queries) != len(queries):
            raise DatasetError(f"{self.root}: duplicate tile or query ids in manifest")
        for q in self.queries.values():
            for tid in [q.gt_tile, *q.positives, *q.semi_positives]:
                if tid not in self.tiles:
                    raise DatasetError(f"query {q.id} references unknown tile {tid}")
        self._load = lru_cache(maxsize=None)(self._read)

    # ---- lookups ----
    def tile_ids(self) -> List[str]:
        return sorted(self.tiles)

    def query_ids(self, split: Optional[str] = None) -> List[str]:
        return sorted(q.id for q in self.queries.values() if split in (None, "all") or q.split == split)

    def labels(self, query_ids: Optional[Sequence[str]] = None) -> Dict[str, GroundTruthLabel]:
        ids = query_ids if query_ids is not None else self.query_ids()
        return {qid: self.queries[qid].label() for qid in ids}

    def query(self, qid: str) -> QueryRecord:
        q = self.queries.get(qid)
        if q is None:
            raise DatasetError(f"unknown query id: {qid}")
        return q

    def tile(self, tid: str) -> TileRecord:
        t = self.tiles.get(tid)
        if t is None:
            raise DatasetError(f"unknown tile id: {tid}")
        return t

    # ---- tensors ----
    def _read(self, path: Path) -> np.ndarray:
        try:
            return read_tensor(path)
        except FormatError as e:
            raise DatasetError(str(e)) from None

    def tile_array(self, tid: str, role: str = "image") -> np.ndarray:
        t = self.tile(tid)
        if role not in t.files:
            raise DatasetError(f"tile {tid} has no '{role}' file")
        return self._load(t.files[role])

    def query_array(self, qid: str, role: str = "image") -> np.ndarray:
        q = self.query(qid)
        if role not in q.files:
            raise DatasetError(f"query {qid} has no '{role}' file (missing features)")
        return self._load(q.files[role])

    # ---- manifest io ----
    @classmethod
    def load(cls, root: PathLike, verify: bool = True) -> "Dataset":
        root = Path(root)
        mpath = root / MANIFEST if root.is_dir() else root
        if not mpath.exists():
            raise DatasetError(f"no manifest at {mpath}")
        try:
            doc = json.loads(mpath.read_text(encoding="utf-8"))
        except ValueError as e:
            raise DatasetError(f"{mpath}: manifest is not valid JSON: {e}") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{mpath}: manifest version {doc.get('version')} unsupported")
        base = mpath.parent
        kind = doc.get("kind", "features")
        try:
            tiles = [TileRecord(
                id=str(t["id"]),
                geo_tag=GeoTag.from_dict(t["geo_tag"]),
                files=_files(t, base),
                sha256=dict(t.get("sha256", {})),
                decoy=bool(t.get("decoy", False)),
            ) for t in doc["tiles"]]
            queries = [QueryRecord(
                id=str(q["id"]),
                files=_files(q, base),
                gt_tile=str(q["gt"]["tile_id"]),
                gt_pixel=(int(q["gt"]["pixel"][0]), int(q["gt"]["pixel"][1])),
                positives=[str(p) for p in q.get("positives", [q["gt"]["tile_id"]])],
                semi_positives=[str(p) for p in q.get("semi_positives", [])],
                split=str(q.get("split", "test")),
                sha256=dict(q.get("sha256", {})),
            ) for q in doc["queries"]]
        except (KeyError, TypeError, IndexError, ValueError) as e:
            raise DatasetError(f"{mpath}: malformed manifest entry: {e!r}") from None
        if not tiles:
            raise DatasetError(f"{mpath}: manifest lists no tiles")
        tile_size = int(doc.get("tile_size_px") or tiles[0].geo_tag.tile_size_px)
        ds = cls(base, kind, tile_size, tiles, queries, doc.get("spec"))
        for rec in list(ds.tiles.values()) + list(ds.queries.values()):
            for role, p in rec.files.items():
                if not p.exists():
                    raise DatasetError(f"{rec.id}: missing {role} file {p}")
        if verify:
            ds.verify()
        return ds

    def verify(self) -> int:
        checked = 0
        for rec in list(self.tiles.values()) + list(self.queries.values()):
            for role, want in rec.sha256.items():
                got = sha256_file(rec.files[role])
                if got != want:
                    raise DatasetError(f"{rec.id}: checksum mismatch for {role} ({rec.files[role]})")
                checked += 1
        return checked


def _files(rec: Mapping, base: Path) -> Dict[str, Path]:
    if "image" in rec:
        raw = {"image": rec["image"]}
    else:
        raw = dict(rec["features"])
    out = {}
    for role, p in raw.items():
        path = Path(p)
        out[str(role)] = path if path.is_absolute() else base / path
    return out


def write_manifest(root: Path, doc: dict) -> Path:
    p = root / MANIFEST
    p.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return p


def prepare_out(root: Path, force: bool) -> None:
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"{root} exists and is not empty (use --force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)


# ================= features =================
def tile_roles(n_levels: int) -> List[str]:
    return ["F0"] + [f"level{l}" for l in range(1, n_levels)] + ["G"]


QUERY_ROLES = ("F0", "G")


def expected_shapes(cfg: PipelineConfig) -> Tuple[Dict[str, Tuple[int, int, int]], Dict[str, Tuple[int, int, int]]]:
    m, fx = cfg.model, cfg.fixture
    tile = {"F0": (m.level0_size, m.level0_size, m.level_channels[0]),
            "G": (m.level0_size, m.level0_size, m.level_channels[0])}
    for lvl in range(1, m.n_levels):
        s = m.level_size(lvl)
        tile[f"level{lvl}"] = (s, s, m.level_channels[lvl])
    down = 2 ** len(m.encoder_channels) * m.head_stride
    hg, wg = fx.ground_height // down, fx.ground_width // down
    query = {"F0": (hg, wg, m.level_channels[0]), "G": (hg, wg, m.level_channels[0])}
    return tile, query


def ingest_features(manifest_path: PathLike, cfg: PipelineConfig, verify: bool = True) -> Dataset:
    """Load an externally produced feature manifest and check it against the level schedule."""
    ds = Dataset.load(manifest_path, verify=verify)
    if ds.kind != "features":
        raise DatasetError(f"{ds.root}: ingest expects a features manifest, got kind '{ds.kind}'")
    if ds.tile_size != cfg.tile_size:
        raise DatasetError(f"{ds.root}: tile size {ds.tile_size} != configured {cfg.tile_size}")
    want_tile, want_query = expected_shapes(cfg)
    for tid in ds.tile_ids():
        for role, shape in want_tile.items():
            got = ds.tile_array(tid, role).shape
            if got != shape:
                raise DatasetError(_schedule_msg(f"tile {tid}", role, got, shape))
    for qid in ds.query_ids():
        for role, shape in want_query.items():
            got = ds.query_array(qid, role).shape
            if got != shape:
                raise DatasetError(_schedule_msg(f"query {qid}", role, got, shape))
    log.info("ingested %d tiles, %d queries from %s", len(ds.tiles), len(ds.queries), ds.root)
    return ds


def _schedule_msg(who: str, role: str, got, want) -> str:
    what = "level 0 (F0)" if role == "F0" else ("semantic map (G)" if role == "G" else role.replace("level", "level "))
    if len(got) == 3 and got[2] != want[2]:
        return f"{who}: {what} has {got[2]} channels, schedule expects {want[2]}"
    return f"{who}: {what} has shape {tuple(got)}, schedule expects {want}"


def export_features(ds: Dataset, model, out_root: Path, force: bool = False) -> Path:
    """Encode every tile and query with the model and write a features manifest."""
    out_root = Path(out_root)
    prepare_out(out_root, force)
    n_levels = model.cfg.model.n_levels
    doc = {"version": MANIFEST_VERSION, "kind": "features", "tile_size_px": ds.tile_size,
           "spec": ds.spec, "tiles": [], "queries": []}
    with no_grad():
        for tid in tqdm(ds.tile_ids(), desc="encode tiles", unit="tile"):
            t = ds.tile(tid)
            pyr, G = model.encode_aerial(ds.tile_array(tid))
            arrays = {"F0": pyr.levels[0].data, "G": G.data}
            for lvl in range(1, n_levels):
                arrays[f"level{lvl}"] = pyr.levels[lvl].data
            files, sums = _write_all(out_root, "tiles", tid, arrays)
            doc["tiles"].append({"id": tid, "geo_tag": t.geo_tag.to_dict(), "decoy": t.decoy,
                                 "features": files, "sha256": sums})
        for qid in tqdm(ds.query_ids(), desc="encode queries", unit="query"):
            q = ds.query(qid)
            F0, G = model.encode_ground(ds.query_array(qid))
            files, sums = _write_all(out_root, "queries", qid, {"F0": F0.data, "G": G.data})
            doc["queries"].append({"id": qid, "split": q.split, "features": files, "sha256": sums,
                                   "gt": {"tile_id": q.gt_tile, "pixel": list(q.gt_pixel)},
                                   "positives": q.positives, "semi_positives": q.semi_positives})
    return write_manifest(out_root, doc)


def _write_all(root: Path, sub: str, rid: str, arrays: Mapping[str, np.ndarray]) -> Tuple[Dict[str, str], Dict[str, str]]:
    files, sums = {}, {}
    for role, arr in sorted(arrays.items()):
        rel = f"{sub}/{rid}.{role}.gutn"
        p = write_tensor(root / rel, arr)
        files[role] = rel
        sums[role] = sha256_file(p)
    return files, sums
