"""
End-to-end run: retrieval -> re-ranking -> metric localization.

For every query of the chosen split:
  1. ground global descriptor, exact kNN over the tile index (top-k);
  2. re-rank the k candidates with s_t + max M_t^0 (or keep the top-1);
  3. decode the winner's pyramid into D, MAP pixel -> local frame meters;
  4. decode against the GT tile as well (reference-given localization).

The position error is inf when no top-k candidate covers the ground truth.
Rows go to run.db (single writer); the report is always rebuilt from
run.db read-only, so `run` and `eval` print the same bytes.
"""

from __future__ import annotations
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from .config import PipelineConfig, write_snapshot
from .dataset import Dataset
from .decoder import AerialPyramid, LocalizationDistribution, decode_descriptors, rerank
from .errors import QueryError
from .index import CandidateSet, IndexEntry, RetrievalIndex
from .log import get_logger
from .metrics import INF, EvalReport, GroundTruthLabel, build_report, localization_recall, mean_median, meter_error
from .model import GeoUnifyModel
from .representation import project_all
from .runstore import DB_NAME, QueryRecord, ResultRow, RunWriter, connect_db_ro, read_meta, read_rankings, read_results
from .tensor import no_grad, snapshot_modes, use_modes
from .tensorio import write_pgm, write_tensor

log = get_logger(__name__)


# ================= index =================
def build_index(model: GeoUnifyModel, ds: Dataset, workers: int = 1) -> RetrievalIndex:
    """Aerial global descriptor of every tile (decoys included)."""
    tids = ds.tile_ids()

    def one(tid: str) -> IndexEntry:
        with use_modes(modes):
            _, G_a = model.tile_features(ds, tid)
            return IndexEntry(tid, model.aerial_descriptor(G_a).data, ds.tile(tid).geo_tag)

    with no_grad():
        modes = snapshot_modes()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                entries = list(tqdm(ex.map(one, tids), total=len(tids), desc="index", unit="tile"))
        else:
            entries = [one(t) for t in tqdm(tids, desc="index", unit="tile")]
    index = RetrievalIndex.build(entries)
    log.info("[OK] index: %d tiles, dim %d", len(index), index.dim)
    return index


# ================= per query =================
@dataclass
class QueryOutcome:
    record: QueryRecord
    dist: LocalizationDistribution
    position: Optional[Tuple[float, float]]


class _PyramidCache:
    """Aerial pyramids by tile id, encoded once per run."""

    def __init__(self, model: GeoUnifyModel, ds: Dataset):
        self.model, self.ds = model, ds
        self._pyr: Dict[str, AerialPyramid] = {}

    def get(self, tid: str) -> AerialPyramid:
        pyr = self._pyr.get(tid)
        if pyr is None:
            pyr, _ = self.model.tile_features(self.ds, tid)
            self._pyr[tid] = pyr
        return pyr

    def subset(self, ids: Sequence[str]) -> Dict[str, AerialPyramid]:
        return {i: self.get(i) for i in ids}


def localize_query(qid: str, cfg: PipelineConfig, ds: Dataset, index: RetrievalIndex, model: GeoUnifyModel,
                   cache: _PyramidCache, k: int, use_rerank: bool, workers: int = 1) -> QueryOutcome:
    q = ds.query(qid)
    L = cfg.tile_size
    n = len(index)
    if k > n:
        raise QueryError(f"k={k} exceeds the index size {n}")
    F_g0, G_g = model.query_features(ds, qid)
    depth = min(n, max([k, *cfg.retrieval.recall_ks]))
    ranked = index.knn_query(model.ground_descriptor(G_g).data, depth)
    cands = CandidateSet(list(ranked)[:k])
    descs = project_all(F_g0, model.proj)

    if use_rerank:
        rr = rerank(cands, descs[0], cache.subset(cands.ids()), workers=workers)
        winner, m0, trace = rr.winner, rr.m0[rr.winner.entry.image_id], rr.trace
    else:
        winner, m0, trace = cands[0], None, []
    wid = winner.entry.image_id
    dist = decode_descriptors(descs, cache.get(wid), model.decoder, L, m0=m0)

    gt_tag = ds.tile(q.gt_tile).geo_tag
    ge, gn = gt_tag.pixel_to_frame(*q.gt_pixel)
    covered = any(c.entry.geo_tag is not None and c.entry.geo_tag.covers(ge, gn) for c in cands)
    pred_tag = winner.entry.geo_tag
    error = meter_error(dist.pixel, q.gt_pixel, pred_tag, gt_tag) if covered and pred_tag is not None else INF
    position = pred_tag.pixel_to_frame(*dist.pixel) if pred_tag is not None else None

    ref = decode_descriptors(descs, cache.get(q.gt_tile), model.decoder, L)
    ref_error = meter_error(ref.pixel, q.gt_pixel, gt_tag, gt_tag)

    ranking = [(wid, winner.score)] + [(c.entry.image_id, c.score) for c in ranked if c.entry.image_id != wid]
    row = ResultRow(
        query_id=qid, split=q.split, gt_tile=q.gt_tile, gt_pixel=tuple(q.gt_pixel),
        positives=list(q.positives), semi_positives=list(q.semi_positives),
        retrieval_top1=ranked[0].entry.image_id, pred_tile=wid, pred_pixel=dist.pixel,
        covered=covered, error_m=error, gt_tile_pixel=ref.pixel, gt_tile_error_m=ref_error,
    )
    return QueryOutcome(QueryRecord(row, ranking, trace), dist, position)


# ================= run =================
def run_pipeline(cfg: PipelineConfig, ds: Dataset, index: RetrievalIndex, model: GeoUnifyModel, out_dir: Path,
                 split: str = "test", k: Optional[int] = None, use_rerank: Optional[bool] = None,
                 heatmaps: bool = False, query_ids: Optional[Sequence[str]] = None,
                 workers: Optional[int] = None) -> EvalReport:
    out_dir = Path(out_dir)
    k = cfg.retrieval.k if k is None else int(k)
    use_rerank = cfg.retrieval.rerank if use_rerank is None else bool(use_rerank)
    workers = cfg.workers() if workers is None else max(1, int(workers))
    qids = list(query_ids) if query_ids is not None else ds.query_ids(split)
    if not qids:
        raise QueryError(f"no queries in split '{split}'")
    for qid in qids:
        ds.query(qid)
    write_snapshot(cfg, out_dir)

    cache = _PyramidCache(model, ds)
    traces: Dict[str, dict] = {}
    counters = {"queries": 0, "covered": 0, "reranked": 0}
    with no_grad(), logging_redirect_tqdm(), RunWriter(out_dir) as writer:
        writer.write_meta({"split": split, "k": k, "rerank": use_rerank, "seed": cfg.seed,
                           "index_size": len(index), "recall_ks": list(cfg.retrieval.recall_ks),
                           "thresholds_m": list(cfg.eval.thresholds_m)})
        for qid in tqdm(qids, desc="run", unit="query"):
            out = localize_query(qid, cfg, ds, index, model, cache, k, use_rerank, workers)
            writer.add(out.record)
            r = out.record.result
            counters["queries"] += 1
            counters["covered"] += int(r.covered)
            counters["reranked"] += int(r.pred_tile != r.retrieval_top1)
            traces[qid] = {
                "candidates": ([t["candidate_id"] for t in out.record.trace]
                               or [iid for iid, _ in out.record.ranking[:k]]),
                "trace": out.record.trace,
                "winner": r.pred_tile,
                "pixel": list(r.pred_pixel),
                "position_m": list(out.position) if out.position is not None else None,
            }
            if heatmaps:
                write_tensor(out_dir / "heatmaps" / f"{qid}.D.gutn", out.dist.D.data)
                write_pgm(out_dir / "heatmaps" / f"{qid}.pgm", out.dist.D.data)
    (out_dir / "traces.json").write_text(json.dumps(traces, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log.info("[OK] run: queries=%d covered=%d reranked=%d -> %s",
             counters["queries"], counters["covered"], counters["reranked"], out_dir / DB_NAME)
    return evaluate_run(out_dir)


# ================= report =================
def evaluate_run(out_dir: Path, write: bool = True) -> EvalReport:
    """Rebuild the EvalReport from run.db (read-only)."""
    out_dir = Path(out_dir)
    con = connect_db_ro(out_dir / DB_NAME)
    try:
        meta = read_meta(con)
        rows = read_results(con)
        ranked = read_rankings(con)
    finally:
        con.close()

    labels = {r.query_id: GroundTruthLabel(r.query_id, tuple(r.positives), tuple(r.semi_positives),
                                           tuple(r.gt_pixel)) for r in rows}
    rankings = {q: [iid for iid, _ in lst] for q, lst in ranked.items()}
    errors = {r.query_id: r.error_m for r in rows}
    thresholds = [float(t) for t in meta.get("thresholds_m", [1.0, 10.0])]

    extra: Dict[str, float] = {}
    if rows:
        extra["r1_before_rerank"] = sum(r.retrieval_top1 in r.positives for r in rows) / len(rows)
        extra["r1_after_rerank"] = sum(r.pred_tile in r.positives for r in rows) / len(rows)
        ref = [r.gt_tile_error_m for r in rows if r.gt_tile_error_m is not None and math.isfinite(r.gt_tile_error_m)]
        if ref:
            extra["gt_tile_mean_m"], extra["gt_tile_median_m"] = mean_median(ref)
            for t, v in localization_recall(ref, thresholds).items():
                extra[f"gt_tile_R@{t:g}m"] = v

    report = build_report(rankings, labels, errors, recall_ks=meta.get("recall_ks", [1, 5, 10]),
                          thresholds=thresholds, extra=extra)
    if write:
        report.write(out_dir)
    return report


def query_index(index: RetrievalIndex, model: GeoUnifyModel, ds: Dataset, qid: str, k: int) -> CandidateSet:
    with no_grad():
        _, G_g = model.query_features(ds, qid)
        return index.knn_query(model.ground_descriptor(G_g).data, k)

