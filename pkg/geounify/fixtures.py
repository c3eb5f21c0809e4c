"""
Synthetic geo-localization fixtures.

World: one smooth random RGB texture. Aerial tiles are an n x n grid of
L x L crops with stride L * (1 - overlap); tile (r, c) has its top-left at
world pixel (r * stride, c * stride) and the frame maps world pixel
(wx, wy) to (east, north) = (wx, -wy) * mpp.

Queries: each ground panorama is sampled from the world along azimuthal
rays around its location (column = azimuth clockwise from north, top row =
farthest sample). The location lies in the central quarter of its positive
tile on the finest decoder grid (multiples of L / finest level size), so
a MAP pixel can equal it exactly. Every other tile covering the location is
a semi-positive (at most 3 with 50 % overlap).

Adversarial mode adds database-only decoys: a real tile with its 8 px
blocks shuffled, placed far outside the world.
"""

from __future__ import annotations
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from .config import PipelineConfig
from .dataset import MANIFEST_VERSION, Dataset, prepare_out, write_manifest
from .decoder import AerialPyramid, DecoderParams, decode_descriptors
from .errors import DatasetError
from .log import get_logger
from .losses import gt_cell
from .metrics import GeoTag
from .tensor import Tensor, l2_normalize, layer_norm, no_grad
from .tensorio import sha256_file, write_tensor

log = get_logger(__name__)

DECOY_BLOCK = 8
RAY_MIN_PX = 1.0
RAY_REACH = 0.4  # of L


# ================= spec =================
@dataclass(frozen=True)
class FixtureSpec:
    world_size_tiles: int = 64
    tile_size_px: int = 96
    meters_per_pixel: float = 1.0
    queries_per_tile: int = 4
    semi_positive_overlap: float = 0.5
    noise_level: float = 0.05
    ground_height: int = 32
    ground_width: int = 128
    adversarial: bool = False
    decoy_fraction: float = 1.0
    pixel_step: int = 2
    seed: int = 42

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "FixtureSpec":
        finest = cfg.model.level_size(cfg.model.n_levels - 1)
        return cls(**asdict(cfg.fixture), pixel_step=cfg.tile_size // finest, seed=cfg.seed)

    @property
    def side(self) -> int:
        return int(round(math.sqrt(self.world_size_tiles)))

    @property
    def stride(self) -> int:
        return max(1, int(round(self.tile_size_px * (1.0 - self.semi_positive_overlap))))

    @property
    def world_px(self) -> int:
        return self.stride * (self.side - 1) + self.tile_size_px


def tile_id(r: int, c: int, prefix: str = "t") -> str:
    return f"{prefix}{r:02d}{c:02d}"


# ================= rendering =================
def _box_blur(a: np.ndarray, r: int) -> np.ndarray:
    w = 2 * r + 1
    for axis in (0, 1):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (r + 1, r)
        c = np.cumsum(np.pad(a, pad, mode="edge"), axis=axis)
        n = c.shape[axis]
        a = (np.take(c, np.arange(w, n), axis=axis) - np.take(c, np.arange(0, n - w), axis=axis)) / w
    return a


def world_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Two-scale smooth noise, zero mean and unit variance per channel."""
    coarse = _box_blur(_box_blur(rng.normal(size=(size, size, 3)), 6), 6)
    fine = _box_blur(rng.normal(size=(size, size, 3)), 1)
    coarse /= coarse.std(axis=(0, 1), keepdims=True)
    fine /= fine.std(axis=(0, 1), keepdims=True)
    tex = coarse + 0.5 * fine
    tex -= tex.mean(axis=(0, 1), keepdims=True)
    return tex / tex.std(axis=(0, 1), keepdims=True)


def render_ground(world: np.ndarray, wx: float, wy: float, spec: FixtureSpec) -> np.ndarray:
    hg, wg = spec.ground_height, spec.ground_width
    theta = 2.0 * np.pi * np.arange(wg) / wg
    reach = RAY_REACH * spec.tile_size_px
    radius = RAY_MIN_PX + (reach - RAY_MIN_PX) * (hg - 1 - np.arange(hg)) / max(1, hg - 1)
    rows = np.rint(wy - radius[:, None] * np.cos(theta)[None, :]).astype(int)
    cols = np.rint(wx + radius[:, None] * np.sin(theta)[None, :]).astype(int)
    n = world.shape[0]
    return world[np.clip(rows, 0, n - 1), np.clip(cols, 0, n - 1)]


def block_permute(img: np.ndarray, block: int, rng: np.random.Generator) -> np.ndarray:
    h, w, c = img.shape
    bh, bw = h // block, w // block
    blocks = img[: bh * block, : bw * block].reshape(bh, block, bw, block, c).transpose(0, 2, 1, 3, 4)
    flat = blocks.reshape(bh * bw, block, block, c)[rng.permutation(bh * bw)]
    out = img.copy()
    out[: bh * block, : bw * block] = flat.reshape(bh, bw, block, block, c).transpose(0, 2, 1, 3, 4).reshape(
        bh * block, bw * block, c)
    return out


def covering_tiles(spec: FixtureSpec, wx: int, wy: int) -> List[Tuple[int, int]]:
    L, s = spec.tile_size_px, spec.stride
    return [(r, c) for r in range(spec.side) for c in range(spec.side)
            if r * s <= wy < r * s + L and c * s <= wx < c * s + L]


# ================= generation =================
def generate_fixtures(spec: FixtureSpec, out_root: Path, force: bool = False) -> Path:
    out_root = Path(out_root)
    prepare_out(out_root, force)
    side, L, s, mpp = spec.side, spec.tile_size_px, spec.stride, spec.meters_per_pixel
    if side * side != spec.world_size_tiles:
        raise DatasetError(f"world_size_tiles {spec.world_size_tiles} is not a perfect square")
    lo, hi = L // 4, 3 * L // 4
    grid = np.arange(-(-lo // spec.pixel_step) * spec.pixel_step, hi, spec.pixel_step)
    if grid.size == 0:
        raise DatasetError(f"no pixel on the {spec.pixel_step}px grid inside the central quarter")

    rng = np.random.default_rng(spec.seed)
    world = world_texture(rng, spec.world_px)
    doc: Dict[str, object] = {"version": MANIFEST_VERSION, "kind": "images", "tile_size_px": L,
                              "spec": asdict(spec), "tiles": [], "queries": []}
    counters = {"tiles": 0, "decoys": 0, "queries": 0, "semi_positives": 0}

    def put(sub: str, rid: str, arr: np.ndarray) -> Tuple[str, str]:
        rel = f"{sub}/{rid}.gutn"
        return rel, sha256_file(write_tensor(out_root / rel, arr.astype(np.float32)))

    tiles: Dict[str, np.ndarray] = {}
    with logging_redirect_tqdm():
        for r in tqdm(range(side), desc="tiles", unit="row"):
            for c in range(side):
                tid = tile_id(r, c)
                img = world[r * s : r * s + L, c * s : c * s + L] + spec.noise_level * rng.normal(size=(L, L, 3))
                tiles[tid] = img
                rel, digest = put("tiles", tid, img)
                geo = GeoTag((c * s + L / 2.0) * mpp, -(r * s + L / 2.0) * mpp, mpp, L)
                doc["tiles"].append({"id": tid, "geo_tag": geo.to_dict(), "decoy": False,
                                     "image": rel, "sha256": {"image": digest}})
                counters["tiles"] += 1

                for j in range(spec.queries_per_tile):
                    x, y = int(rng.choice(grid)), int(rng.choice(grid))
                    wx, wy = c * s + x, r * s + y
                    pano = render_ground(world, wx, wy, spec) + spec.noise_level * rng.normal(
                        size=(spec.ground_height, spec.ground_width, 3))
                    qid = f"q{r:02d}{c:02d}_{j}"
                    semis = [tile_id(rr, cc) for rr, cc in covering_tiles(spec, wx, wy) if (rr, cc) != (r, c)]
                    rel, digest = put("queries", qid, pano)
                    split = "test" if spec.queries_per_tile > 1 and j == spec.queries_per_tile - 1 else "train"
                    doc["queries"].append({"id": qid, "split": split, "image": rel, "sha256": {"image": digest},
                                           "gt": {"tile_id": tid, "pixel": [x, y]},
                                           "positives": [tid], "semi_positives": semis[:3]})
                    counters["queries"] += 1
                    counters["semi_positives"] += len(semis[:3])

        if spec.adversarial:
            order = rng.permutation(sorted(tiles))
            n_decoys = int(round(spec.decoy_fraction * len(order)))
            far = 3.0 * spec.world_px * mpp
            for i, tid in enumerate(sorted(order[:n_decoys])):
                did = "d" + tid[1:]
                rel, digest = put("tiles", did, block_permute(tiles[tid], DECOY_BLOCK, rng))
                geo = GeoTag(far + i * L * mpp, far, mpp, L)
                doc["tiles"].append({"id": did, "geo_tag": geo.to_dict(), "decoy": True,
                                     "image": rel, "sha256": {"image": digest}})
                counters["decoys"] += 1

    path = write_manifest(out_root, doc)
    log.info("[OK] fixtures: tiles=%d decoys=%d queries=%d semi_positives=%d -> %s",
             counters["tiles"], counters["decoys"], counters["queries"], counters["semi_positives"], path)
    return path


# ================= oracle =================
def planted_case(rng: np.random.Generator, gt_pixel: Sequence[int], cfg: PipelineConfig
                 ) -> Tuple[AerialPyramid, List[Tensor]]:
    """Random pyramid whose GT cell at every level holds a code equal to that level's descriptor."""
    m, L = cfg.model, cfg.tile_size
    levels, descs = [], []
    with no_grad():
        for lvl, ch in enumerate(m.level_channels):
            size = m.level_size(lvl)
            cells = rng.normal(size=(size, size, ch))
            code = rng.normal(size=ch)
            r, c = gt_cell(gt_pixel, L, size)
            cells[r, c] = code
            levels.append(Tensor(cells))
            descs.append(l2_normalize(layer_norm(Tensor(code))))
    return AerialPyramid(levels), descs


def oracle_check(ds: Dataset, cfg: PipelineConfig, seed: Optional[int] = None) -> List[str]:
    """Decode planted features for every query; returns the ids whose MAP misses the GT pixel."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = DecoderParams.skip_identity(cfg.model.level_channels, cfg.model.deconv_kernel)
    misses = []
    with no_grad():
        for qid in ds.query_ids():
            q = ds.query(qid)
            pyr, descs = planted_case(rng, q.gt_pixel, cfg)
            dist = decode_descriptors(descs, pyr, params, cfg.tile_size)
            if tuple(dist.pixel) != tuple(q.gt_pixel):
                misses.append(qid)
    log.info("oracle check: %d/%d queries land on the GT pixel", len(ds.queries) - len(misses), len(ds.queries))
    return misses
