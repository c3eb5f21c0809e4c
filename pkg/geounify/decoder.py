"""
Hierarchical matching decoder and candidate re-ranking.

Level 0 is the coarsest map (L' x L'). At each level the ground descriptor
f_g^l is scored against every cell (cosine after LayerNorm + L2), then the
score map and the normalised features are upsampled 2x by a deconvolution,
concatenated with the encoder map of the next level (skip) and mixed by a
3x3 convolution. After the finest level a 1x1 head turns
concat(M, features) into one score per cell, which is upsampled
(nearest) to L x L and softmaxed into the localization distribution D.

Re-ranking combines the retrieval score s_t with max(M_t^0) and keeps the
per-candidate M^0 so the winner's decode does not recompute it.
"""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, QueryError
from .index import Candidate, CandidateSet
from .log import get_logger
from .representation import (
    DetailedGroundDescriptor,
    ProjectorParams,
    check_schedule,
    project_all,
)
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    deconv2d,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    reshape,
    snapshot_modes,
    softmax,
    upsample_nearest,
    use_modes,
)

log = get_logger(__name__)

HEAD_M_WEIGHT = 10.0

Descriptor = Union[DetailedGroundDescriptor, Tensor]


# ================= data model =================
@dataclass
class AerialPyramid:
    """levels[0] = F-head map F^0; levels[l] = encoder map at L' * 2^l."""
    levels: List[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("aerial pyramid needs at least one level")
        base = self.levels[0].shape[0]
        for lvl, t in enumerate(self.levels):
            want = base * 2 ** lvl
            if t.ndim != 3 or t.shape[0] != want or t.shape[1] != want:
                raise DimensionError(f"pyramid level {lvl} is {t.shape}, expected {want}x{want}xC")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def channels(self) -> List[int]:
        return [t.shape[2] for t in self.levels]


@dataclass
class RefineParams:
    deconv: Parameter  # (k, k, C_{l+1}, 1 + C_l)
    conv: Parameter    # (3, 3, 2 * C_{l+1}, C_{l+1})


@dataclass
class DecoderParams:
    refine: List[RefineParams]
    head: Parameter    # (1, 1, 1 + C_n, 1)

    @classmethod
    def init(cls, level_channels: Sequence[int], deconv_kernel: int, rng: np.random.Generator,
             noise: float = 0.05, prefix: str = "dec") -> "DecoderParams":
        """Convs start as a pass-through of the skip map plus noise; the head starts on M."""
        refine = []
        for lvl in range(len(level_channels) - 1):
            c_in, c_out = level_channels[lvl], level_channels[lvl + 1]
            k = deconv_kernel
            dk = rng.normal(0, noise / np.sqrt(k * k * (1 + c_in)), (k, k, c_out, 1 + c_in))
            ck = rng.normal(0, noise / np.sqrt(9 * 2 * c_out), (3, 3, 2 * c_out, c_out))
            ck[1, 1, c_out:, :] += np.eye(c_out)
            refine.append(RefineParams(Parameter(dk, name=f"{prefix}.{lvl}.deconv"),
                                       Parameter(ck, name=f"{prefix}.{lvl}.conv")))
        c_last = level_channels[-1]
        hk = rng.normal(0, noise / np.sqrt(1 + c_last), (1, 1, 1 + c_last, 1))
        hk[0, 0, 0, 0] = HEAD_M_WEIGHT
        return cls(refine, Parameter(hk, name=f"{prefix}.head"))

    @classmethod
    def skip_identity(cls, level_channels: Sequence[int], deconv_kernel: int,
                      m_weight: float = HEAD_M_WEIGHT) -> "DecoderParams":
        """Untrained decoder that forwards encoder maps unchanged and scores by M only."""
        refine = []
        for lvl in range(len(level_channels) - 1):
            c_in, c_out = level_channels[lvl], level_channels[lvl + 1]
            k = deconv_kernel
            ck = np.zeros((3, 3, 2 * c_out, c_out))
            ck[1, 1, c_out:, :] = np.eye(c_out)
            refine.append(RefineParams(Parameter(np.zeros((k, k, c_out, 1 + c_in)), name=f"dec.{lvl}.deconv"),
                                       Parameter(ck, name=f"dec.{lvl}.conv")))
        hk = np.zeros((1, 1, 1 + level_channels[-1], 1))
        hk[0, 0, 0, 0] = m_weight
        return cls(refine, Parameter(hk, name="dec.head"))

    @property
    def n_levels(self) -> int:
        return len(self.refine) + 1

    def parameters(self) -> List[Parameter]:
        return [p for rp in self.refine for p in (rp.deconv, rp.conv)] + [self.head]


@dataclass
class LocalizationDistribution:
    D: Tensor                 # (L, L), sums to 1
    log_D: Tensor             # (L, L)
    logits: Tensor            # (L, L) pre-softmax scores
    m_levels: List[Tensor]    # M^l, (h_l, w_l)
    pixel: Tuple[int, int]    # MAP (x = column, y = row)

    @property
    def size(self) -> int:
        return self.D.shape[0]


@dataclass
class RerankResult:
    winner: Candidate
    winner_rank: int
    trace: List[Dict[str, object]]
    m0: Dict[str, Tensor] = field(default_factory=dict)


# ================= matching =================
def _vec(f: Descriptor) -> Tensor:
    return f.vec if isinstance(f, DetailedGroundDescriptor) else as_tensor(f)


def match_level(f_g: Descriptor, F_a: Tensor) -> Tensor:
    """Cosine between f_g and every L2(LN(cell)) of F_a; returns (h, w)."""
    f = _vec(f_g)
    F_a = as_tensor(F_a)
    if F_a.ndim != 3:
        raise DimensionError(f"match_level expects (h, w, C), got {F_a.shape}")
    h, w, c = F_a.shape
    if f.ndim != 1 or f.shape[0] != c:
        raise DimensionError(f"match_level: descriptor dim {f.shape} vs {c} aerial channels")
    cells = l2_normalize(layer_norm(reshape(F_a, (h * w, c)), axis=-1), axis=-1)
    return reshape(matmul(cells, f), (h, w))


def refine_upsample(M: Tensor, F_l: Tensor, skip: Tensor, params: RefineParams) -> Tensor:
    M, F_l, skip = as_tensor(M), as_tensor(F_l), as_tensor(skip)
    h, w = M.shape[:2]
    if F_l.shape[:2] != (h, w):
        raise DimensionError(f"refine_upsample: score map {M.shape} vs features {F_l.shape}")
    if skip.ndim != 3 or skip.shape[:2] != (2 * h, 2 * w):
        raise DimensionError(f"refine_upsample: skip {skip.shape} must be {2 * h}x{2 * w}xC")
    x = concat([reshape(M, (h, w, 1)), l2_normalize(F_l, axis=-1)], axis=-1)
    up = deconv2d(x, params.deconv)
    return conv2d(concat([up, skip], axis=-1), params.conv, padding=1)


def to_distribution(scores: Tensor, tile_size: int, m_levels: Sequence[Tensor] = ()) -> LocalizationDistribution:
    """Nearest upsample to L x L, softmax over all L^2 cells, MAP = argmax(D)."""
    scores = as_tensor(scores)
    up = upsample_nearest(scores, tile_size, tile_size)
    flat = reshape(up, (tile_size * tile_size,))
    D = reshape(softmax(flat), (tile_size, tile_size))
    log_D = reshape(log_softmax(flat), (tile_size, tile_size))
    idx = int(np.argmax(D.data))
    return LocalizationDistribution(D, log_D, up, list(m_levels), (idx % tile_size, idx // tile_size))


def decode_descriptors(descs: Sequence[Descriptor], pyramid: AerialPyramid, params: DecoderParams,
                       tile_size: int, m0: Optional[Tensor] = None) -> LocalizationDistribution:
    if len(descs) != pyramid.n_levels or params.n_levels != pyramid.n_levels:
        raise DimensionError(f"decode: {len(descs)} descriptors, {pyramid.n_levels} pyramid levels, "
                             f"{params.n_levels} decoder levels")
    X = pyramid.levels[0]
    M = m0 if m0 is not None else match_level(descs[0], X)
    ms = [M]
    for lvl in range(1, pyramid.n_levels):
        X = refine_upsample(M, X, pyramid.levels[lvl], params.refine[lvl - 1])
        M = match_level(descs[lvl], X)
        ms.append(M)
    h, w = M.shape
    head_in = concat([reshape(M, (h, w, 1)), l2_normalize(X, axis=-1)], axis=-1)
    scores = reshape(conv2d(head_in, params.head), (h, w))
    return to_distribution(scores, tile_size, ms)


def decode(F_g0: Tensor, pyramid: AerialPyramid, proj: ProjectorParams, params: DecoderParams,
           tile_size: int, m0: Optional[Tensor] = None) -> LocalizationDistribution:
    check_schedule(proj, pyramid.channels())
    return decode_descriptors(project_all(F_g0, proj), pyramid, params, tile_size, m0=m0)


# ================= re-ranking =================
def combined_score(s_t: float, m0: Tensor) -> Tuple[float, float]:
    mx = float(np.max(m0.data))
    return mx, float(s_t) + mx


def rerank(candidates: CandidateSet, f_g0: Descriptor, pyramids: Mapping[str, AerialPyramid],
           workers: int = 1) -> RerankResult:
    """winner = argmax_t (s_t + max M_t^0); ties keep the better retrieval rank."""
    if candidates is None or len(candidates) == 0:
        raise QueryError("rerank needs at least one candidate")
    missing = [c.entry.image_id for c in candidates if c.entry.image_id not in pyramids]
    if missing:
        raise QueryError(f"no aerial features for candidates {missing}")
    modes = snapshot_modes()

    def score(c: Candidate) -> Tensor:
        with use_modes(modes):
            return match_level(f_g0, pyramids[c.entry.image_id].levels[0])

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(candidates))) as ex:
            maps = list(ex.map(score, candidates))
    else:
        maps = [score(c) for c in candidates]

    trace, best, best_i = [], -np.inf, 0
    for i, (c, m) in enumerate(zip(candidates, maps)):
        mx, comb = combined_score(c.score, m)
        trace.append({"candidate_id": c.entry.image_id, "s_t": c.score, "max_m0": mx, "combined": comb})
        if comb > best:
            best, best_i = comb, i
    return RerankResult(candidates[best_i], best_i, trace,
                        {c.entry.image_id: m for c, m in zip(candidates, maps)})
