"""
Multi-granularity heads.

Global branch: single-head self-attention over the semantic map's cells
(no FFN, no positional encoding) followed by GeM pooling and L2
normalisation. Detail branch: per-level ground projectors that turn the
ground detail map F_g^0 (H' x W' x C) into one descriptor per decoder level.

Projector wiring per level:
  1x1 conv (C -> C')  ->  column collapse H' -> 1 (one shared weight per row)
  ->  flatten (W' * C')  ->  linear to C_l  ->  L2 normalise
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .errors import DimensionError
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    clamp_min,
    conv2d,
    div,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    mul,
    power,
    reshape,
    softmax,
    transpose,
)

GEM_P_RANGE = (0.5, 10.0)
GEM_EPS = 1e-6
DEGENERATE_NORM = 1e-3


# ================= aggregator =================
@dataclass
class AggregatorParams:
    W_q: Parameter
    W_k: Parameter
    W_v: Parameter
    W_restore: Parameter
    p: Parameter
    lam: float
    mode: str = "attention_gem"

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, p0: float = 3.0,
             mode: str = "attention_gem", prefix: str = "agg") -> "AggregatorParams":
        half = max(1, channels // 2)
        s_in, s_out = 1.0 / np.sqrt(channels), 1.0 / np.sqrt(half)
        return cls(
            W_q=Parameter(rng.normal(0, s_in, (channels, half)), name=f"{prefix}.W_q"),
            W_k=Parameter(rng.normal(0, s_in, (channels, half)), name=f"{prefix}.W_k"),
            W_v=Parameter(rng.normal(0, s_in, (channels, half)), name=f"{prefix}.W_v"),
            W_restore=Parameter(rng.normal(0, s_out * 0.1, (half, channels)), name=f"{prefix}.W_restore"),
            p=Parameter(np.array(p0), name=f"{prefix}.p"),
            lam=float(half),
            mode=mode,
        )

    @property
    def channels(self) -> int:
        return self.W_q.shape[0]

    def parameters(self) -> List[Parameter]:
        return [self.W_q, self.W_k, self.W_v, self.W_restore, self.p]

    def clamp(self) -> None:
        lo, hi = GEM_P_RANGE
        self.p.assign(np.clip(self.p.value, lo, hi))


def attention_enhance(G: Tensor, params: AggregatorParams) -> Tensor:
    """Phi = G + softmax(Q K^T / sqrt(lam)) V W_restore with Q, K from LN(G)."""
    G = as_tensor(G)
    if G.ndim != 3:
        raise DimensionError(f"attention_enhance expects (h, w, C), got {G.shape}")
    h, w, c = G.shape
    if c != params.channels:
        raise DimensionError(f"attention_enhance: map has {c} channels, params expect {params.channels}")
    X = reshape(G, (h * w, c))
    Xn = layer_norm(X, axis=-1)
    Q = matmul(Xn, params.W_q)
    K = matmul(Xn, params.W_k)
    V = matmul(X, params.W_v)
    A = softmax(matmul(Q, transpose(K)) * (1.0 / np.sqrt(params.lam)), axis=-1)
    out = X + matmul(matmul(A, V), params.W_restore)
    return reshape(out, (h, w, c))


def gem_pool(phi: Tensor, p: Union[Tensor, float]) -> Tensor:
    """
    Per-channel (mean of x^p)^(1/p) over all cells, x clamped at 1e-6.

    Evaluated as m * (mean((x/m)^p))^(1/p) with m the per-channel max held
    constant, which is the same value and stays finite for large p.
    """
    phi = as_tensor(phi)
    pv = float(np.asarray(p.data if isinstance(p, Tensor) else p))
    if pv <= 0:
        raise DimensionError(f"gem_pool needs p > 0, got {pv}")
    c = phi.shape[-1]
    x = clamp_min(reshape(phi, (-1, c)), GEM_EPS)
    m = Tensor(x.data.max(axis=0))
    ratio = div(x, m)
    pooled = mean(power(ratio, p), axis=0)
    inv = div(1.0, p) if isinstance(p, Tensor) else 1.0 / pv
    return mul(power(pooled, inv), m)


def avg_pool(phi: Tensor) -> Tensor:
    phi = as_tensor(phi)
    return mean(reshape(phi, (-1, phi.shape[-1])), axis=0)


def global_descriptor(G: Tensor, params: AggregatorParams) -> Tensor:
    """Unit-norm descriptor of dimension C_g. mode "avg" drops attention and GeM."""
    if params.mode == "avg":
        return l2_normalize(avg_pool(G))
    return l2_normalize(gem_pool(attention_enhance(G, params), params.p))


# ================= ground projectors =================
@dataclass
class LevelProjector:
    reduce: Parameter      # (1, 1, C, C')
    column_fc: Parameter   # (H',)
    proj: Parameter        # (W' * C', C_l)


@dataclass
class ProjectorParams:
    levels: List[LevelProjector]

    @classmethod
    def init(cls, ground_hw: Sequence[int], channels: int, level_channels: Sequence[int],
             reduce_to: int, rng: np.random.Generator, prefix: str = "proj") -> "ProjectorParams":
        hg, wg = int(ground_hw[0]), int(ground_hw[1])
        levels = []
        for lvl, cl in enumerate(level_channels):
            flat = wg * reduce_to
            levels.append(LevelProjector(
                reduce=Parameter(rng.normal(0, 1.0 / np.sqrt(channels), (1, 1, channels, reduce_to)),
                                 name=f"{prefix}.{lvl}.reduce"),
                column_fc=Parameter(np.full(hg, 1.0 / hg) + rng.normal(0, 0.01, hg),
                                    name=f"{prefix}.{lvl}.column_fc"),
                proj=Parameter(rng.normal(0, 1.0 / np.sqrt(flat), (flat, cl)), name=f"{prefix}.{lvl}.proj"),
            ))
        return cls(levels)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def dims(self) -> List[int]:
        return [lp.proj.shape[1] for lp in self.levels]

    def parameters(self) -> List[Parameter]:
        return [p for lp in self.levels for p in (lp.reduce, lp.column_fc, lp.proj)]


@dataclass
class DetailedGroundDescriptor:
    vec: Tensor
    level: int
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


def project_ground(F_g0: Tensor, level: int, params: ProjectorParams) -> DetailedGroundDescriptor:
    F_g0 = as_tensor(F_g0)
    if not 0 <= level < params.n_levels:
        raise DimensionError(f"project_ground: level {level} outside 0..{params.n_levels - 1}")
    lp = params.levels[level]
    if F_g0.ndim != 3:
        raise DimensionError(f"project_ground expects (H', W', C), got {F_g0.shape}")
    hg, wg, _ = F_g0.shape
    if hg != lp.column_fc.shape[0] or wg * lp.reduce.shape[3] != lp.proj.shape[0]:
        raise DimensionError(f"project_ground: ground map {F_g0.shape} does not fit level {level} projector")
    red = conv2d(F_g0, lp.reduce)                      # (H', W', C')
    cols = reshape(red, (hg, -1))                      # (H', W' * C')
    collapsed = matmul(lp.column_fc, cols)             # (W' * C',)
    raw = matmul(collapsed, lp.proj)                   # (C_l,)
    degenerate = bool(np.linalg.norm(raw.data) < DEGENERATE_NORM)
    return DetailedGroundDescriptor(l2_normalize(raw), level, degenerate)


def project_all(F_g0: Tensor, params: ProjectorParams) -> List[DetailedGroundDescriptor]:
    return [project_ground(F_g0, lvl, params) for lvl in range(params.n_levels)]


def check_schedule(params: ProjectorParams, aerial_channels: Sequence[int]) -> None:
    dims = params.dims()
    if list(dims) != list(aerial_channels):
        raise DimensionError(f"projector dims {dims} differ from aerial channel schedule {list(aerial_channels)}")
