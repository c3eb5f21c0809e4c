"""
Training objectives.

  L_G  symmetric retrieval InfoNCE over the in-batch similarity matrix
       (label smoothing on this loss only)
  L_D  cross-entropy between the Gaussian target D_gt and D
  L_M  per-level, per-cell InfoNCE over the cells of the same score map,
       weighted by max-pooled and renormalised D_gt
  L_R  level-0 InfoNCE of each ground descriptor against every cell of every
       aerial level-0 map in the batch
  L    L_D + alpha L_G + beta L_M + gamma L_R
"""

from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, NumericalError
from .representation import DetailedGroundDescriptor
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    l2_normalize,
    layer_norm,
    log as tlog,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    reshape,
    stack,
    take,
    transpose,
    tsum,
)

NORM_TOL = 1e-5


# ================= data model =================
@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0
    beta: float = 10.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise DimensionError(f"loss weights must be >= 0, got {self}")


class Temperature:
    """Learnable tau > 0, stored as log(tau)."""

    def __init__(self, tau0: float = 0.1, name: str = "tau"):
        if tau0 <= 0:
            raise DimensionError(f"temperature must be > 0, got {tau0}")
        self.log_tau = Parameter(np.array(math.log(tau0)), name=f"{name}.log")

    def __call__(self) -> Tensor:
        return exp(self.log_tau)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_tau.value))

    def parameters(self) -> List[Parameter]:
        return [self.log_tau]


TauLike = Union[Temperature, Tensor, float]


def _tau(tau: TauLike) -> Tensor:
    t = tau() if isinstance(tau, Temperature) else as_tensor(tau)
    if t.size != 1 or not float(t.data.reshape(-1)[0]) > 0:
        raise DimensionError(f"temperature must be a positive scalar, got {t.data}")
    return t


def _smoothed_targets(n: int, pos, eps: float, rows: int = 1) -> np.ndarray:
    t = np.full((rows, n), eps / n)
    t[np.arange(rows), pos] += 1.0 - eps
    return t


def _vec(d) -> Tensor:
    return d.vec if isinstance(d, DetailedGroundDescriptor) else as_tensor(d)


# ================= retrieval =================
def info_nce(q, refs, positive_index: int, tau: TauLike, label_smoothing: float = 0.0) -> Tensor:
    """-sum_j t_j log softmax(q . r_j / tau), t = (1 - eps) onehot + eps / N."""
    q = _vec(q)
    R = refs if isinstance(refs, Tensor) else stack([_vec(r) for r in refs])
    if R.ndim != 2 or R.shape[0] < 1:
        raise DimensionError(f"info_nce needs a non-empty (N, d) reference set, got {R.shape}")
    n = R.shape[0]
    if not 0 <= positive_index < n:
        raise DimensionError(f"positive index {positive_index} outside 0..{n - 1}")
    logits = div(matmul(R, q), _tau(tau))
    logp = log_softmax(logits)
    tgt = _smoothed_targets(n, positive_index, label_smoothing)[0]
    return neg(tsum(mul(logp, tgt)))


def retrieval_loss(ground, aerial, tau: TauLike, label_smoothing: float = 0.1) -> Tensor:
    """Mean of the ground->aerial and aerial->ground InfoNCE; row i is a matched pair."""
    G = ground if isinstance(ground, Tensor) else stack([_vec(g) for g in ground])
    A = aerial if isinstance(aerial, Tensor) else stack([_vec(a) for a in aerial])
    if G.shape != A.shape or G.ndim != 2:
        raise DimensionError(f"retrieval_loss: batch shapes {G.shape} vs {A.shape}")
    b = G.shape[0]
    S = div(matmul(G, transpose(A)), _tau(tau))
    tgt = _smoothed_targets(b, np.arange(b), label_smoothing, rows=b)
    g2a = neg(tsum(mul(log_softmax(S, axis=1), tgt))) * (1.0 / b)
    a2g = neg(tsum(mul(log_softmax(S, axis=0), tgt.T))) * (1.0 / b)
    return (g2a + a2g) * 0.5


# ================= localization =================
def gaussian_target(tile_size: int, gt_pixel: Sequence[int], sigma: float) -> np.ndarray:
    """2-D Gaussian at (x, y) = gt_pixel, normalised to sum 1."""
    x0, y0 = gt_pixel
    if not (0 <= x0 < tile_size and 0 <= y0 < tile_size):
        raise DimensionError(f"gt pixel {gt_pixel} outside the {tile_size}px tile")
    if sigma <= 0:
        raise DimensionError(f"sigma must be > 0, got {sigma}")
    ax = np.arange(tile_size, dtype=np.float64)
    gy = np.exp(-0.5 * ((ax - y0) / sigma) ** 2)
    gx = np.exp(-0.5 * ((ax - x0) / sigma) ** 2)
    g = np.outer(gy, gx)
    return g / g.sum()


def level_weights(D_gt: np.ndarray, size: int) -> np.ndarray:
    """Max-pool D_gt down to size x size and renormalise."""
    factor = D_gt.shape[0] // size
    if factor * size != D_gt.shape[0]:
        raise DimensionError(f"level size {size} does not divide the {D_gt.shape[0]}px target")
    w = max_pool2d(Tensor(D_gt), factor).data.astype(np.float64)
    return w / w.sum()


def _check_normalized(name: str, arr: np.ndarray) -> None:
    s = float(np.sum(arr, dtype=np.float64))
    if abs(s - 1.0) > NORM_TOL or float(np.min(arr)) < 0:
        raise DimensionError(f"{name} must be a distribution (sum {s:.6f})")


def localization_loss(dist, D_gt) -> Tensor:
    """-sum D_gt * log D. dist is a LocalizationDistribution or an L x L tensor."""
    log_D = getattr(dist, "log_D", None)
    if log_D is None:
        D = as_tensor(dist)
        _check_normalized("D", D.data)
        log_D = tlog(D)
    else:
        _check_normalized("D", dist.D.data)
    tgt = np.asarray(D_gt.data if isinstance(D_gt, Tensor) else D_gt, dtype=np.float64)
    _check_normalized("D_gt", tgt)
    if tgt.shape != log_D.shape:
        raise DimensionError(f"localization_loss: D {log_D.shape} vs D_gt {tgt.shape}")
    return neg(tsum(mul(log_D, tgt)))


def cell_log_probs(M: Tensor, tau: TauLike) -> Tensor:
    """log softmax over all cells of one score map, at temperature tau."""
    M = as_tensor(M)
    return log_softmax(div(reshape(M, (M.size,)), _tau(tau)))


def matching_loss(m_levels: Sequence[Tensor], D_gt, tau: TauLike) -> Tensor:
    """Sum over levels of sum_ij w_l(i,j) * (-log softmax(M_l / tau)(i,j))."""
    if not m_levels:
        raise DimensionError("matching_loss needs at least one score map")
    tgt = np.asarray(D_gt.data if isinstance(D_gt, Tensor) else D_gt, dtype=np.float64)
    _check_normalized("D_gt", tgt)
    total: Optional[Tensor] = None
    for M in m_levels:
        M = as_tensor(M)
        h, w = M.shape[:2]
        if h != w:
            raise DimensionError(f"matching_loss expects square score maps, got {M.shape}")
        wts = level_weights(tgt, h).reshape(-1)
        term = neg(tsum(mul(cell_log_probs(M, tau), wts)))
        total = term if total is None else add(total, term)
    return total


def gt_cell(gt_pixel: Sequence[int], tile_size: int, size: int) -> Tuple[int, int]:
    """(row, col) of the size x size cell holding the pixel, by floor down-scaling."""
    x, y = gt_pixel
    return (int(y) * size) // tile_size, (int(x) * size) // tile_size


def rerank_loss(ground_descs: Sequence, aerial_maps: Sequence[Tensor], gt_pixels: Sequence[Sequence[int]],
                tile_size: int, tau: TauLike) -> Tensor:
    """
    Batch-level re-ranking InfoNCE: ground descriptor b against the union of
    all cells of all B aerial level-0 maps, positive = GT cell of map b.
    """
    b = len(ground_descs)
    if b < 1 or len(aerial_maps) != b or len(gt_pixels) != b:
        raise DimensionError(f"rerank_loss: {b} descriptors, {len(aerial_maps)} maps, {len(gt_pixels)} labels")
    h, w, c = aerial_maps[0].shape
    cells = []
    for F in aerial_maps:
        F = as_tensor(F)
        if F.shape != (h, w, c):
            raise DimensionError(f"rerank_loss: level-0 maps differ in shape ({F.shape} vs {(h, w, c)})")
        cells.append(l2_normalize(layer_norm(reshape(F, (h * w, c)), axis=-1), axis=-1))
    C = concat(cells, axis=0)                                   # (B*h*w, c)
    Q = stack([_vec(d) for d in ground_descs])                  # (B, c)
    logits = div(transpose(matmul(C, transpose(Q))), _tau(tau))  # (B, B*h*w)
    logp = log_softmax(logits, axis=1)
    pos = []
    for i, px in enumerate(gt_pixels):
        r, col = gt_cell(px, tile_size, h)
        pos.append(i * h * w + r * w + col)
    picked = take(logp, (np.arange(b), np.asarray(pos)))
    return neg(mean(picked))


# ================= composite =================
COMPONENTS = ("L_D", "L_G", "L_M", "L_R")


def total_loss(parts: Mapping[str, Optional[Tensor]], weights: LossWeights = LossWeights()) -> Tensor:
    """L_D + alpha L_G + beta L_M + gamma L_R; missing parts count as zero."""
    scale = {"L_D": 1.0, "L_G": weights.alpha, "L_M": weights.beta, "L_R": weights.gamma}
    total: Optional[Tensor] = None
    for name in COMPONENTS:
        t = parts.get(name)
        if t is None:
            continue
        v = float(np.asarray(t.data if isinstance(t, Tensor) else t).reshape(-1)[0])
        if not math.isfinite(v):
            raise NumericalError(f"loss component {name} is not finite")
        t = as_tensor(t)
        if scale[name] == 0.0:
            continue
        term = mul(t, scale[name])
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def breakdown(parts: Mapping[str, Optional[Tensor]]) -> Dict[str, float]:
    return {k: (float(v.data) if v is not None else 0.0) for k, v in parts.items()}
