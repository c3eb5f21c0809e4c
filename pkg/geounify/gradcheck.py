"""
Finite-difference gradient suite.

Every check builds its inputs as Parameters inside `precision(float64)`,
runs backward once for the analytic gradient and compares it with central
differences at randomly chosen coordinates:

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)

Ops and heads must stay under 1e-3, the composite objective under 1e-2.
`float32=True` repeats the suite at the engine's working precision with a
larger step; only the composite tolerance applies there.
"""

from __future__ import annotations
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig, preset_config
from .decoder import AerialPyramid, DecoderParams, decode_descriptors, match_level, refine_upsample
from .errors import DimensionError
from .log import get_logger
from .losses import (
    LossWeights,
    Temperature,
    gaussian_target,
    info_nce,
    localization_loss,
    matching_loss,
    rerank_loss,
    retrieval_loss,
    total_loss,
)
from .model import IMAGE_CHANNELS, GeoUnifyModel, parameter_groups
from .representation import AggregatorParams, ProjectorParams, attention_enhance, gem_pool, global_descriptor, project_ground
from .tensor import (
    Parameter,
    Tensor,
    backward,
    concat,
    conv2d,
    deconv2d,
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
    power,
    precision,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    take,
    transpose,
    tsum,
    upsample_nearest,
)
from .train import Sample, sample_losses

log = get_logger(__name__)

OP_TOL = 1e-3
COMPOSITE_TOL = 1e-2
# finite-difference step and denominator floor per precision; the composite sums large terms
STEP = {np.float64: 1e-5, np.float32: 1e-2}
REL_FLOOR = {np.float64: 1e-6, np.float32: 1e-3}
COMPOSITE_STEP = {np.float64: 1e-6, np.float32: 1e-2}
COMPOSITE_FLOOR = {np.float64: 1e-4, np.float32: 1e-1}

Check = Callable[[np.random.Generator], Tuple[List[Parameter], Callable[[], Tensor]]]


@dataclass
class GradCheckResult:
    group: str
    max_rel_err: float
    n: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


# ================= core =================
def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(params: Sequence[Parameter], loss_fn: Callable[[], Tensor], rng: np.random.Generator,
                    coords: int = 10, step: float = 1e-5, floor: float = 1e-6) -> Dict[str, Tuple[float, int]]:
    """Max relative error and number of sampled coordinates, per parameter name."""
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise DimensionError(f"gradient check needs a scalar loss, got {loss.shape}")
    backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    out: Dict[str, Tuple[float, int]] = {}
    for i, p in enumerate(params):
        name = p.name or f"input{i}"
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        worst = 0.0
        for j in picks:
            base = p.value.copy()
            bumped = base.reshape(-1).copy()
            bumped[j] = flat[j] + step
            p.assign(bumped.reshape(base.shape))
            f_plus = float(loss_fn().data)
            bumped[j] = flat[j] - step
            p.assign(bumped.reshape(base.shape))
            f_minus = float(loss_fn().data)
            p.assign(base)
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, rel_error(float(analytic[id(p)].reshape(-1)[j]), numeric, floor))
        prev = out.get(name, (0.0, 0))
        out[name] = (max(prev[0], worst), prev[1] + len(picks))
    return out


def _readout(rng: np.random.Generator, t: Tensor) -> Tensor:
    """Random linear functional, so every output element matters."""
    w = rng.normal(size=t.shape)
    return tsum(mul(t, w))


def _p(rng: np.random.Generator, shape, name: str, scale: float = 1.0, offset: float = 0.0) -> Parameter:
    return Parameter(offset + scale * rng.normal(size=shape), name=name)


# ================= op checks =================
def _elementwise(rng):
    a, b = _p(rng, (3, 4), "a"), _p(rng, (4,), "b")
    pos = Parameter(np.abs(rng.normal(size=(3, 4))) + 0.5, name="pos")
    r1, r2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def f():
        t = (a + b) * a - div(a, pos) + power(pos, 1.7) + exp(mul(b, 0.3)) + tlog(pos) + sqrt(pos)
        return tsum(mul(t, r1)) + tsum(mul(relu(a - b), r2)) + tsum(-a)
    return [a, b, pos], f


def _power_exponent(rng):
    x = Parameter(np.abs(rng.normal(size=(5,))) + 0.5, name="x")
    e = Parameter(np.array(2.3), name="exponent")
    w = rng.normal(size=5)
    return [x, e], lambda: tsum(mul(power(x, e), w))


def _reductions(rng):
    x = _p(rng, (2, 3, 4), "x")
    w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(3, 2))

    def f():
        s = tsum(mul(tsum(x, axis=1), w1))
        m = tsum(mul(mean(transpose(x, (1, 0, 2)), axis=2), w2))
        return s + m + mean(x)
    return [x], f


def _shape_ops(rng):
    a, b = _p(rng, (2, 3), "a"), _p(rng, (2, 3), "b")

    def f():
        c = concat([a, b], axis=1)
        s = stack([a, b], axis=0)
        t = take(reshape(c, (3, 4)), (np.array([0, 2, 2]), np.array([1, 3, 0])))
        return _readout(np.random.default_rng(1), c) + _readout(np.random.default_rng(2), s) + tsum(mul(t, 1.5))
    return [a, b], f


def _matmul(rng):
    a, b, v = _p(rng, (3, 4), "a"), _p(rng, (4, 5), "b"), _p(rng, (4,), "v")
    r = rng.normal(size=(3, 5))
    return [a, b, v], lambda: tsum(mul(matmul(a, b), r)) + tsum(matmul(a, v))


def _softmaxes(rng):
    x = _p(rng, (3, 5), "x")
    r1, r2 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    return [x], lambda: tsum(mul(softmax(x, axis=1), r1)) + tsum(mul(log_softmax(x, axis=0), r2))


def _normalizers(rng):
    x = _p(rng, (4, 6), "x")
    r1, r2 = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    return [x], lambda: tsum(mul(layer_norm(x, axis=-1), r1)) + tsum(mul(l2_normalize(x, axis=-1), r2))


def _conv(rng):
    x, k = _p(rng, (6, 6, 2), "x"), _p(rng, (3, 3, 2, 3), "kernel", scale=0.3)
    r = rng.normal(size=(3, 3, 3))
    r1 = rng.normal(size=(6, 6, 3))
    return [x, k], lambda: tsum(mul(conv2d(x, k, stride=2, padding=1), r)) + tsum(mul(conv2d(x, k, padding=1), r1))


def _deconv(rng):
    x, k2, k4 = _p(rng, (3, 3, 2), "x"), _p(rng, (2, 2, 3, 2), "kernel2"), _p(rng, (4, 4, 3, 2), "kernel4")
    r = rng.normal(size=(6, 6, 3))
    return [x, k2, k4], lambda: tsum(mul(deconv2d(x, k2), r)) + tsum(mul(deconv2d(x, k4), r))


def _pool_upsample(rng):
    x = _p(rng, (4, 4, 2), "x")
    r1, r2 = rng.normal(size=(2, 2, 2)), rng.normal(size=(8, 8, 2))
    return [x], lambda: tsum(mul(max_pool2d(x, 2), r1)) + tsum(mul(upsample_nearest(x, 8, 8), r2))


# ================= head checks =================
def _attention(rng):
    agg = AggregatorParams.init(6, rng, prefix="agg")
    G = _p(rng, (3, 3, 6), "G")
    r = rng.normal(size=(3, 3, 6))
    return [G, agg.W_q, agg.W_k, agg.W_v, agg.W_restore], lambda: tsum(mul(attention_enhance(G, agg), r))


def _gem(rng):
    x = Parameter(np.abs(rng.normal(size=(3, 3, 4))) + 0.1, name="x")
    p = Parameter(np.array(3.0), name="p")
    r = rng.normal(size=4)
    return [x, p], lambda: tsum(mul(gem_pool(x, p), r))


def _global_descriptor(rng):
    agg = AggregatorParams.init(6, rng, prefix="agg")
    G = Parameter(np.abs(rng.normal(size=(3, 3, 6))) + 0.1, name="G")
    r = rng.normal(size=6)
    return [G, *agg.parameters()], lambda: tsum(mul(global_descriptor(G, agg), r))


def _projector(rng):
    proj = ProjectorParams.init((2, 4), 6, [6, 4], 2, rng)
    F = _p(rng, (2, 4, 6), "F_g0")
    r = rng.normal(size=4)
    return [F, *proj.parameters()], lambda: tsum(mul(project_ground(F, 1, proj).vec, r))


def _matching(rng):
    f, F = _p(rng, (5,), "f"), _p(rng, (3, 3, 5), "F_a")
    r = rng.normal(size=(3, 3))
    return [f, F], lambda: tsum(mul(match_level(f, F), r))


def _refine(rng):
    params = DecoderParams.init([4, 3], 2, rng)
    M, X, S = _p(rng, (2, 2), "M"), _p(rng, (2, 2, 4), "X"), _p(rng, (4, 4, 3), "skip")
    r = rng.normal(size=(4, 4, 3))
    rp = params.refine[0]
    return [M, X, S, rp.deconv, rp.conv], lambda: tsum(mul(refine_upsample(M, X, S, rp), r))


def _decoder(rng):
    params = DecoderParams.init([4, 3], 2, rng)
    levels = [_p(rng, (2, 2, 4), "F0"), _p(rng, (4, 4, 3), "level1")]
    descs = [_p(rng, (4,), "f0"), _p(rng, (3,), "f1")]
    r = rng.normal(size=(8, 8))

    def f():
        dist = decode_descriptors(descs, AerialPyramid(levels), params, 8)
        return tsum(mul(dist.D, r))
    return [*levels, *descs, *params.parameters()], f


# ================= loss checks =================
def _info_nce(rng):
    q, R = _p(rng, (5,), "q", 0.3), _p(rng, (4, 5), "refs", 0.3)
    tau = Temperature(0.5, name="tau")
    return [q, R, tau.log_tau], lambda: info_nce(q, R, 2, tau, label_smoothing=0.1)


def _retrieval(rng):
    G, A = _p(rng, (3, 5), "ground", 0.3), _p(rng, (3, 5), "aerial", 0.3)
    tau = Temperature(0.5, name="tau")
    return [G, A, tau.log_tau], lambda: retrieval_loss(G, A, tau, 0.1)


def _localization(rng):
    logits = _p(rng, (8, 8), "logits")
    D_gt = gaussian_target(8, (3, 5), 1.5)
    return [logits], lambda: localization_loss(reshape(softmax(reshape(logits, (64,))), (8, 8)), D_gt)


def _matching_loss(rng):
    Ms = [_p(rng, (2, 2), "M0"), _p(rng, (4, 4), "M1")]
    tau = Temperature(0.3, name="tau")
    D_gt = gaussian_target(8, (2, 6), 1.5)
    return [*Ms, tau.log_tau], lambda: matching_loss(Ms, D_gt, tau)


def _rerank_loss(rng):
    ds = [_p(rng, (4,), "f0"), _p(rng, (4,), "f1")]
    maps = [_p(rng, (2, 2, 4), "map0"), _p(rng, (2, 2, 4), "map1")]
    tau = Temperature(0.3, name="tau")
    return [*ds, *maps, tau.log_tau], lambda: rerank_loss(ds, maps, [(1, 6), (7, 2)], 8, tau)


def _total(rng):
    parts = {k: _p(rng, (), k) for k in ("L_D", "L_G", "L_M", "L_R")}
    w = LossWeights(2.0, 3.0, 0.5)
    return list(parts.values()), lambda: total_loss({k: mul(v, v) for k, v in parts.items()}, w)


OP_CHECKS: Dict[str, Check] = {
    "op.elementwise": _elementwise,
    "op.power": _power_exponent,
    "op.reductions": _reductions,
    "op.shape": _shape_ops,
    "op.matmul": _matmul,
    "op.softmax": _softmaxes,
    "op.normalize": _normalizers,
    "op.conv2d": _conv,
    "op.deconv2d": _deconv,
    "op.pool_upsample": _pool_upsample,
    "head.attention": _attention,
    "head.gem": _gem,
    "head.global_descriptor": _global_descriptor,
    "head.projector": _projector,
    "head.match_level": _matching,
    "head.refine": _refine,
    "head.decoder": _decoder,
    "loss.info_nce": _info_nce,
    "loss.retrieval": _retrieval,
    "loss.localization": _localization,
    "loss.matching": _matching_loss,
    "loss.rerank": _rerank_loss,
    "loss.total": _total,
}


# ================= composite =================
def composite_case(cfg: PipelineConfig, rng: np.random.Generator, batch: int = 2):
    """Tiny model and random images; loss = the full weighted objective."""
    model = GeoUnifyModel(cfg, rng)
    L, fx = cfg.tile_size, cfg.fixture
    grounds = [rng.normal(size=(fx.ground_height, fx.ground_width, IMAGE_CHANNELS)) for _ in range(batch)]
    aerials = [rng.normal(size=(L, L, IMAGE_CHANNELS)) for _ in range(batch)]
    step = cfg.tile_size // cfg.model.level_size(cfg.model.n_levels - 1)
    lo, hi = L // 4, 3 * L // 4
    pixels = [(int(rng.integers(lo, hi)) // step * step, int(rng.integers(lo, hi)) // step * step)
              for _ in range(batch)]
    weights = LossWeights(cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma)

    def loss_fn() -> Tensor:
        samples = []
        for g, a, px in zip(grounds, aerials, pixels):
            F_g0, G_g = model.encode_ground(g)
            pyr, G_a = model.encode_aerial(a)
            samples.append(Sample(F_g0, G_g, pyr, G_a, px))
        return total_loss(sample_losses(model, samples, cfg), weights)

    return model, loss_fn


def run_suite(seed: int = 0, coords: int = 10, composite_coords: int = 20, float32: bool = False,
              cfg: Optional[PipelineConfig] = None, only: Optional[Sequence[str]] = None) -> List[GradCheckResult]:
    """Run the named checks (all by default; `only` filters by name prefix, e.g. "op.", "composite")."""
    dtype = np.float32 if float32 else np.float64
    op_tol = COMPOSITE_TOL if float32 else OP_TOL
    rng = np.random.default_rng(seed)
    results: List[GradCheckResult] = []

    def wanted(name: str) -> bool:
        return not only or any(name.startswith(o) for o in only)

    t0 = time.perf_counter()
    with precision(dtype):
        for name, build in OP_CHECKS.items():
            if not wanted(name):
                continue
            params, fn = build(rng)
            errs = check_gradients(params, fn, rng, coords=coords, step=STEP[dtype], floor=REL_FLOOR[dtype])
            results.append(GradCheckResult(name, max(e for e, _ in errs.values()),
                                           sum(n for _, n in errs.values()), op_tol))

        if wanted("composite"):
            cfg = cfg or preset_config("tiny")
            model, fn = composite_case(cfg, rng)
            errs = check_gradients(list(model.parameters().values()), fn, rng, coords=composite_coords,
                                   step=COMPOSITE_STEP[dtype], floor=COMPOSITE_FLOOR[dtype])
            for group, names in parameter_groups(model).items():
                sel = [errs[n] for n in names if n in errs]
                results.append(GradCheckResult(f"composite.{group}", max(e for e, _ in sel),
                                               sum(n for _, n in sel), COMPOSITE_TOL))
    log.debug("gradient suite: %d groups in %.1fs", len(results), time.perf_counter() - t0)
    return results


def format_results(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.group) for r in results) if results else 10
    lines = [f"{'group':<{width}}  {'max_rel_err':>11}  {'coords':>6}  {'tol':>6}  status"]
    for r in results:
        lines.append(f"{r.group:<{width}}  {r.max_rel_err:11.3e}  {r.n:6d}  {r.tol:6.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
