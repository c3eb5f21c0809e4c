"""
Training loop for the joint objective.

CLI
  python -m geounify train --data data/fixture --out runs/desk
  python -m geounify train --data data/fixture --out runs/desk --resume runs/desk/checkpoints/step_000040.npz

Mini-batches draw from the "train" split; every batch holds distinct
positive tiles so in-batch negatives are true negatives. Plain SGD with
momentum and cosine decay; the GeM powers are clamped to [0.5, 10] after
each update. Checkpoints (parameters, momentum, step/epoch/position, the
epoch permutation, generator state) are written each epoch and every
`train.checkpoint_every` steps; resuming from one replays the rest of the
run bit-exactly. A non-finite loss restores the last checkpoint and raises
DivergenceError naming the component.

Modes (train.mode): joint | global_only (L_G only) | detail_only (L_D, L_M, L_R).
"""

from __future__ import annotations
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from .config import PipelineConfig, write_snapshot
from .dataset import Dataset
from .decoder import AerialPyramid, decode_descriptors
from .errors import DatasetError, DivergenceError, FormatError, NumericalError
from .log import get_logger
from .losses import (
    LossWeights,
    breakdown,
    gaussian_target,
    localization_loss,
    matching_loss,
    rerank_loss,
    retrieval_loss,
    total_loss,
)
from .model import GeoUnifyModel
from .representation import project_all
from .tensor import Tensor, backward, mean, stack

log = get_logger(__name__)


# ================= state =================
@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    position: int = 0                      # next batch inside the epoch
    perm: Optional[np.ndarray] = None      # epoch order over train queries
    rng_state: Optional[dict] = None
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: Path, model: GeoUnifyModel, state: TrainState, rng: np.random.Generator) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state().items()}
    arrays.update({f"vel/{k}": v for k, v in state.velocity.items()})
    if state.perm is not None:
        arrays["perm"] = state.perm
    meta = {"step": state.step, "epoch": state.epoch, "position": state.position,
            "rng_state": rng.bit_generator.state}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path: Path, model: GeoUnifyModel) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing checkpoint: {path}")
    with np.load(path) as z:
        try:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: not a training checkpoint ({e})") from None
        model.load_state({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        vel = {k[len("vel/"):]: z[k].copy() for k in z.files if k.startswith("vel/")}
        perm = z["perm"].copy() if "perm" in z.files else None
    return TrainState(step=int(meta["step"]), epoch=int(meta["epoch"]), position=int(meta["position"]),
                      perm=perm, rng_state=meta["rng_state"], velocity=vel)


# ================= batching / schedule =================
def make_batches(order: Sequence[str], tile_of: Mapping[str, str], batch_size: int) -> List[List[str]]:
    """Greedy packing in order; a query whose tile is already in the batch waits for the next one."""
    batches, pending = [], list(order)
    while pending:
        batch, used, rest = [], set(), []
        for q in pending:
            if len(batch) < batch_size and tile_of[q] not in used:
                batch.append(q)
                used.add(tile_of[q])
            else:
                rest.append(q)
        batches.append(batch)
        pending = rest
    return batches


def lr_at(cfg: PipelineConfig, step: int, total_steps: int) -> float:
    lr0 = cfg.train.learning_rate
    if cfg.train.schedule == "constant" or total_steps <= 0:
        return lr0
    t = min(step, total_steps) / total_steps
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t))


# ================= losses for one batch =================
class _ComponentFailure(Exception):
    def __init__(self, component: str, cause: Exception):
        super().__init__(f"{component}: {cause}")
        self.component = component


@contextmanager
def _component(name: str):
    try:
        yield
    except NumericalError as e:
        raise _ComponentFailure(name, e) from e


@dataclass
class Sample:
    """Features of one (query, positive tile) pair."""
    F_g0: Tensor
    G_g: Tensor
    pyramid: AerialPyramid
    G_a: Tensor
    gt_pixel: Tuple[int, int]


def sample_losses(model: GeoUnifyModel, samples: Sequence[Sample], cfg: PipelineConfig) -> Dict[str, Tensor]:
    """Loss components for one batch under cfg.train.mode and the loss weights."""
    mode, lo, L = cfg.train.mode, cfg.loss, cfg.tile_size
    need_g = mode in ("joint", "global_only") and lo.alpha > 0
    need_d = mode in ("joint", "detail_only")
    need_m = need_d and lo.beta > 0
    need_r = need_d and lo.gamma > 0

    vg, va, d0, maps0, l_d, l_m = [], [], [], [], [], []
    for s in samples:
        if need_g:
            with _component("L_G"):
                vg.append(model.ground_descriptor(s.G_g))
                va.append(model.aerial_descriptor(s.G_a))
        if need_d:
            D_gt = gaussian_target(L, s.gt_pixel, cfg.sigma_px)
            with _component("L_D"):
                descs = project_all(s.F_g0, model.proj)
                dist = decode_descriptors(descs, s.pyramid, model.decoder, L)
                l_d.append(localization_loss(dist, D_gt))
            if need_m:
                with _component("L_M"):
                    l_m.append(matching_loss(dist.m_levels, D_gt, model.tau("matching")))
            d0.append(descs[0])
            maps0.append(s.pyramid.levels[0])

    parts: Dict[str, Tensor] = {}
    if need_g:
        with _component("L_G"):
            parts["L_G"] = retrieval_loss(vg, va, model.tau("retrieval"), lo.label_smoothing)
    if need_d:
        with _component("L_D"):
            parts["L_D"] = mean(stack(l_d))
    if need_m:
        with _component("L_M"):
            parts["L_M"] = mean(stack(l_m))
    if need_r:
        with _component("L_R"):
            parts["L_R"] = rerank_loss(d0, maps0, [s.gt_pixel for s in samples], L, model.tau("rerank"))
    return parts


def batch_losses(model: GeoUnifyModel, ds: Dataset, qids: Sequence[str], cfg: PipelineConfig) -> Dict[str, Tensor]:
    samples = []
    for qid in qids:
        q = ds.query(qid)
        with _component("forward"):
            F_g0, G_g = model.query_features(ds, qid)
            pyr, G_a = model.tile_features(ds, q.gt_tile)
        samples.append(Sample(F_g0, G_g, pyr, G_a, tuple(q.gt_pixel)))
    return sample_losses(model, samples, cfg)


# ================= update =================
def sgd_update(model: GeoUnifyModel, state: TrainState, lr: float, momentum: float, max_norm: float) -> float:
    params = model.parameters()
    sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise _ComponentFailure("gradient", NumericalError(f"gradient norm {norm}"))
    scale = max_norm / norm if max_norm > 0 and norm > max_norm else 1.0
    for name, p in params.items():
        v = state.velocity.get(name)
        g = p.grad * scale
        v = g if v is None else momentum * v + g
        state.velocity[name] = v.astype(p.value.dtype)
        p.assign(p.value - lr * state.velocity[name])
    model.clamp()
    return norm


def train_step(model: GeoUnifyModel, ds: Dataset, qids: Sequence[str], cfg: PipelineConfig,
               state: TrainState, lr: float) -> Dict[str, float]:
    model.zero_grad()
    parts = batch_losses(model, ds, qids, cfg)
    lo = cfg.loss
    for name, part in parts.items():
        v = np.asarray(part.data if isinstance(part, Tensor) else part, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise _ComponentFailure(name, NumericalError(f"{name} is not finite"))
    with _component("total"):
        total = total_loss(parts, LossWeights(lo.alpha, lo.beta, lo.gamma))
    if total.requires_grad:
        backward(total)
        with _component("update"):
            sgd_update(model, state, lr, cfg.train.momentum, cfg.train.max_grad_norm)
    rec = {k: 0.0 for k in ("L_D", "L_G", "L_M", "L_R")}
    rec.update(breakdown(parts))
    rec["total"] = float(total.data)
    return rec


# ================= loop =================
def _trim_log(path: Path, upto_step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip() and json.loads(ln)["step"] <= upto_step]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def train(cfg: PipelineConfig, ds: Dataset, out_dir: Path, resume: Optional[Path] = None) -> Tuple[GeoUnifyModel, TrainState]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out_dir)
    rng = np.random.default_rng(cfg.seed)
    model = GeoUnifyModel(cfg, rng)
    log_path = out_dir / "train_log.jsonl"
    last_ckpt: Optional[Path] = None
    if resume:
        state = load_checkpoint(Path(resume), model)
        rng.bit_generator.state = state.rng_state
        _trim_log(log_path, state.step)
        last_ckpt = Path(resume)
        log.info("resumed at step %d (epoch %d, batch %d) from %s", state.step, state.epoch, state.position, resume)
    else:
        state = TrainState()
        log_path.write_text("", encoding="utf-8")

    train_ids = ds.query_ids("train") or ds.query_ids()
    if not train_ids:
        raise DatasetError(f"{ds.root}: no queries to train on")
    tile_of = {q: ds.query(q).gt_tile for q in train_ids}
    B, E = cfg.train.batch_size, cfg.train.epochs
    ckpt_dir = out_dir / "checkpoints"
    counters = {"steps": 0, "checkpoints": 0}

    with logging_redirect_tqdm(), open(log_path, "a", encoding="utf-8") as flog:
        while state.epoch < E:
            if state.perm is None:
                state.perm = rng.permutation(len(train_ids))
            batches = make_batches([train_ids[i] for i in state.perm], tile_of, B)
            bar = tqdm(total=len(batches), initial=state.position, desc=f"epoch {state.epoch + 1}/{E}", unit="batch")
            while state.position < len(batches):
                # cosine over epoch progress; the batch count depends on the permutation
                lr = lr_at(cfg, state.epoch * len(batches) + state.position, E * len(batches))
                try:
                    rec = train_step(model, ds, batches[state.position], cfg, state, lr)
                except _ComponentFailure as e:
                    if last_ckpt is not None:
                        load_checkpoint(last_ckpt, model)
                    raise DivergenceError(e.component, state.step + 1,
                                          str(last_ckpt) if last_ckpt else None) from e
                state.step += 1
                state.position += 1
                counters["steps"] += 1
                rec.update({"step": state.step, "epoch": state.epoch, "lr": lr,
                            "tau": model.tau("retrieval").value,
                            "p": float(model.aerial_agg.p.value), "p_ground": float(model.ground_agg.p.value)})
                flog.write(json.dumps(rec, sort_keys=True) + "\n")
                flog.flush()
                bar.update(1)
                bar.set_postfix(loss=f"{rec['total']:.3f}")
                every = cfg.train.checkpoint_every
                if every and state.step % every == 0:
                    last_ckpt = save_checkpoint(ckpt_dir / f"step_{state.step:06d}.npz", model, state, rng)
                    counters["checkpoints"] += 1
            bar.close()
            state.epoch += 1
            state.position = 0
            state.perm = None
            last_ckpt = save_checkpoint(ckpt_dir / f"epoch_{state.epoch:03d}.npz", model, state, rng)
            counters["checkpoints"] += 1

    model.save(out_dir / "model.npz")
    log.info("[OK] trained steps=%d checkpoints=%d total_steps=%d -> %s",
             counters["steps"], counters["checkpoints"], state.step, out_dir / "model.npz")
    return model, state


def read_log(path: Path) -> List[Dict[str, float]]:
    return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
