"""
Command-line surface.

  python -m geounify fixtures [--data DIR] [--force] [--adversarial] [--check-oracle]
  python -m geounify encode   [--data DIR] [--model PATH] [--force]
  python -m geounify index build [--data DIR] [--model PATH] [--index PATH]
  python -m geounify index query --query QID [--k K] [--index PATH]
  python -m geounify train    [--data DIR] [--resume CKPT] [--mode MODE] [--epochs N]
  python -m geounify run      [--data DIR] [--k K] [--no-rerank] [--heatmaps] [--split S]
  python -m geounify eval
  python -m geounify gradcheck [--f32] [--coords N] [--only PREFIX ...]

Global flags (any position): --config, --preset, --seed, --out, -v.
Exit codes: 0 ok, 1 user error (bad flag, config, data, query), 2 internal error.
"""

from __future__ import annotations
import argparse
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig, load_config, write_snapshot
from .dataset import Dataset, export_features
from .errors import DatasetError, UserError
from .fixtures import FixtureSpec, generate_fixtures, oracle_check
from .gradcheck import format_results, run_suite
from .index import RetrievalIndex
from .log import get_logger, setup_logging
from .model import GeoUnifyModel
from .pipeline import build_index, evaluate_run, query_index, run_pipeline
from .train import train

log = get_logger("cli")

INDEX_NAME = "index.guix"
MODEL_NAME = "model.npz"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1, not argparse's 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="YAML config (default: $GEOUNIFY_CONFIG, then ./config.yaml)")
    p.add_argument("--preset", help="named preset applied under the config file (desk, full, tiny)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="output directory (default: paths.out)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging and full tracebacks")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="geounify", description="Cross-view geo-localization engine", parents=[common])
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("fixtures", parents=[common], help="generate the synthetic fixture")
    p.add_argument("--data", help="fixture directory (default: paths.data)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--adversarial", action="store_true", help="add block-shuffled decoy tiles")
    p.add_argument("--check-oracle", dest="check_oracle", action="store_true",
                   help="verify planted features decode onto every GT pixel")

    p = sub.add_parser("encode", parents=[common], help="export encoder features as a features manifest")
    p.add_argument("--data", help="images dataset (default: paths.data)")
    p.add_argument("--model", help=f"model file (default: <out>/{MODEL_NAME})")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")

    p = sub.add_parser("index", parents=[common], help="build or query the retrieval index")
    isub = p.add_subparsers(dest="index_command", metavar="action")
    isub.required = True
    for name in ("build", "query"):
        q = isub.add_parser(name, parents=[common])
        q.add_argument("--data", help="dataset (default: paths.data)")
        q.add_argument("--model", help=f"model file (default: <out>/{MODEL_NAME})")
        q.add_argument("--index", help=f"index file (default: <out>/{INDEX_NAME})")
        if name == "query":
            q.add_argument("--query", required=True, help="query id")
            q.add_argument("--k", type=int, help="neighbours (default: retrieval.k)")

    p = sub.add_parser("train", parents=[common], help="train on the 'train' split")
    p.add_argument("--data", help="dataset (default: paths.data)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--mode", choices=("joint", "global_only", "detail_only"), help="override train.mode")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("run", parents=[common], help="retrieval -> re-rank -> localization on one split")
    p.add_argument("--data", help="dataset (default: paths.data)")
    p.add_argument("--model", help=f"model file (default: <out>/{MODEL_NAME})")
    p.add_argument("--index", help="prebuilt index (default: built from the dataset)")
    p.add_argument("--k", type=int, help="candidates to re-rank (default: retrieval.k)")
    p.add_argument("--no-rerank", dest="no_rerank", action="store_true", help="keep the retrieval top-1")
    p.add_argument("--heatmaps", action="store_true", help="write D per query (GUTN + PGM)")
    p.add_argument("--split", default="test", help="train | test | all (default: test)")

    sub.add_parser("eval", parents=[common], help="rebuild the report of a stored run")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--f32", action="store_true", help="run at float32 instead of float64")
    p.add_argument("--coords", type=int, default=10, help="coordinates per parameter (ops)")
    p.add_argument("--only", nargs="+", help="check-name prefixes, e.g. op. loss. composite")
    return ap


# ================= helpers =================
def _config(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, object] = {"seed": getattr(args, "seed", None)}
    if getattr(args, "out", None):
        overrides["paths.out"] = args.out
    if getattr(args, "data", None):
        overrides["paths.data"] = args.data
    if getattr(args, "k", None) is not None:
        overrides["retrieval.k"] = args.k
    if getattr(args, "no_rerank", False):
        overrides["retrieval.rerank"] = False
    if getattr(args, "adversarial", False):
        overrides["fixture.adversarial"] = True
    if getattr(args, "mode", None):
        overrides["train.mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    return load_config(getattr(args, "config", None), overrides, preset=getattr(args, "preset", None))


def _out(cfg: PipelineConfig) -> Path:
    return Path(cfg.paths["out"])


def _model(cfg: PipelineConfig, path: Optional[str]) -> GeoUnifyModel:
    p = Path(path) if path else _out(cfg) / MODEL_NAME
    if path and not p.exists():
        raise DatasetError(f"missing model file: {p}")
    if p.exists():
        return GeoUnifyModel.load(p, cfg)
    log.info("no model at %s; using the seeded initialisation", p)
    return GeoUnifyModel(cfg, np.random.default_rng(cfg.seed))


def _dataset(cfg: PipelineConfig) -> Dataset:
    return Dataset.load(cfg.paths["data"])


def _index(cfg: PipelineConfig, path: Optional[str], model: GeoUnifyModel, ds: Dataset) -> RetrievalIndex:
    if path:
        return RetrievalIndex.load(path)
    return build_index(model, ds, cfg.workers())


# ================= commands =================
def cmd_fixtures(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    root = Path(cfg.paths["data"])
    generate_fixtures(FixtureSpec.from_config(cfg), root, force=args.force)
    if args.check_oracle:
        misses = oracle_check(Dataset.load(root), cfg)
        if misses:
            log.error("oracle decode missed the GT pixel for %d queries: %s", len(misses), misses[:10])
            return 2
    return 0


def cmd_encode(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    ds = _dataset(cfg)
    out = _out(cfg)
    path = export_features(ds, _model(cfg, args.model), out, force=args.force)
    write_snapshot(cfg, out)
    log.info("[OK] encode: tiles=%d queries=%d -> %s", len(ds.tiles), len(ds.queries), path)
    return 0


def cmd_index(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    ds = _dataset(cfg)
    model = _model(cfg, args.model)
    path = Path(args.index) if args.index else _out(cfg) / INDEX_NAME
    if args.index_command == "build":
        build_index(model, ds, cfg.workers()).save(path)
        log.info("[OK] index saved to %s", path)
        return 0
    index = RetrievalIndex.load(path)
    k = args.k if args.k is not None else cfg.retrieval.k
    for rank, c in enumerate(query_index(index, model, ds, args.query, k), 1):
        print(f"{rank}\t{c.entry.image_id}\t{c.score:.6f}")
    return 0


def cmd_train(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    train(cfg, _dataset(cfg), _out(cfg), resume=Path(args.resume) if args.resume else None)
    return 0


def cmd_run(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    ds = _dataset(cfg)
    model = _model(cfg, args.model)
    index = _index(cfg, args.index, model, ds)
    report = run_pipeline(cfg, ds, index, model, _out(cfg), split=args.split, heatmaps=args.heatmaps)
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    sys.stdout.write(evaluate_run(_out(cfg)).to_text())
    return 0


def cmd_gradcheck(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    results = run_suite(seed=cfg.seed, coords=args.coords, float32=args.f32, only=args.only)
    print(format_results(results))
    failed = [r.group for r in results if not r.passed]
    if failed:
        log.error("%d of %d gradient groups above tolerance: %s", len(failed), len(results), failed)
        return 2
    log.info("[OK] gradcheck: %d groups within tolerance", len(results))
    return 0


COMMANDS = {
    "fixtures": cmd_fixtures,
    "encode": cmd_encode,
    "index": cmd_index,
    "train": cmd_train,
    "run": cmd_run,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return int(e.code or 0)
    verbose = bool(getattr(args, "verbose", False))
    setup_logging(verbose)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except UserError as e:
        print(f"[error] {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("[error] interrupted", file=sys.stderr)
        return 2
    except Exception as e:
        if verbose:
            traceback.print_exc()
        print(f"[error] {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))
