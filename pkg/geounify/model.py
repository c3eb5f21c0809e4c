"""Parameter bundle: both encoder branches, aggregators, projectors, decoder, temperatures."""

from __future__ import annotations
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .config import PipelineConfig, stage_for_level
from .decoder import AerialPyramid, DecoderParams
from .encoder import Encoded, ToyEncoderParams, toy_encode
from .errors import DatasetError, DimensionError, FormatError
from .losses import Temperature
from .representation import AggregatorParams, ProjectorParams, check_schedule, global_descriptor
from .tensor import Parameter, Tensor

IMAGE_CHANNELS = 3
TAU_KINDS = ("retrieval", "matching", "rerank")


class GeoUnifyModel:
    def __init__(self, cfg: PipelineConfig, rng: np.random.Generator):
        m, fx = cfg.model, cfg.fixture
        self.cfg = cfg
        c0 = m.level_channels[0]
        self.ground_enc = ToyEncoderParams.init(IMAGE_CHANNELS, m.encoder_channels, c0, rng,
                                                m.head_stride, prefix="ground_enc")
        self.aerial_enc = ToyEncoderParams.init(IMAGE_CHANNELS, m.encoder_channels, c0, rng,
                                                m.head_stride, prefix="aerial_enc")
        self.ground_agg = AggregatorParams.init(c0, rng, m.gem_p, m.aggregator, prefix="ground_agg")
        self.aerial_agg = AggregatorParams.init(c0, rng, m.gem_p, m.aggregator, prefix="aerial_agg")
        down = 2 ** len(m.encoder_channels) * m.head_stride
        self.ground_hw = (fx.ground_height // down, fx.ground_width // down)
        self.proj = ProjectorParams.init(self.ground_hw, c0, m.level_channels, m.projector_reduce, rng)
        check_schedule(self.proj, m.level_channels)
        self.decoder = DecoderParams.init(m.level_channels, m.deconv_kernel, rng)
        kinds = ("shared",) if cfg.loss.shared_tau else TAU_KINDS
        self.temps = {k: Temperature(m.tau_init, name=f"tau.{k}") for k in kinds}

    # ---- parameters ----
    def parameters(self) -> "OrderedDict[str, Parameter]":
        groups = [self.ground_enc.parameters(), self.aerial_enc.parameters(),
                  self.ground_agg.parameters(), self.aerial_agg.parameters(),
                  self.proj.parameters(), self.decoder.parameters()]
        groups += [t.parameters() for _, t in sorted(self.temps.items())]
        out: "OrderedDict[str, Parameter]" = OrderedDict()
        for group in groups:
            for p in group:
                if p.name in out:
                    raise DimensionError(f"duplicate parameter name {p.name}")
                out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def clamp(self) -> None:
        self.ground_agg.clamp()
        self.aerial_agg.clamp()

    def tau(self, kind: str) -> Temperature:
        return self.temps["shared"] if "shared" in self.temps else self.temps[kind]

    # ---- forward pieces ----
    def pyramid_from(self, enc: Encoded) -> AerialPyramid:
        levels = [enc.F0]
        for lvl in range(1, self.cfg.model.n_levels):
            levels.append(enc.stages[stage_for_level(self.cfg, lvl)])
        return AerialPyramid(levels)

    def encode_aerial(self, image) -> Tuple[AerialPyramid, Tensor]:
        enc = toy_encode(image, self.aerial_enc, "aerial")
        return self.pyramid_from(enc), enc.G

    def encode_ground(self, image) -> Tuple[Tensor, Tensor]:
        enc = toy_encode(image, self.ground_enc, "ground")
        return enc.F0, enc.G

    def tile_features(self, ds, tid: str) -> Tuple[AerialPyramid, Tensor]:
        """Pyramid and semantic map of a tile: read from a features dataset or encoded."""
        if ds.kind == "features":
            levels = [Tensor(ds.tile_array(tid, "F0"))]
            levels += [Tensor(ds.tile_array(tid, f"level{l}")) for l in range(1, self.cfg.model.n_levels)]
            return AerialPyramid(levels), Tensor(ds.tile_array(tid, "G"))
        return self.encode_aerial(ds.tile_array(tid))

    def query_features(self, ds, qid: str) -> Tuple[Tensor, Tensor]:
        if ds.kind == "features":
            return Tensor(ds.query_array(qid, "F0")), Tensor(ds.query_array(qid, "G"))
        return self.encode_ground(ds.query_array(qid))

    def aerial_descriptor(self, G_a) -> Tensor:
        return global_descriptor(G_a, self.aerial_agg)

    def ground_descriptor(self, G_g) -> Tensor:
        return global_descriptor(G_g, self.ground_agg)

    # ---- persistence ----
    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise FormatError(f"checkpoint lacks parameters {missing[:5]}")
        for k, p in params.items():
            p.assign(state[k])

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **self.state())
        return path

    @classmethod
    def load(cls, path: Union[str, Path], cfg: PipelineConfig) -> "GeoUnifyModel":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"missing model file: {path}")
        model = cls(cfg, np.random.default_rng(cfg.seed))
        with np.load(path) as z:
            model.load_state({k: z[k] for k in z.files})
        return model


def parameter_groups(model: GeoUnifyModel) -> Dict[str, List[str]]:
    """Parameter names grouped by their prefix (ground_enc, dec, tau, ...)."""
    groups: Dict[str, List[str]] = {}
    for name in model.parameters():
        groups.setdefault(name.split(".", 1)[0], []).append(name)
    return groups
