"""
Toy convolutional encoder standing in for the backbone.

Per branch (ground, aerial; weights never shared between branches):
  shared stages: n x [3x3 conv, stride 2, pad 1, ReLU]   -> F^n ... F^1
  F-head: 3x3 conv, stride head_stride (linear)           -> F^0  (detail)
  S-head: 3x3 conv, stride head_stride, ReLU              -> G    (semantic)
The two heads are separate Parameter objects with the same shapes.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Parameter, Tensor, as_tensor, conv2d, relu

BRANCHES = ("ground", "aerial")


@dataclass
class ToyEncoderParams:
    stages: List[Parameter]
    f_head: Parameter
    s_head: Parameter
    head_stride: int = 1

    @classmethod
    def init(cls, in_channels: int, stage_channels: Sequence[int], head_channels: int,
             rng: np.random.Generator, head_stride: int = 1, prefix: str = "enc") -> "ToyEncoderParams":
        stages, c = [], in_channels
        for i, co in enumerate(stage_channels):
            stages.append(Parameter(rng.normal(0, np.sqrt(2.0 / (9 * c)), (3, 3, c, co)),
                                    name=f"{prefix}.stage{i + 1}"))
            c = co
        scale = np.sqrt(1.0 / (9 * c))
        f_head = Parameter(rng.normal(0, scale, (3, 3, c, head_channels)), name=f"{prefix}.f_head")
        s_head = Parameter(rng.normal(0, scale, (3, 3, c, head_channels)), name=f"{prefix}.s_head")
        return cls(stages, f_head, s_head, head_stride)

    @property
    def in_channels(self) -> int:
        return self.stages[0].shape[2]

    def parameters(self) -> List[Parameter]:
        return list(self.stages) + [self.f_head, self.s_head]


@dataclass
class Encoded:
    stages: List[Tensor]   # stage outputs, finest first
    F0: Tensor             # detail map
    G: Tensor              # semantic map


def toy_encode(image, params: ToyEncoderParams, branch: str) -> Encoded:
    if branch not in BRANCHES:
        raise DimensionError(f"unknown branch '{branch}' (expected one of {BRANCHES})")
    x = as_tensor(image)
    if x.ndim != 3 or x.shape[2] != params.in_channels:
        raise DimensionError(f"{branch} image {x.shape} does not match encoder input channels "
                             f"{params.in_channels}")
    outs = []
    for k in params.stages:
        if x.shape[0] % 2 or x.shape[1] % 2:
            raise DimensionError(f"{branch} feature map {x.shape[:2]} is not divisible by 2")
        x = relu(conv2d(x, k, stride=2, padding=1))
        outs.append(x)
    s = params.head_stride
    F0 = conv2d(x, params.f_head, stride=s, padding=1)
    G = relu(conv2d(x, params.s_head, stride=s, padding=1))
    return Encoded(outs, F0, G)
