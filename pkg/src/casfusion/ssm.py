"""Semantic segmentation by regressing per-point label transitions.

Label rows are class logits; the regressed transition is added in logit space
to the duplicated parent rows, so softmax stays well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, AttentionFuse, EdgeConv, Linear, Module, PointTransformer, SnowflakeUpsample
from .tensor import Tensor


@dataclass
class SsmOutput:
    l_s: Tensor
    h_s: Tensor


class SemanticSegmentation(Module):
    def __init__(self, d: int, num_classes: int, ratio: int, rng: np.random.Generator,
                 n_edge: int = 8, n_attn: int = 8, tokens: int = 4):
        self.d = d
        self.num_classes = num_classes
        self.ratio = ratio
        self.tokens = tokens
        self.edge = EdgeConv(num_classes, [d, d], rng, n=n_edge)
        self.scene_tokens = Linear(d, tokens * d, rng)
        self.fuse = AttentionFuse(d, rng)
        self.coarse = MLP(d + num_classes, [d, d], rng)
        self.upsample = SnowflakeUpsample(d, ratio, rng)
        self.label_proj = Linear(num_classes, d, rng)
        self.mix = Linear(3 * d, d, rng)
        self.transformer = PointTransformer(d, rng, n=n_attn)
        self.head = MLP(d, [d, num_classes], rng, zero_last=True)

    def __call__(self, l_prev: Tensor, f_g: Tensor, h_g: Tensor, points: Tensor) -> SsmOutput:
        m, c = l_prev.shape
        if c != self.num_classes:
            raise ValueError(f"ssm expects {self.num_classes} classes, got {c}")
        if h_g.shape[0] != self.ratio * m or len(points) != self.ratio * m:
            raise ValueError(f"ssm: {m} parent rows x{self.ratio} vs {h_g.shape[0]} hidden rows")
        f_l = self.edge(l_prev)
        scene = T.reshape(self.scene_tokens(f_g), (self.tokens, self.d))
        fused = self.fuse(f_l, scene)
        coarse = self.coarse(T.concat([fused, l_prev], axis=1))
        up = self.upsample(coarse)
        dup = T.repeat_rows(l_prev, self.ratio)
        mixed = self.mix(T.concat([up, h_g, self.label_proj(dup)], axis=1))
        h_s = self.transformer(points, mixed)
        return SsmOutput(l_s=dup + self.head(h_s), h_s=h_s)
