"""Global completion: fuse, upsample, regress displacements."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, Encoder, Linear, Module, PointTransformer, SnowflakeUpsample
from .tensor import Tensor


@dataclass
class GcmOutput:
    p_g: Tensor
    h_g: Tensor
    f_g: Tensor | None
    d_l: Tensor


class GlobalCompletion(Module):
    def __init__(self, d: int, ratio: int, rng: np.random.Generator, n_attn: int = 8,
                 n_group: int = 16):
        self.d = d
        self.ratio = ratio
        self.coord_mlp = MLP(3, [d, d], rng)
        self.fuse = Linear(3 * d, d, rng)
        self.transformer = PointTransformer(d, rng, n=n_attn)
        self.upsample = SnowflakeUpsample(d, ratio, rng)
        self.head = MLP(d, [d, 3], rng, zero_last=True)
        self.encoder = Encoder(d, rng, n_group=n_group, n_attn=n_attn)

    def __call__(self, p_prev: Tensor, f_global: Tensor, h_prev: Tensor | None = None,
                 encode: bool = True) -> GcmOutput:
        """``f_global`` is the previous level's shared-encoder vector (or the level-0
        scene vector on level 1); ``h_prev`` the previous semantic hidden rows."""
        m = len(p_prev)
        if h_prev is None:
            h_prev = Tensor(np.zeros((m, self.d)))
        elif h_prev.shape[0] != m:
            raise ValueError(f"gcm: {m} points but {h_prev.shape[0]} hidden rows")
        feats = T.concat([self.coord_mlp(p_prev), T.broadcast_rows(f_global, m), h_prev], axis=1)
        feats = self.transformer(p_prev, self.fuse(feats))
        h_g = self.upsample(feats)
        d_l = self.head(h_g)
        p_g = T.repeat_rows(p_prev, self.ratio) + d_l
        f_g = self.encoder(p_g) if encode else None
        return GcmOutput(p_g=p_g, h_g=h_g, f_g=f_g, d_l=d_l)
