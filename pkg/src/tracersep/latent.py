"""Compact latent priors: per-tracer extraction and feature modulation.

The encoder compresses an image pair into one d-vector per tracer (a d x N
matrix overall). The same trunk architecture, with separate weights and a
single head, produces the inference-time condition vector from the dual
image and its masked texture.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class LpebConfig:
    width: int = 64
    res_blocks: int = 2
    d: int = 256
    n_heads: int = 2
    unshuffle: int = 2
    slope: float = 0.1

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("channel width must be positive")
        if self.n_heads < 1:
            raise ValueError("need at least one head")


class PriorEncoder:
    """Conv trunk + global average pool + one linear head per tracer."""

    def __init__(self, cfg: LpebConfig, rng: np.random.Generator, prefix: str):
        self.cfg = cfg
        w = cfg.width
        in_ch = 2 * cfg.unshuffle ** 2
        self.conv_in = T.normal_param(rng, (3, 3, in_ch, w), (2.0 / (9 * in_ch)) ** 0.5,
                                      f"{prefix}.conv_in.k")
        self.conv_in_b = T.zeros_param((w,), f"{prefix}.conv_in.b")
        self.res = []
        for i in range(cfg.res_blocks):
            std = (2.0 / (9 * w)) ** 0.5
            self.res.append((
                T.normal_param(rng, (3, 3, w, w), std, f"{prefix}.res{i}.k1"),
                T.zeros_param((w,), f"{prefix}.res{i}.b1"),
                T.normal_param(rng, (3, 3, w, w), std, f"{prefix}.res{i}.k2"),
                T.zeros_param((w,), f"{prefix}.res{i}.b2"),
            ))
        self.heads = []
        for i in range(cfg.n_heads):
            self.heads.append((
                T.normal_param(rng, (w, cfg.d), (1.0 / w) ** 0.5, f"{prefix}.head{i}.w"),
                T.zeros_param((cfg.d,), f"{prefix}.head{i}.b"),
            ))

    def parameters(self) -> list[Parameter]:
        ps = [self.conv_in, self.conv_in_b]
        for k1, b1, k2, b2 in self.res:
            ps += [k1, b1, k2, b2]
        for w, b in self.heads:
            ps += [w, b]
        return ps

    def trunk(self, a: np.ndarray, b: np.ndarray) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        x = Tensor(np.stack([a, b], axis=-1))
        x = T.pixel_unshuffle(x, self.cfg.unshuffle)
        x = T.leaky_relu(T.conv2d(x, self.conv_in, "full_3x3", self.conv_in_b),
                         self.cfg.slope)
        for k1, b1, k2, b2 in self.res:
            h = T.leaky_relu(T.conv2d(x, k1, "full_3x3", b1), self.cfg.slope)
            h = T.conv2d(h, k2, "full_3x3", b2)
            x = T.leaky_relu(x + h, self.cfg.slope)
        return T.mean(x, axis=(0, 1))  # (width,)

    def head(self, pooled: Tensor, i: int) -> Tensor:
        w, b = self.heads[i]
        out = T.linear(T.reshape(pooled, (1, -1)), w, b)
        return T.reshape(out, (-1,))  # (d,)


def extract_msp(dual: np.ndarray, singles: list[np.ndarray],
                encoder: PriorEncoder) -> Tensor:
    """d x N prior; column i comes from the (dual, single_i) pair via head i."""
    if len(singles) != encoder.cfg.n_heads:
        raise ValueError(f"{len(singles)} tracers vs {encoder.cfg.n_heads} heads")
    cols = []
    for i, single in enumerate(singles):
        pooled = encoder.trunk(dual, single)
        cols.append(T.reshape(encoder.head(pooled, i), (-1, 1)))
    return T.concat(cols, axis=1)


def extract_condition(dual: np.ndarray, masked_dual: np.ndarray,
                      encoder: PriorEncoder) -> Tensor:
    """Condition d-vector from (dual, dual * texture mask); single head."""
    return encoder.head(encoder.trunk(dual, masked_dual), 0)


class ModulationParams:
    """Two linear maps turning the flattened prior into per-channel scale/shift."""

    def __init__(self, in_dim: int, channels: int, rng: np.random.Generator,
                 prefix: str):
        std = 1e-2 / in_dim ** 0.5
        self.scale_w = T.normal_param(rng, (in_dim, channels), std, f"{prefix}.scale.w")
        self.scale_b = Parameter(np.ones(channels), f"{prefix}.scale.b")
        self.shift_w = T.normal_param(rng, (in_dim, channels), std, f"{prefix}.shift.w")
        self.shift_b = T.zeros_param((channels,), f"{prefix}.shift.b")

    def parameters(self) -> list[Parameter]:
        return [self.scale_w, self.scale_b, self.shift_w, self.shift_b]


def modulate(m: Tensor, latent_flat: Tensor, params: ModulationParams,
             epsilon: float = 1e-5) -> Tensor:
    """scale(L) * LayerNorm(M) + shift(L), broadcast over spatial positions."""
    c = m.data.shape[2]
    if params.scale_w.data.shape[1] != c:
        raise ValueError(f"modulation for {params.scale_w.data.shape[1]} channels "
                         f"applied to {c}-channel features")
    lrow = T.reshape(latent_flat, (1, -1))
    scale = T.reshape(T.linear(lrow, params.scale_w, params.scale_b), (1, 1, c))
    shift = T.reshape(T.linear(lrow, params.shift_w, params.shift_b), (1, 1, c))
    return scale * T.layer_norm(m, axis=2, epsilon=epsilon) + shift
