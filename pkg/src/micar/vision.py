"""Multiscale vision encoder: residual backbone, feature pyramid, fusion and patch projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from micar.autodiff import ops
from micar.autodiff.params import Module
from micar.autodiff.tensor import Tensor
from micar.errors import ConfigurationError, DimensionError
from micar.layers import ConvBN, Linear, RMSNorm

STAGE_STRIDES = (4, 2, 2, 2)


@dataclass
class BackboneConfig:
    in_channels: int = 3
    base_channels: int = 8
    blocks_per_stage: int = 1

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(len(STAGE_STRIDES))]


@dataclass
class FeaturePyramid:
    c: list[Tensor]
    p: list[Tensor]
    fused: Tensor
    patches: Tensor

    @property
    def c2(self) -> Tensor:
        return self.c[0]

    @property
    def p2(self) -> Tensor:
        return self.p[0]


class ResidualBlock(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv1 = ConvBN(rng, channels, channels, 3)
        self.conv2 = ConvBN(rng, channels, channels, 3, relu=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(ops.add(x, self.conv2(self.conv1(x))))


class Stage(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, stride: int, blocks: int):
        # kernel stride+1 keeps every input pixel inside some window at stride 4
        kernel = 5 if stride == 4 else 3
        self.down = ConvBN(rng, c_in, c_out, kernel, stride)
        self.blocks = [ResidualBlock(rng, c_out) for _ in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for b in self.blocks:
            x = b(x)
        return x


def check_image_shape(shape: tuple[int, ...]) -> None:
    h, w = shape[-2:]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise DimensionError(f"image size {h}x{w} must be a positive multiple of 32")


class Backbone(Module):
    """Four residual stages at strides /4, /8, /16, /32 with channels c, 2c, 4c, 8c."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        chans = cfg.stage_channels()
        ins = [cfg.in_channels] + chans[:-1]
        self.stages = [Stage(rng, ci, co, s, cfg.blocks_per_stage)
                       for ci, co, s in zip(ins, chans, STAGE_STRIDES)]

    def __call__(self, image: Tensor) -> list[Tensor]:
        check_image_shape(image.shape)
        if image.shape[-3] != self.cfg.in_channels:
            raise DimensionError(f"image has {image.shape[-3]} channels, backbone expects {self.cfg.in_channels}")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Pyramid(Module):
    """Top-down pyramid: ``P5 = phi(C5)``, ``P_i = phi(C_i) + up(P_{i+1} -> C_i)``."""

    def __init__(self, rng: np.random.Generator, stage_channels: list[int], d_p: int):
        self.lateral = [ConvBN(rng, c, d_p, 1) for c in stage_channels]
        self.d_p = d_p
        for conv in self.lateral:
            if conv.out_channels != d_p:
                raise ConfigurationError(f"pyramid lateral width {conv.out_channels} != {d_p}")

    def __call__(self, stages: list[Tensor]) -> list[Tensor]:
        out: list[Optional[Tensor]] = [None] * len(stages)
        out[-1] = self.lateral[-1](stages[-1])
        for i in range(len(stages) - 2, -1, -1):
            lat = self.lateral[i](stages[i])
            out[i] = ops.add(lat, ops.upsample_nearest(out[i + 1], stages[i].shape[-2:]))
        return out


class MultiscaleFusion(Module):
    """``F = Psi(P2 + up(P3) + up(P4) + up(P5))`` with Psi a 3x3 ConvBN + ReLU."""

    def __init__(self, rng: np.random.Generator, d_p: int, d_v: int):
        self.psi = ConvBN(rng, d_p, d_v, 3)

    def __call__(self, pyramid: list[Tensor]) -> Tensor:
        target = pyramid[0].shape[-2:]
        total = pyramid[0]
        for p in pyramid[1:]:
            total = ops.add(total, ops.upsample_nearest(p, target))
        return self.psi(total)


class PatchProjection(Module):
    """Adaptive average pool to ``grid×grid``, flatten to rows, RMSNorm, affine to ``d_model``."""

    def __init__(self, rng: np.random.Generator, d_v: int, d_model: int, grid: int):
        self.grid = grid
        self.norm = RMSNorm(d_v)
        self.proj = Linear(rng, d_v, d_model)

    def pooled(self, fused: Tensor, grid: Optional[int] = None) -> Tensor:
        g = grid or self.grid
        pooled = ops.adaptive_avg_pool2d(fused, (g, g))
        lead = pooled.shape[:-3]
        d_v = pooled.shape[-3]
        rows = ops.reshape(pooled, lead + (d_v, g * g))
        return ops.transpose(rows, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))

    def __call__(self, fused: Tensor, grid: Optional[int] = None) -> Tensor:
        return self.proj(self.norm(self.pooled(fused, grid)))


class MultiscaleVisionEncoder(Module):
    """Image ``[N×]3×H×W`` -> patch sequence ``[N×]g²×d_model``."""

    def __init__(self, rng: np.random.Generator, backbone: BackboneConfig, d_v: int, d_model: int,
                 grid: int = 4, d_p: Optional[int] = None):
        d_p = d_p or d_v
        self.backbone = Backbone(rng, backbone)
        self.pyramid = Pyramid(rng, backbone.stage_channels(), d_p)
        self.fusion = MultiscaleFusion(rng, d_p, d_v)
        self.patches = PatchProjection(rng, d_v, d_model, grid)

    def features(self, image: Tensor) -> FeaturePyramid:
        check_image_shape(image.shape)
        if self.patches.grid > image.shape[-1] // 4:
            raise ConfigurationError(f"grid {self.patches.grid} exceeds fused map size {image.shape[-1] // 4}")
        c = self.backbone(image)
        p = self.pyramid(c)
        fused = self.fusion(p)
        return FeaturePyramid(c, p, fused, self.patches(fused))

    def __call__(self, image: Tensor) -> Tensor:
        return self.features(image).patches


class SingleScaleEncoder(Module):
    """Ablation variant: only the deepest stage, one 1x1 ConvBN, then the same patch projection."""

    def __init__(self, rng: np.random.Generator, backbone: BackboneConfig, d_v: int, d_model: int,
                 grid: int = 4):
        self.backbone = Backbone(rng, backbone)
        self.lateral = ConvBN(rng, backbone.stage_channels()[-1], d_v, 1)
        self.patches = PatchProjection(rng, d_v, d_model, grid)

    def __call__(self, image: Tensor) -> Tensor:
        top = self.lateral(self.backbone(image)[-1])
        g = min(self.patches.grid, top.shape[-1], top.shape[-2])
        return self.patches(top, g)
