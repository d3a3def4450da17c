"""Encoder stand-in, dimensionality-reduction ConvNet and pixel decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import Conv2d, InstanceNorm, conv2d, dropout, tiled_conv2d
from .rng import Rng
from .tensor import Tensor, make_node, relu


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    feature_channels: int = 32
    depth: int = 3
    downsample_factor: int = 1

    def __post_init__(self):
        if self.feature_channels < 8:
            raise ShapeError("feature_channels must be at least 8")
        if min(self.in_channels, self.depth, self.downsample_factor) < 1:
            raise ShapeError("encoder extents must be positive")


@dataclass(frozen=True)
class SmallConvNetConfig:
    in_channels: int = 32
    hidden: int = 8


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int = 48
    hidden: int = 64
    n_class: int = 4
    dropout: float = 0.0


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {h}x{w} not divisible by downsample factor {factor}")
    out = x.data.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up / (factor * factor),)

    return make_node(out, (x,), backward)


class Encoder:
    """``depth`` blocks of conv3x3 / InstanceNorm / ReLU, optional average-pool downsampling."""

    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        self.blocks = []
        cin = cfg.in_channels
        for i in range(cfg.depth):
            conv = Conv2d(cin, cfg.feature_channels, 3, rng.child(f"block{i}"), f"encoder.block{i}.conv")
            norm = InstanceNorm(cfg.feature_channels, f"encoder.block{i}.norm")
            self.blocks.append((conv, norm))
            cin = cfg.feature_channels

    def __call__(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        if image.shape[-3] != self.cfg.in_channels:
            raise ShapeError(f"encoder expects {self.cfg.in_channels} image channels, got {image.shape[-3]}")
        if min(h, w) < 8:
            raise ShapeError(f"image extents must be >= 8, got {h}x{w}")
        x = image
        for i, (conv, norm) in enumerate(self.blocks):
            x = relu(norm(conv(x)))
            if i == 0:
                x = avg_pool2d(x, self.cfg.downsample_factor)
        return x

    def parameters(self):
        return [p for conv, norm in self.blocks for p in conv.parameters() + norm.parameters()]


class SmallConvNet:
    """conv1x1 -> IN -> ReLU -> conv1x1 -> IN -> ReLU -> conv1x1."""

    def __init__(self, cfg: SmallConvNetConfig, rng: Rng):
        self.cfg = cfg
        r = cfg.hidden
        self.conv1 = Conv2d(cfg.in_channels, r, 1, rng.child("conv1"), "reduce.conv1")
        self.norm1 = InstanceNorm(r, "reduce.norm1")
        self.conv2 = Conv2d(r, r, 1, rng.child("conv2"), "reduce.conv2")
        self.norm2 = InstanceNorm(r, "reduce.norm2")
        self.conv3 = Conv2d(r, r, 1, rng.child("conv3"), "reduce.conv3")

    @property
    def layers(self):
        return [self.conv1, self.norm1, "relu", self.conv2, self.norm2, "relu", self.conv3]

    def __call__(self, featmap: Tensor) -> Tensor:
        if featmap.shape[-3] != self.cfg.in_channels:
            raise ShapeError(f"reduce expects {self.cfg.in_channels} channels, got {featmap.shape[-3]}")
        x = relu(self.norm1(self.conv1(featmap)))
        x = relu(self.norm2(self.conv2(x)))
        return self.conv3(x)

    def parameters(self):
        return (self.conv1.parameters() + self.norm1.parameters() + self.conv2.parameters()
                + self.norm2.parameters() + self.conv3.parameters())

    def describe(self) -> list[dict]:
        return _describe(self.layers)


class Decoder:
    """conv3x3 -> IN -> ReLU -> conv3x3 -> IN -> ReLU -> conv1x1 to class logits.

    Applied to ``(T, C, H, W)`` stacks with shared weights, so the T slices
    are independent.  ``calls`` counts feed-forward passes for benchmarking.
    With ``dropout > 0`` and a dropout stream, dropout follows each ReLU.
    """

    def __init__(self, cfg: DecoderConfig, rng: Rng, name: str = "decoder"):
        self.cfg = cfg
        hid = cfg.hidden
        self.conv1 = Conv2d(cfg.in_channels, hid, 3, rng.child("conv1"), f"{name}.conv1")
        self.norm1 = InstanceNorm(hid, f"{name}.norm1")
        self.conv2 = Conv2d(hid, hid, 3, rng.child("conv2"), f"{name}.conv2")
        self.norm2 = InstanceNorm(hid, f"{name}.norm2")
        self.conv3 = Conv2d(hid, cfg.n_class, 1, rng.child("conv3"), f"{name}.conv3")
        self.calls = 0

    @property
    def layers(self):
        return [self.conv1, self.norm1, "relu", self.conv2, self.norm2, "relu", self.conv3]

    def __call__(self, assembled: Tensor, dropout_rng: Rng | None = None) -> Tensor:
        if assembled.shape[-3] != self.cfg.in_channels:
            raise ShapeError(
                f"decoder expects {self.cfg.in_channels} channels, got {assembled.shape[-3]}")
        self.calls += 1
        p = self.cfg.dropout
        x = relu(self.norm1(self.conv1(assembled)))
        x = dropout(x, p, dropout_rng.child("drop1") if dropout_rng else None)
        x = relu(self.norm2(self.conv2(x)))
        x = dropout(x, p, dropout_rng.child("drop2") if dropout_rng else None)
        return self.conv3(x)

    def decode_shared(self, featmap: Tensor, vectors: Tensor, dropout_rng: Rng | None = None) -> Tensor:
        """Decode the T stacks ``[featmap; tile(vectors[t])]`` in one pass.

        Same result as calling the decoder on the explicitly assembled
        (T, D + V, H, W) input, but the first convolution handles the feature
        map once rather than T times and the tiled part without tiling.
        """
        d, h, w = featmap.shape
        if d + vectors.shape[-1] != self.cfg.in_channels:
            raise ShapeError(
                f"decoder expects {self.cfg.in_channels} channels, got {d}+{vectors.shape[-1]}")
        self.calls += 1
        p = self.cfg.dropout
        weight = self.conv1.weight
        shared = conv2d(featmap, weight[:, :d], self.conv1.bias)
        x = shared + tiled_conv2d(vectors, weight[:, d:], h, w)
        x = relu(self.norm1(x))
        x = dropout(x, p, dropout_rng.child("drop1") if dropout_rng else None)
        x = relu(self.norm2(self.conv2(x)))
        x = dropout(x, p, dropout_rng.child("drop2") if dropout_rng else None)
        return self.conv3(x)

    def parameters(self):
        return (self.conv1.parameters() + self.norm1.parameters() + self.conv2.parameters()
                + self.norm2.parameters() + self.conv3.parameters())

    def describe(self) -> list[dict]:
        return _describe(self.layers)


def _describe(layers) -> list[dict]:
    rows = []
    width = None
    for layer in layers:
        if layer == "relu":
            rows.append({"type": "ReLU", "in_c": width, "out_c": width})
        else:
            d = layer.describe()
            width = d["out_c"]
            rows.append(d)
    return rows
