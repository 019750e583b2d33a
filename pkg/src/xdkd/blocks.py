"""Architectural building blocks: FiLM fusion, point-wise DASPP, and the
generic strided encoder / upsampling decoder stages they plug into.

Every block is a small parameter record with a __call__ that runs tape ops;
`params()` lists (name, tensor) pairs so the harness can register, count,
checksum and checkpoint them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .rng import FieldRng
from .tensor import (
    ShapeError,
    Tensor,
    bilinear_upsample,
    concat,
    conv2d,
    ew_add,
    ew_mul,
    global_avg_pool,
    leaky_relu,
    relu,
)


class Conv2dLayer:
    """Conv kernel + bias with He or zero init, seeded by layer name."""

    def __init__(self, name: str, in_ch: int, out_ch: int, ksize: int, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 seed: int = 0, init: str = "he", bias_fill: float = 0.0):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        n = out_ch * in_ch * ksize * ksize
        if init == "zero":
            w = np.zeros(n)
        else:
            fan_in = in_ch * ksize * ksize
            w = FieldRng(seed, f"init/{name}").normal(n) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.reshape(out_ch, in_ch, ksize, ksize), requires_grad=True)
        self.bias = Tensor(np.full(out_ch, bias_fill), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias,
                      stride=self.stride, padding=self.padding, dilation=self.dilation)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


# ---------------------------------------------------------------------------
# FiLM fusion

@dataclass
class FiLMParams:
    """Two independent 1x1 convs producing the per-channel scale and shift."""

    gamma_conv: Conv2dLayer
    beta_conv: Conv2dLayer

    def __post_init__(self):
        for c in (self.gamma_conv, self.beta_conv):
            if c.weight.shape[2:] != (1, 1):
                raise ShapeError("FiLM convolutions must have 1x1 kernels")
        if self.gamma_conv.weight.shape[0] != self.beta_conv.weight.shape[0]:
            raise ShapeError("gamma and beta convs must agree on output channels")

    def params(self):
        return self.gamma_conv.params() + self.beta_conv.params()


def make_film(name: str, radar_ch: int, image_ch: int, seed: int) -> FiLMParams:
    # zero init makes fusion start as the identity on the image features
    return FiLMParams(
        gamma_conv=Conv2dLayer(f"{name}.gamma", radar_ch, image_ch, 1, seed=seed, init="zero"),
        beta_conv=Conv2dLayer(f"{name}.beta", radar_ch, image_ch, 1, seed=seed, init="zero"),
    )


def film_modulate(f_i: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine transform (1+gamma) * f + beta."""
    c = f_i.shape[0]
    if gamma.shape != (c, 1, 1) or beta.shape != (c, 1, 1):
        raise ShapeError(f"modulation coefficients must be ({c},1,1), "
                         f"got {gamma.shape} and {beta.shape}")
    return ew_add(ew_mul(f_i, ew_add(gamma, 1.0)), beta)


def film_fuse(f_r: Tensor, f_i: Tensor, params: FiLMParams) -> Tensor:
    """Predict (gamma, beta) from radar features, pool to (C,1,1), modulate."""
    if f_r.shape[1:] != f_i.shape[1:]:
        raise ShapeError(f"radar and image features must share spatial size, "
                         f"got {f_r.shape} vs {f_i.shape}")
    gamma = global_avg_pool(params.gamma_conv(f_r))
    beta = global_avg_pool(params.beta_conv(f_r))
    return film_modulate(f_i, gamma, beta)


# ---------------------------------------------------------------------------
# point-wise DASPP

@dataclass(frozen=True)
class DASPPStage:
    channels: int
    rates: tuple[int, ...]

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("DASPP channels must be positive")
        if not self.rates or any(r < 1 for r in self.rates):
            raise ValueError("DASPP rates must be positive")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("DASPP rates must be strictly increasing")


@dataclass(frozen=True)
class DASPPConfig:
    """Per-stage dilation settings, keyed by downscale factor (32, 16, 8)."""

    stages: Mapping[int, DASPPStage]

    def __post_init__(self):
        bad = set(self.stages) - {32, 16, 8}
        if bad:
            raise ValueError(f"DASPP applies only at 1/32, 1/16, 1/8; got 1/{bad.pop()}")


class PointwiseDASPP:
    """Parallel 1x1 + dilated 3x3 branches, summed residually.

    out = final_1x1( x + relu(conv1x1(x)) + sum_r relu(conv3x3_rate_r(x)) )
    Each atrous branch pads by its rate, so the spatial size is preserved.
    The residual sum requires branch channels to equal the input channels.
    """

    def __init__(self, name: str, stage: DASPPStage, seed: int):
        c = stage.channels
        self.stage = stage
        self.point = Conv2dLayer(f"{name}.point", c, c, 1, seed=seed)
        self.atrous = [
            Conv2dLayer(f"{name}.atrous{r}", c, c, 3, padding=r, dilation=r, seed=seed)
            for r in stage.rates
        ]
        self.final = Conv2dLayer(f"{name}.final", c, c, 1, seed=seed)

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[0] != self.stage.channels:
            raise ShapeError(f"DASPP built for {self.stage.channels} channels, got {f.shape[0]}")
        acc = ew_add(f, relu(self.point(f)))
        for branch in self.atrous:
            acc = ew_add(acc, relu(branch(f)))
        return self.final(acc)

    def params(self):
        out = self.point.params()
        for b in self.atrous:
            out += b.params()
        return out + self.final.params()


# ---------------------------------------------------------------------------
# encoder / decoder stages

class EncoderStage:
    """Stride-2 3x3 conv + leaky ReLU; halves even spatial dims."""

    def __init__(self, name: str, in_ch: int, out_ch: int, seed: int):
        self.conv = Conv2dLayer(name, in_ch, out_ch, 3, stride=2, padding=1,
                                seed=seed, bias_fill=0.1)

    def __call__(self, x: Tensor) -> Tensor:
        return leaky_relu(self.conv(x))

    def params(self):
        return self.conv.params()


class DecoderStage:
    """x2 bilinear upsample, concat skip along channels, 3x3 conv + leaky ReLU."""

    def __init__(self, name: str, in_ch: int, skip_ch: int, out_ch: int, seed: int):
        self.conv = Conv2dLayer(name, in_ch + skip_ch, out_ch, 3, padding=1,
                                seed=seed, bias_fill=0.1)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = bilinear_upsample(x, 2)
        if up.shape[1:] != skip.shape[1:]:
            raise ShapeError(f"skip spatial size {skip.shape[1:]} does not match "
                             f"upsampled {up.shape[1:]}")
        return leaky_relu(self.conv(concat([up, skip], axis=0)))

    def params(self):
        return self.conv.params()
