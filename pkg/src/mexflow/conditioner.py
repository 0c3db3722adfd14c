"""Conditioner networks mapping the fixed coupling half to transform parameters.

A stack of residual blocks (3x3 conv, 1x1 conv, 3x3 conv with ELU between,
skip connection) behind a zero-initialized output head, so every coupling
layer starts as an exact identity.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor
from .rng import Rng
from .tensor import ShapeError, Tensor

FORMS = ("affine", "dense", "location", "lowrank")


def _fan_in_std(fan_in: int) -> float:
    # He-style scaling; keeps activations alive through the ELU stack
    return math.sqrt(2.0 / fan_in)


class Conv2d:
    """Convolution parameters; same padding, kernel layout (kh, kw, cin, cout)."""

    def __init__(self, kh, kw, cin, cout, rng: Rng | None = None, zero: bool = False):
        if zero or rng is None:
            kernel = np.zeros((kh, kw, cin, cout))
        else:
            kernel = rng.normal((kh, kw, cin, cout)) * _fan_in_std(kh * kw * cin)
        self.kernel = Tensor(kernel, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return tensor.add(tensor.conv2d(x, self.kernel), self.bias)

    def parameters(self):
        return {"kernel": self.kernel, "bias": self.bias}


class Linear:
    def __init__(self, n_in, n_out, rng: Rng | None = None, zero: bool = False):
        if zero or rng is None:
            weight = np.zeros((n_in, n_out))
        else:
            weight = rng.normal((n_in, n_out)) * _fan_in_std(n_in)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return tensor.add(tensor.matmul(x, self.weight), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class ResidualBlock:
    """3x3 -> 1x1 -> 3x3 convolutions with ELU between and a skip connection."""

    def __init__(self, channels, rng: Rng):
        self.conv_in = Conv2d(3, 3, channels, channels, rng)
        self.conv_mid = Conv2d(1, 1, channels, channels, rng)
        self.conv_out = Conv2d(3, 3, channels, channels, rng)

    def __call__(self, h):
        out = self.conv_out(tensor.elu(self.conv_mid(tensor.elu(self.conv_in(h)))))
        return tensor.add(h, out)

    def parameters(self):
        out = {}
        for tag, conv in (("conv_in", self.conv_in), ("conv_mid", self.conv_mid), ("conv_out", self.conv_out)):
            for k, v in conv.parameters().items():
                out[f"{tag}.{k}"] = v
        return out


class Conditioner:
    """Produces the coupling parameters for one layer.

    form:
      affine   -> (s, b), each (N, h, w, cout)
      dense    -> (S, b) with S (N, p, p), b (N, p), p = h*w*cout
      location -> (S, b) with S (N*h*w, cout, cout), b (N, h, w, cout)
      lowrank  -> (A1, A2, b) with A1 (N*h*w, cout, t), A2 (N*h*w, t, cout)
    """

    def __init__(self, form, in_channels, out_channels, spatial, rng: Rng,
                 hidden=32, blocks=2, rank=2):
        if form not in FORMS:
            raise ValueError(f"unknown conditioner form {form!r}")
        if form == "lowrank" and rank > out_channels:
            raise ValueError(f"rank {rank} exceeds transformed channels {out_channels}")
        self.form = form
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spatial = tuple(spatial)
        self.rank = rank
        self.stem = Conv2d(3, 3, in_channels, hidden, rng)
        self.blocks = [ResidualBlock(hidden, rng) for _ in range(blocks)]
        h, w = self.spatial
        if form == "affine":
            self.head = Conv2d(3, 3, hidden, 2 * out_channels, zero=True)
        elif form == "location":
            self.head = Conv2d(3, 3, hidden, out_channels * out_channels + out_channels, zero=True)
        elif form == "lowrank":
            self.head = Conv2d(3, 3, hidden, 2 * out_channels * rank + out_channels, zero=True)
        else:  # dense
            p = h * w * out_channels
            self.head = Linear(h * w * hidden, p * p + p, zero=True)

    def __call__(self, x1):
        n, h, w, cin = x1.shape
        if (h, w) != self.spatial or cin != self.in_channels:
            raise ShapeError(
                f"conditioner expects {self.spatial + (self.in_channels,)}, got {(h, w, cin)}"
            )
        feats = tensor.elu(self.stem(x1))
        for block in self.blocks:
            feats = block(feats)
        c = self.out_channels
        if self.form == "affine":
            out = self.head(feats)
            s = tensor.narrow(out, 3, 0, c)
            b = tensor.narrow(out, 3, c, c)
            return s, b
        if self.form == "location":
            out = self.head(feats)
            s_flat = tensor.narrow(out, 3, 0, c * c)
            b = tensor.narrow(out, 3, c * c, c)
            return tensor.reshape(s_flat, (n * h * w, c, c)), b
        if self.form == "lowrank":
            t = self.rank
            out = self.head(feats)
            a1 = tensor.reshape(tensor.narrow(out, 3, 0, c * t), (n * h * w, c, t))
            a2 = tensor.reshape(tensor.narrow(out, 3, c * t, t * c), (n * h * w, t, c))
            b = tensor.narrow(out, 3, 2 * c * t, c)
            return a1, a2, b
        # dense
        p = h * w * c
        out = self.head(tensor.reshape(feats, (n, feats.size // n)))
        s = tensor.reshape(tensor.narrow(out, 1, 0, p * p), (n, p, p))
        b = tensor.narrow(out, 1, p * p, p)
        return s, b

    def parameters(self):
        out = {}
        for k, v in self.stem.parameters().items():
            out[f"stem.{k}"] = v
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                out[f"block{i}.{k}"] = v
        for k, v in self.head.parameters().items():
            out[f"head.{k}"] = v
        return out
