"""Multiscale flow model: exact log-likelihood, bits/dim, sampling by inversion.

Image mode follows the squeeze / flow-steps / split ladder with a standard
normal prior on every factored-out part. Vector mode (2-D toy densities) is a
plain stack of actnorm -> 1x1-convolution-as-dense-map -> coupling on vectors
carried internally as (N, 1, 1, d) images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers, tensor
from .conditioner import Conditioner
from .layers import ActNorm, AffineCoupling, Conv1x1, MatExpCoupling, Stabilizer
from .rng import Rng
from .tensor import ShapeError, Tensor

COUPLINGS = ("affine", "matexp", "matexp-lowrank")
CONVS = ("matexp", "standard", "plu")


@dataclass
class ModelConfig:
    kind: str = "vector"  # "vector" | "image"
    dim: int = 2  # vector mode
    height: int = 0
    width: int = 0
    channels: int = 0
    levels: int = 2
    depths: tuple = (2, 2)
    steps: int = 6  # vector mode
    coupling: str = "matexp"
    conv: str = "matexp"
    blocks: int = 2
    hidden: int = 32
    rank: int = 2
    u1_init: float = 1.0
    u2_init: float = 1.0
    stabilize_factors: bool = False
    eps: float = 1e-8
    conv_init_scale: float = 1.0

    def validate(self):
        if self.kind not in ("vector", "image"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.conv not in CONVS:
            raise ValueError(f"unknown convolution variant {self.conv!r}")
        if self.kind == "vector":
            if self.dim < 2 or self.dim % 2:
                raise ValueError(f"vector dimension must be even and >= 2, got {self.dim}")
        else:
            if len(self.depths) != self.levels:
                raise ValueError(f"{self.levels} levels need {self.levels} depths, got {self.depths}")
            div = 2**self.levels
            if self.height % div or self.width % div:
                raise ValueError(
                    f"spatial extents {self.height}x{self.width} not divisible by 2^{self.levels}"
                )
        if self.coupling == "matexp-lowrank" and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        return self

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"model.{f.name}={v}")
        return out

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in mapping:
                continue
            raw = mapping[key]
            if f.name == "depths":
                kwargs[f.name] = tuple(int(x) for x in str(raw).split(",") if x != "")
            elif f.type in ("int",):
                kwargs[f.name] = int(raw)
            elif f.type in ("float",):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool",):
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs).validate()


def _coupling_form(cfg: ModelConfig) -> str:
    if cfg.coupling == "affine":
        return "affine"
    if cfg.coupling == "matexp-lowrank":
        return "lowrank"
    return "dense" if cfg.kind == "vector" else "location"


@dataclass
class FlowStep:
    name: str
    layers: list


class FlowModel:
    """Composition of flow steps with split bookkeeping and a normal prior."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.steps_per_level: list[list] = []
        self.latent_shapes: list[tuple] = []
        self._build(seed)

    # -- construction --------------------------------------------------------

    def _make_step(self, channels, spatial, rng, name):
        cfg = self.cfg
        form = _coupling_form(cfg)
        cx = channels // 2
        cond = Conditioner(
            form,
            in_channels=channels - cx,
            out_channels=cx,
            spatial=spatial,
            rng=rng.split(1),
            hidden=cfg.hidden,
            blocks=cfg.blocks,
            rank=cfg.rank,
        )
        stab = Stabilizer(cfg.u1_init, cfg.u2_init)
        if form == "affine":
            coupling = AffineCoupling(channels, cond, stab)
        else:
            coupling = MatExpCoupling(
                channels, cond, form, stab, eps=cfg.eps, stabilize_factors=cfg.stabilize_factors
            )
        actnorm = ActNorm(channels)
        conv = Conv1x1(channels, cfg.conv, rng.split(2), eps=cfg.eps, init_scale=cfg.conv_init_scale)
        for layer, tag in ((actnorm, "actnorm"), (conv, "conv1x1"), (coupling, "coupling")):
            layer.name = f"{name}/{tag}"
        return [actnorm, conv, coupling]

    def _build(self, seed):
        cfg = self.cfg
        root = Rng(seed, stream=11)
        if cfg.kind == "vector":
            steps = [
                self._make_step(cfg.dim, (1, 1), root.split(100 + i), f"step{i}")
                for i in range(cfg.steps)
            ]
            self.steps_per_level = [steps]
            self.latent_shapes = [(1, 1, cfg.dim)]
            self._splits = [False]
            return
        h, w, c = cfg.height, cfg.width, cfg.channels
        self.steps_per_level = []
        self._splits = []
        self.latent_shapes = []
        for level in range(cfg.levels):
            h, w, c = h // 2, w // 2, c * 4
            steps = [
                self._make_step(c, (h, w), root.split(1000 * (level + 1) + i), f"level{level}/step{i}")
                for i in range(cfg.depths[level])
            ]
            self.steps_per_level.append(steps)
            last = level == cfg.levels - 1
            self._splits.append(not last)
            if not last:
                self.latent_shapes.append((h, w, c // 2))
                c //= 2
        self.latent_shapes.append((h, w, c))

    # -- parameter access -----------------------------------------------------

    def named_layers(self):
        for steps in self.steps_per_level:
            for step in steps:
                for layer in step:
                    yield layer.name, layer

    def parameters(self) -> dict:
        out = {}
        for name, layer in self.named_layers():
            for key, value in layer.parameters().items():
                out[f"{name}/{key}"] = value
        return out

    def stabilizers(self):
        for _, layer in self.named_layers():
            stab = getattr(layer, "stabilizer", None)
            if stab is not None:
                yield stab

    def actnorms(self):
        for _, layer in self.named_layers():
            if isinstance(layer, ActNorm):
                yield layer

    @property
    def total_dim(self) -> int:
        return int(sum(np.prod(s) for s in self.latent_shapes))

    # -- flow passes -----------------------------------------------------------

    def _wrap(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.cfg.kind == "vector":
            if x.ndim != 2 or x.shape[1] != self.cfg.dim:
                raise ShapeError(f"expected (N, {self.cfg.dim}) vectors, got {x.shape}")
            return tensor.reshape(x, (x.shape[0], 1, 1, self.cfg.dim))
        want = (self.cfg.height, self.cfg.width, self.cfg.channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"expected (N, {want[0]}, {want[1]}, {want[2]}) images, got {x.shape}")
        return x

    def forward(self, x):
        """x -> (latent parts, total logdet per sample)."""
        h = self._wrap(x)
        n = h.shape[0]
        logdet = Tensor(np.zeros(n))
        parts = []
        image = self.cfg.kind == "image"
        for steps, split in zip(self.steps_per_level, self._splits):
            if image:
                h = layers.squeeze(h)
            for step in steps:
                for layer in step:
                    h, ld = layer.forward(h)
                    logdet = tensor.add(logdet, ld)
            if split:
                h, factored = layers.split_channels(h)
                parts.append(factored)
        parts.append(h)
        return parts, logdet

    def inverse(self, parts):
        """Latent parts -> data; exact layer-by-layer inversion."""
        if len(parts) != len(self.latent_shapes):
            raise ShapeError(f"expected {len(self.latent_shapes)} latent parts, got {len(parts)}")
        vals = []
        for part, shape in zip(parts, self.latent_shapes):
            part = part if isinstance(part, Tensor) else Tensor(part)
            if part.shape[1:] != shape:
                raise ShapeError(f"latent part shape {part.shape[1:]} does not match {shape}")
            vals.append(part)
        image = self.cfg.kind == "image"
        h = vals[-1]
        for idx in range(len(self.steps_per_level) - 1, -1, -1):
            if self._splits[idx]:
                h = layers.unsplit_channels(h, vals[idx])
            for step in reversed(self.steps_per_level[idx]):
                for layer in reversed(step):
                    h = layer.inverse(h)
            if image:
                h = layers.unsqueeze(h)
        if self.cfg.kind == "vector":
            return tensor.reshape(h, (h.shape[0], self.cfg.dim))
        return h

    # -- densities --------------------------------------------------------------

    def log_prob(self, x):
        """Per-sample log density in nats under the standard-normal prior."""
        parts, logdet = self.forward(x)
        total = logdet
        for part in parts:
            d = int(np.prod(part.shape[1:]))
            axes = tuple(range(1, part.ndim))
            quad = tensor.mul(tensor.reduce_sum(tensor.mul(part, part), axes=axes), -0.5)
            total = tensor.add(total, tensor.add(quad, Tensor(-0.5 * d * math.log(2 * math.pi))))
        if not np.all(np.isfinite(total.data)):
            raise FloatingPointError("non-finite log probability (divergence)")
        return total

    def bits_per_dim(self, x, discrete_levels: int = 256) -> float:
        """Negative log2-likelihood per dimension of dequantized [0,1) data."""
        lp = self.log_prob(x)
        n = self.total_dim
        return float(-lp.data.mean() / (n * math.log(2)) + math.log2(discrete_levels))

    def sample(self, count: int, rng: Rng, temperature: float = 1.0) -> np.ndarray:
        parts = [
            Tensor(temperature * rng.normal((count,) + shape)) for shape in self.latent_shapes
        ]
        return self.inverse(parts).data

    def init_actnorm(self, batch):
        """Data-dependent actnorm initialization from the designated batch."""
        self.forward(batch)
        return self
