"""Dataset loading and generation: 2-D toy densities, IDX and CIFAR binaries.

Generated datasets are pure functions of (kind, seed, count) through the
portable RNG, so every run and platform sees identical bytes. 2-D toy data is
standardized to zero mean, unit variance at load time; images stay integer
until dequantization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng

GENERATED_KINDS = ("moons", "rings", "checkerboard")
FILE_KINDS = ("idx-images", "cifar-binary")

IDX_IMAGE_MAGIC = 0x00000803
CIFAR_RECORD_BYTES = 3073


class FormatError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


@dataclass
class DatasetSpec:
    kind: str
    path: str | None = None
    seed: int = 0
    count: int = 5000

    def validate(self):
        if self.kind in GENERATED_KINDS:
            if self.count < 2:
                raise ValueError(f"generated dataset needs count >= 2, got {self.count}")
        elif self.kind in FILE_KINDS:
            if not self.path:
                raise ValueError(f"dataset kind {self.kind!r} needs a path")
        else:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        return self

    def to_lines(self):
        out = [f"data.kind={self.kind}", f"data.seed={self.seed}", f"data.count={self.count}"]
        if self.path:
            out.append(f"data.path={self.path}")
        return out

    @classmethod
    def from_mapping(cls, mapping):
        return cls(
            kind=mapping["data.kind"],
            path=mapping.get("data.path") or None,
            seed=int(mapping.get("data.seed", 0)),
            count=int(mapping.get("data.count", 5000)),
        ).validate()


@dataclass
class Dataset:
    x: np.ndarray  # (N, 2) standardized floats, or (N, h, w, c) integer-valued floats
    is_image: bool
    discrete_levels: int | None = None

    @property
    def count(self):
        return self.x.shape[0]

    @property
    def sample_shape(self):
        return self.x.shape[1:]


# --- 2-D toy generators ------------------------------------------------------


def _standardize(x):
    return (x - x.mean(axis=0)) / x.std(axis=0)


def make_moons(count, seed, noise=0.1):
    rng = Rng(seed, stream=1)
    n1 = count // 2
    n2 = count - n1
    t1 = np.pi * rng.uniform((n1,))
    t2 = np.pi * rng.uniform((n2,))
    upper = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    lower = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    pts = np.concatenate([upper, lower]) + noise * rng.normal((count, 2))
    return _standardize(pts)


def make_rings(count, seed, noise=0.06):
    rng = Rng(seed, stream=2)
    n1 = count // 2
    n2 = count - n1
    t = 2 * np.pi * rng.uniform((count,))
    radius = np.concatenate([np.full(n1, 0.5), np.full(n2, 1.0)])
    pts = radius[:, None] * np.stack([np.cos(t), np.sin(t)], axis=1)
    pts = pts + noise * rng.normal((count, 2))
    return _standardize(pts)


def make_checkerboard(count, seed):
    rng = Rng(seed, stream=3)
    x1 = rng.uniform((count,)) * 4.0 - 2.0
    x2 = rng.uniform((count,)) - rng.integers(0, 2, (count,)) * 2.0
    x2 = x2 + np.floor(x1) % 2
    pts = np.stack([x1, x2], axis=1) * 2.0
    return _standardize(pts)


# --- binary image formats ------------------------------------------------------


def load_idx(path):
    """IDX image file: big-endian magic 0x00000803, dims, unsigned bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic at byte offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    count, h, w = struct.unpack(">III", raw[4:16])
    need = 16 + count * h * w
    if len(raw) != need:
        raise FormatError(
            f"{path}: expected {need} bytes for {count} images of {h}x{w}, "
            f"got {len(raw)} (mismatch at byte offset {min(len(raw), need)})"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, h, w, 1).astype(np.float64)


def write_idx(path, images):
    """Inverse of load_idx; images integer-valued (N, h, w, 1) in [0, 256)."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())


def load_cifar_binary(path):
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or len(raw) % CIFAR_RECORD_BYTES:
        offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES} "
            f"(mismatch at byte offset {offset})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    planes = records[:, 1:].reshape(-1, 3, 32, 32)  # label byte discarded
    return planes.transpose(0, 2, 3, 1).astype(np.float64)


# --- pipeline -----------------------------------------------------------------


def load(spec: DatasetSpec) -> Dataset:
    spec.validate()
    if spec.kind == "moons":
        return Dataset(make_moons(spec.count, spec.seed), is_image=False)
    if spec.kind == "rings":
        return Dataset(make_rings(spec.count, spec.seed), is_image=False)
    if spec.kind == "checkerboard":
        return Dataset(make_checkerboard(spec.count, spec.seed), is_image=False)
    if spec.kind == "idx-images":
        return Dataset(load_idx(spec.path), is_image=True, discrete_levels=256)
    return Dataset(load_cifar_binary(spec.path), is_image=True, discrete_levels=256)


def dequantize(x_int, rng: Rng, levels: int = 256):
    """(x + u)/levels with u ~ U[0,1) i.i.d.; output strictly inside [0, 1)."""
    x_int = np.asarray(x_int, dtype=np.float64)
    if np.any(x_int < 0) or np.any(x_int >= levels) or np.any(x_int != np.floor(x_int)):
        bad = x_int[(x_int < 0) | (x_int >= levels) | (x_int != np.floor(x_int))]
        raise ValueError(f"pixels must be integers in [0, {levels}), found {bad.flat[0]}")
    return (x_int + rng.uniform(x_int.shape)) / levels


def train_test_split(x, seed: int, test_fraction: float = 0.1):
    """Deterministic shuffle-then-cut split driven by the portable RNG."""
    perm = Rng(seed, stream=4).permutation(x.shape[0])
    shuffled = x[perm]
    n_test = max(1, int(round(x.shape[0] * test_fraction)))
    return shuffled[n_test:], shuffled[:n_test]
