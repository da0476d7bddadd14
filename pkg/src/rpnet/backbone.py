"""Tiny N-block convolutional backbone, GAP classifier head and checkpoints.

Each block is ``conv3x3 -> ReLU -> conv3x3(stride) -> ReLU``; every block
halves the resolution except the last one, which keeps stride 1.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MAGIC = b"RPNW"
FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    num_blocks: int = 3
    channels: list[int] = field(default_factory=lambda: [32, 64, 64])
    groups: int = 1
    in_channels: int = 3
    num_classes: int = 3
    unified_channels: int = 256

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2")
        if len(self.channels) != self.num_blocks:
            raise ValueError(f"need {self.num_blocks} channel widths, got {self.channels}")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"channel width {c} not divisible by groups {self.groups}")

    def strides(self) -> list[int]:
        return [2] * (self.num_blocks - 1) + [1]

    @property
    def min_extent(self) -> int:
        return max(16, 2 ** (self.num_blocks - 1))


@dataclass
class FeaturePyramid:
    """Per-block post-ReLU feature maps f_1..f_N of one image."""
    features: list[Tensor]
    image_index: int = 0

    @property
    def extents(self) -> list[tuple[int, int]]:
        return [f.shape[:2] for f in self.features]

    @property
    def last(self) -> Tensor:
        return self.features[-1]

    def __len__(self):
        return len(self.features)

    def block(self, n: int) -> Tensor:
        """1-based block access."""
        return self.features[n - 1]


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(config: BackboneConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Seeded Glorot-uniform weights, zero biases.

    Includes one 1x1 projection per block to ``unified_channels`` and the
    D_N x C classifier ``theta``.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    cin = config.in_channels
    for n, cout in enumerate(config.channels, start=1):
        for name, ci in (("conv1", cin), ("conv2", cout)):
            g = block_groups(config, n, name)
            cg = ci // g
            w = _glorot(rng, (3, 3, cg, cout), 9 * cg, 9 * cout // g, dtype)
            params[f"block{n}.{name}.weight"] = Tensor(w, requires_grad=True)
            params[f"block{n}.{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
        cin = cout
    for n, c in enumerate(config.channels, start=1):
        w = _glorot(rng, (1, 1, c, config.unified_channels), c, config.unified_channels, dtype)
        params[f"proj{n}.weight"] = Tensor(w, requires_grad=True)
    d = config.channels[-1]
    params["theta"] = Tensor(_glorot(rng, (d, config.num_classes), d, config.num_classes, dtype),
                             requires_grad=True)
    return params


def block_groups(config: BackboneConfig, n: int, conv: str) -> int:
    if conv == "conv2" or n > 1:
        return config.groups
    return 1 if config.in_channels % config.groups else config.groups


def forward(image: Tensor, params: dict[str, Tensor], config: BackboneConfig) -> FeaturePyramid:
    """Run all blocks and return every block output."""
    if image.ndim != 3:
        raise ShapeError(f"image must be X x Y x channels, got {image.shape}")
    h, w, c = image.shape
    if c != config.in_channels:
        raise ShapeError(f"image has {c} channels, backbone expects {config.in_channels}")
    if min(h, w) < config.min_extent:
        raise ShapeError(f"image {h}x{w} too small for a {config.num_blocks}-block "
                         f"downsampling chain (need >= {config.min_extent})")
    feats = []
    x = image
    for n, stride in enumerate(config.strides(), start=1):
        x = T.relu(T.conv2d(x, params[f"block{n}.conv1.weight"], 1, 1,
                            block_groups(config, n, "conv1"), params[f"block{n}.conv1.bias"]))
        x = T.relu(T.conv2d(x, params[f"block{n}.conv2.weight"], stride, 1,
                            config.groups, params[f"block{n}.conv2.bias"]))
        feats.append(x)
    return FeaturePyramid(feats)


def classify(last_features: Tensor, theta: Tensor) -> Tensor:
    """GAP followed by a linear (1x1) head: logits of length C."""
    if theta.ndim != 2 or last_features.shape[-1] != theta.shape[0]:
        raise ShapeError(f"classify: features have {last_features.shape[-1]} channels, "
                         f"theta is {theta.shape}")
    return T.matmul(T.gap(last_features), theta)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all little-endian):
#   magic "RPNW" | u32 version | u32 len + UTF-8 JSON config echo |
#   u32 tensor count | per tensor: u32 name len, name, u32 ndim, u32 dims..., f64 values

def save_checkpoint(path, params: dict[str, Tensor], config: BackboneConfig, extra: dict | None = None):
    meta = {"backbone": asdict(config), **(extra or {})}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, Tensor], BackboneConfig, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    try:
        return _parse_checkpoint(buf, dtype)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({e})") from None


def _parse_checkpoint(buf: bytes, dtype):
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        if off + 8 * size > len(buf):
            raise struct.error(f"tensor {name} needs {8 * size} bytes, {len(buf) - off} left")
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    config = BackboneConfig(**meta.pop("backbone"))
    return params, config, meta
