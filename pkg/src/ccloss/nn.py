"""Layers, channel-attention module, backbones, and the two-headed classifier.

The classifier head is a hidden layer `f1` (features -> D) followed by a
classification layer `f2` (D -> K). The plain head computes

    p1 = f2(relu(f1(features)))

while the attention-gated head squeezes the backbone features into one
value per channel, runs them through a two-layer bottleneck ending in a
sigmoid, and multiplies the resulting (0, 1) attention vector into the
hidden activations elementwise:

    p2 = f2(relu(f1(features) * attention))

The attention matrix (one D-vector per sample) is returned alongside the
logits so the loss can penalize its pairwise distances.

A model is owned by one training loop; snapshot parameters for concurrent
read-only evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    conv2d_3x3,
    matmul,
    maxpool_2x2,
    mul,
    relu,
    reshape,
    sigmoid,
    transpose,
)


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Weight tensor drawn from normal(0, sqrt(2 / fan_in))."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(data.astype(dtype), requires_grad=True)


class LinearLayer:
    """Affine map x -> x W^T + b with weight shape (out, in)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"inconsistent linear shapes {weight.shape} / {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        weight = he_init((out_dim, in_dim), fan_in=in_dim, rng=rng, dtype=dtype)
        bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        return cls(weight, bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight)) + self.bias

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def default_reduction_ratio(channels: int) -> int:
    """Bottleneck ratio: the usual 16 for wide features, 2 for narrow ones."""
    return 16 if channels >= 32 else 2


class ChannelAttentionModule:
    """Squeeze-excite bottleneck producing a (0, 1) attention vector per sample.

    `fc_reduce` maps the per-channel squeeze (one pooled value per channel)
    down by `reduction_ratio`, `fc_expand` maps back up to the hidden
    dimensionality D so the attention can gate the hidden activations.
    """

    def __init__(self, fc_reduce: LinearLayer, fc_expand: LinearLayer, reduction_ratio: int):
        self.fc_reduce = fc_reduce
        self.fc_expand = fc_expand
        self.reduction_ratio = reduction_ratio

    @classmethod
    def init(
        cls,
        channels: int,
        out_dim: int,
        rng: np.random.Generator,
        dtype=np.float32,
        reduction_ratio: Optional[int] = None,
    ):
        r = default_reduction_ratio(channels) if reduction_ratio is None else reduction_ratio
        if channels % r:
            raise ShapeError(f"channel count {channels} not divisible by reduction ratio {r}")
        return cls(
            LinearLayer.init(channels, channels // r, rng, dtype),
            LinearLayer.init(channels // r, out_dim, rng, dtype),
            r,
        )

    def __call__(self, squeezed: Tensor) -> Tensor:
        return sigmoid(self.fc_expand(relu(self.fc_reduce(squeezed))))

    def named_params(self, prefix: str):
        return self.fc_reduce.named_params(f"{prefix}.reduce") + self.fc_expand.named_params(
            f"{prefix}.expand"
        )


def squeeze_excite(cam: ChannelAttentionModule, features: Tensor, channel_geometry=None) -> Tensor:
    """Attention vectors for a batch of flattened backbone features.

    For conv backbones `channel_geometry = (C, H, W)` describes the layout
    of each flattened row; the squeeze is a global average pool per
    channel. Dense backbones pass None: their features are already one
    value per channel.
    """
    if channel_geometry is None:
        squeezed = features
    else:
        c, h, w = channel_geometry
        if features.shape[1] != c * h * w:
            raise ShapeError(
                f"features of width {features.shape[1]} do not match geometry {channel_geometry}"
            )
        squeezed = reshape(features, (features.shape[0], c, h * w)).mean(axis=2)
    if squeezed.shape[1] != cam.fc_reduce.in_dim:
        raise ShapeError(
            f"squeeze width {squeezed.shape[1]} does not match attention input {cam.fc_reduce.in_dim}"
        )
    return cam(squeezed)


class TinyCNN:
    """Two 3x3 conv + relu + 2x2 pool stages (in -> 8 -> 16 channels), flattened."""

    CHANNELS = (8, 16)

    def __init__(self, conv1_w, conv1_b, conv2_w, conv2_b, in_shape):
        self.conv1_w = conv1_w
        self.conv1_b = conv1_b
        self.conv2_w = conv2_w
        self.conv2_b = conv2_b
        self.in_shape = tuple(in_shape)  # (C, H, W)

    @classmethod
    def init(cls, in_shape, rng: np.random.Generator, dtype=np.float32):
        c, h, w = in_shape
        if h % 4 or w % 4:
            raise ShapeError(f"input spatial dims must be divisible by 4, got {h} x {w}")
        c1, c2 = cls.CHANNELS
        return cls(
            he_init((c1, c, 3, 3), fan_in=c * 9, rng=rng, dtype=dtype),
            Tensor(np.zeros(c1, dtype=dtype), requires_grad=True),
            he_init((c2, c1, 3, 3), fan_in=c1 * 9, rng=rng, dtype=dtype),
            Tensor(np.zeros(c2, dtype=dtype), requires_grad=True),
            in_shape,
        )

    @property
    def feature_dim(self) -> int:
        _, h, w = self.in_shape
        return self.CHANNELS[1] * (h // 4) * (w // 4)

    @property
    def channel_geometry(self):
        _, h, w = self.in_shape
        return (self.CHANNELS[1], h // 4, w // 4)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"expected batch of shape {self.in_shape}, got {x.shape}")
        h = maxpool_2x2(relu(conv2d_3x3(x, self.conv1_w, self.conv1_b)))
        h = maxpool_2x2(relu(conv2d_3x3(h, self.conv2_w, self.conv2_b)))
        return reshape(h, (x.shape[0], self.feature_dim))

    def named_params(self, prefix: str):
        return [
            (f"{prefix}.conv1.weight", self.conv1_w),
            (f"{prefix}.conv1.bias", self.conv1_b),
            (f"{prefix}.conv2.weight", self.conv2_w),
            (f"{prefix}.conv2.bias", self.conv2_b),
        ]


class MLPBackbone:
    """Stack of linear + relu layers over flattened inputs."""

    def __init__(self, layers: list[LinearLayer], in_dim: int):
        self.layers = layers
        self.in_dim = in_dim

    @classmethod
    def init(cls, in_dim: int, widths, rng: np.random.Generator, dtype=np.float32):
        layers = []
        prev = in_dim
        for width in widths:
            layers.append(LinearLayer.init(prev, width, rng, dtype))
            prev = width
        if not layers:
            raise ValueError("MLP backbone needs at least one layer")
        return cls(layers, in_dim)

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    channel_geometry = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            x = reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected {self.in_dim} input features, got {x.shape[1]}")
        for layer in self.layers:
            x = relu(layer(x))
        return x

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"{prefix}.{i}")
        return out


@dataclass
class Model:
    """Backbone + attention module + the two classifier layers."""

    backbone: object
    cam: ChannelAttentionModule
    f1: LinearLayer
    f2: LinearLayer

    @property
    def hidden_dim(self) -> int:
        return self.f1.out_dim

    @property
    def class_count(self) -> int:
        return self.f2.out_dim

    @classmethod
    def init(
        cls,
        backbone,
        hidden_dim: int,
        class_count: int,
        rng: np.random.Generator,
        dtype=np.float32,
        reduction_ratio: Optional[int] = None,
    ):
        n = backbone.feature_dim
        geometry = backbone.channel_geometry
        channels = n if geometry is None else geometry[0]
        return cls(
            backbone=backbone,
            cam=ChannelAttentionModule.init(channels, hidden_dim, rng, dtype, reduction_ratio),
            f1=LinearLayer.init(n, hidden_dim, rng, dtype),
            f2=LinearLayer.init(hidden_dim, class_count, rng, dtype),
        )

    def hidden_plain(self, x: Tensor) -> Tensor:
        return relu(self.f1(self.backbone(x)))

    def forward_plain(self, x: Tensor) -> Tensor:
        """Logits of the ungated head."""
        return self.f2(self.hidden_plain(x))

    def attention(self, x: Tensor) -> Tensor:
        return squeeze_excite(self.cam, self.backbone(x), self.backbone.channel_geometry)

    def hidden_gated(self, x: Tensor) -> tuple[Tensor, Tensor]:
        features = self.backbone(x)
        att = squeeze_excite(self.cam, features, self.backbone.channel_geometry)
        return relu(mul(self.f1(features), att)), att

    def forward_cam(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(logits of the gated head, N x D attention matrix)."""
        hidden, att = self.hidden_gated(x)
        return self.f2(hidden), att

    def named_params(self) -> list[tuple[str, Tensor]]:
        return (
            self.backbone.named_params("backbone")
            + self.cam.named_params("cam")
            + self.f1.named_params("f1")
            + self.f2.named_params("f2")
        )

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_params():
            if name not in state:
                raise CheckpointError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape}, model expects {t.data.shape}"
                )
            t.data = arr.astype(t.dtype)
            t.grad = None


# -- checkpoint format ----------------------------------------------------------
#
# Little-endian binary: magic "CCL1", version u32, tensor count u32, then per
# tensor {name length u32, UTF-8 name, rank u32, dims u32 each, f32 payload}.

CHECKPOINT_MAGIC = b"CCL1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint file or parameter mismatch."""


def save_checkpoint(path, named_params) -> None:
    if hasattr(named_params, "named_params"):
        named_params = named_params.named_params()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_params)))
        for name, tensor in named_params:
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(tensor.data if isinstance(tensor, Tensor) else tensor,
                                        dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    def read(fh, size, what):
        buf = fh.read(size)
        if len(buf) != size:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return buf

    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if read(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic (expected CCL1)")
        version, count = struct.unpack("<II", read(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read(fh, 4, "name length"))
            name = read(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", read(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", read(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            payload = read(fh, 4 * size, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors
