"""Spike-detector architecture for RR-interval rhythmograms.

A stack of residual blocks built from per-channel dilated convolutions with
squeeze-and-excitation gating.  Several block stacks run in parallel on the
embedded input; every block contributes a cropped skip projection, the summed
skips feed a small per-timestep head that emits one logit per output class.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, asdict
from typing import Iterator, NamedTuple

import numpy as np

from .autodiff import (
    Value,
    add,
    channel_mix,
    conv1d_depthwise,
    crop_time,
    gelu,
    insert_time_axis,
    mean_over_time,
    mul,
    sigmoid,
)

SE_REDUCTION = 4  # squeeze-and-excitation bottleneck ratio


def dilation_for_layer(n: int, k: int) -> int:
    """Dilation used by the n-th (1-based) convolutional layer of a stack."""
    if n < 1:
        raise ValueError(f"layer index must be >= 1, got {n}")
    if k < 2:
        raise ValueError(f"kernel size must be >= 2, got {k}")
    return k ** (n - 1)


def receptive_field(k: int, layers: int) -> int:
    """Input span visible to one output of a ``layers``-deep dilated stack."""
    if k < 2:
        raise ValueError(f"kernel size must be >= 2, got {k}")
    if layers < 1:
        raise ValueError(f"layer count must be >= 1, got {layers}")
    return (k - 1) * sum(k ** (i - 1) for i in range(1, layers + 1)) + 1


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture hyperparameters.  Defaults reproduce the reference setup."""

    kernel_size: int = 3
    base_channels: int = 32
    hidden_channels: int = 40
    side_channels: int = 72
    layers_per_block: int = 4
    num_stacks: int = 2
    segment_len: int = 32
    pad: int = 4
    num_classes: int = 1

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        for field in ("base_channels", "hidden_channels", "side_channels",
                      "layers_per_block", "num_stacks", "segment_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")
        if self.target_len < 1:
            raise ValueError(
                f"segment_len - 2*pad must be positive, got {self.segment_len} - 2*{self.pad}")
        deepest = dilation_for_layer(self.layers_per_block, self.kernel_size)
        if deepest > self.segment_len:
            raise ValueError(
                f"deepest dilation {deepest} does not fit segment length {self.segment_len}")

    @property
    def target_len(self) -> int:
        """Number of output samples per segment (central part of the window)."""
        return self.segment_len - 2 * self.pad

    @property
    def se_channels(self) -> int:
        return math.ceil(self.hidden_channels / SE_REDUCTION)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


def parameter_shapes(config: DetectorConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Canonical (name, shape, fan_in) inventory; fan_in 0 marks a bias."""
    taps = config.kernel_size
    base, hid = config.base_channels, config.hidden_channels
    side, classes = config.side_channels, config.num_classes
    squeeze = config.se_channels
    specs = [("embed.weight", (1, base), 1), ("embed.bias", (base,), 0)]
    for stack in range(config.num_stacks):
        for layer in range(config.layers_per_block):
            p = f"stack{stack}.block{layer}."
            specs += [
                (p + "expand.weight", (base, hid), base), (p + "expand.bias", (hid,), 0),
                (p + "conv.kernel", (taps, hid), taps), (p + "conv.bias", (hid,), 0),
                (p + "se_reduce.weight", (hid, squeeze), hid),
                (p + "se_reduce.bias", (squeeze,), 0),
                (p + "se_expand.weight", (squeeze, hid), squeeze),
                (p + "se_expand.bias", (hid,), 0),
                (p + "compress.weight", (hid, base), hid), (p + "compress.bias", (base,), 0),
                (p + "skip.weight", (base, side), base), (p + "skip.bias", (side,), 0),
            ]
    specs += [
        ("head.hidden.weight", (side, side), side), ("head.hidden.bias", (side,), 0),
        ("head.output.weight", (side, classes), side), ("head.output.bias", (classes,), 0),
    ]
    return specs


def param_count(config: DetectorConfig) -> int:
    """Exact number of learnable scalars for ``config``."""
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_shapes(config))


class BlockParams(NamedTuple):
    expand_weight: Value
    expand_bias: Value
    conv_kernel: Value
    conv_bias: Value
    se_reduce_weight: Value
    se_reduce_bias: Value
    se_expand_weight: Value
    se_expand_bias: Value
    compress_weight: Value
    compress_bias: Value
    skip_weight: Value
    skip_bias: Value


class DetectorParams:
    """The learned weight collection, keyed by canonical tensor names."""

    def __init__(self, config: DetectorConfig, tensors: dict[str, Value]):
        expected = parameter_shapes(config)
        if [n for n, _, _ in expected] != list(tensors):
            raise ValueError("tensor names do not match the config's parameter inventory")
        for name, shape, _ in expected:
            if tensors[name].data.shape != shape:
                raise ValueError(
                    f"tensor {name} has shape {tensors[name].data.shape}, expected {shape}")
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Value:
        return self._tensors[name]

    def items(self) -> Iterator[tuple[str, Value]]:
        return iter(self._tensors.items())

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grad(self):
        for v in self._tensors.values():
            v.zero_grad()

    def block(self, stack: int, layer: int) -> BlockParams:
        p = f"stack{stack}.block{layer}."
        return BlockParams(*(self._tensors[p + suffix] for suffix in (
            "expand.weight", "expand.bias", "conv.kernel", "conv.bias",
            "se_reduce.weight", "se_reduce.bias", "se_expand.weight", "se_expand.bias",
            "compress.weight", "compress.bias", "skip.weight", "skip.bias")))

    def copy(self) -> "DetectorParams":
        out = {n: Value(v.data.copy(), requires_grad=v.requires_grad)
               for n, v in self._tensors.items()}
        return DetectorParams(self.config, out)

    def allfinite(self) -> bool:
        return all(np.isfinite(v.data).all() for v in self._tensors.values())


def init_params(config: DetectorConfig, seed: int) -> DetectorParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in parameter_shapes(config):
        if fan_in == 0:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Value(data, requires_grad=True)
    return DetectorParams(config, tensors)


def residual_block_forward(x: Value, block: BlockParams, dilation: int,
                           crop_pad: int) -> tuple[Value, Value]:
    """One residual block: expand, dilated depthwise conv, SE gate, compress.

    Returns the residual output ``y`` (same shape as ``x``) and the skip
    projection of ``y`` cropped by ``crop_pad`` samples on each side.
    """
    u = gelu(channel_mix(x, block.expand_weight, block.expand_bias))
    v = gelu(conv1d_depthwise(u, block.conv_kernel, block.conv_bias, dilation))
    squeezed = mean_over_time(v)
    gate = sigmoid(channel_mix(
        gelu(channel_mix(squeezed, block.se_reduce_weight, block.se_reduce_bias)),
        block.se_expand_weight, block.se_expand_bias))
    gated = mul(v, insert_time_axis(gate))
    y = add(x, channel_mix(gated, block.compress_weight, block.compress_bias))
    skip = channel_mix(crop_time(y, crop_pad, crop_pad), block.skip_weight, block.skip_bias)
    return y, skip


def head_forward(skip_sum: Value, params: DetectorParams) -> Value:
    """Per-timestep map from summed skip channels to class logits."""
    hidden = gelu(channel_mix(skip_sum, params["head.hidden.weight"], params["head.hidden.bias"]))
    return channel_mix(hidden, params["head.output.weight"], params["head.output.bias"])


def detector_forward(rr: Value, params: DetectorParams,
                     config: DetectorConfig | None = None) -> Value:
    """Run the detector on normalized segments.

    ``rr`` is one segment of shape (segment_len, 1) or a batch of them,
    (B, segment_len, 1).  Returns pre-sigmoid logits with the time axis
    shortened to segment_len - 2*pad and num_classes channels.
    """
    config = config or params.config
    if config != params.config:
        raise ValueError("config does not match the parameter collection")
    if rr.data.ndim not in (2, 3) or rr.data.shape[-2:] != (config.segment_len, 1):
        raise ValueError(
            f"input shape {rr.data.shape} != (..., {config.segment_len}, 1)")
    embedded = channel_mix(rr, params["embed.weight"], params["embed.bias"])
    skip_sum = None
    for stack in range(config.num_stacks):
        x = embedded
        for layer in range(config.layers_per_block):
            dilation = dilation_for_layer(layer + 1, config.kernel_size)
            x, skip = residual_block_forward(x, params.block(stack, layer),
                                             dilation, config.pad)
            skip_sum = skip if skip_sum is None else add(skip_sum, skip)
    return head_forward(skip_sum, params)


# --- checkpoint container ----------------------------------------------------
#
# Self-describing binary layout, deterministic byte-for-byte:
#   magic "CSPK\x01", u32 little-endian header length, UTF-8 JSON header,
#   then every tensor payload as row-major little-endian float64 in header
#   order.  The header carries the full DetectorConfig and per-tensor
#   key/shape entries; multiple parameter sets live under distinct prefixes
#   (e.g. "fold3_epoch20/embed.weight").

CHECKPOINT_MAGIC = b"CSPK\x01"


def save_checkpoint(path, config: DetectorConfig,
                    param_sets: dict[str, DetectorParams] | DetectorParams) -> None:
    if isinstance(param_sets, DetectorParams):
        param_sets = {"": param_sets}
    entries = []
    payloads = []
    for prefix, params in param_sets.items():
        if params.config != config:
            raise ValueError(f"parameter set {prefix!r} was built for a different config")
        for name, value in params.items():
            key = f"{prefix}/{name}" if prefix else name
            entries.append({"key": key, "shape": list(value.data.shape)})
            payloads.append(np.ascontiguousarray(value.data, dtype="<f8").tobytes())
    header = json.dumps({"config": config.to_dict(), "tensors": entries},
                        separators=(",", ":"), sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[DetectorConfig, dict[str, DetectorParams]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        config = DetectorConfig.from_dict(header["config"])
        raw = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * 8)
            if len(blob) != count * 8:
                raise ValueError(f"{path}: truncated tensor payload for {entry['key']}")
            raw[entry["key"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in raw.items():
        prefix, _, name = key.rpartition("/")
        grouped.setdefault(prefix, {})[name] = arr
    sets = {}
    for prefix, tensors in grouped.items():
        ordered = {name: Value(tensors[name], requires_grad=True)
                   for name, _, _ in parameter_shapes(config)}
        sets[prefix] = DetectorParams(config, ordered)
    return config, sets
