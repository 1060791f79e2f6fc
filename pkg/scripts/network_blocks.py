#!/usr/bin/env python3
"""
SODAWideNet Assembly
====================

Builds the wide-and-shallow salient object detection network out of the
tensor engine primitives:

- U-Net primitives: conv_b, double_conv, down_block, up_block
- MRFFAM: channel-split parallel dilated branches (two ConvB per rate)
- LPM: two-scale local 3x3 processing with successive max pooling
- MSA: average-pool pyramid with cross-resolution attention
- CFM: GroupNorm stream refinement and multiplicative n-way fusion
- Hybrid blocks (encoder) and convolution blocks (decoder)
- Two 1x1 output heads: saliency and (optionally) contour

Parameters live in a flat NetworkState keyed by dotted paths; every block
function takes a ParamView scoped to its own prefix. Each ``init_*`` helper
registers exactly the parameters the matching forward function reads.
"""

import logging
import math
import pathlib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_engine import (
    BATCHNORM_MOMENTUM,
    ConvWeights,
    RunningStats,
    ShapeError,
    Tensor,
    activation,
    bilinear_upsample,
    concat,
    conv2d,
    channel_slice,
    mul,
    normalize,
    pool2d,
    reshape,
    scaled_dot_attention,
    transpose,
)
from tensor_io import decode_checkpoint, encode_checkpoint

logger = logging.getLogger(__name__)

PUBLISHED_PARAMETER_TOTALS = {"full": 9.03e6, "small": 3.03e6}
REFERENCE_RESOLUTION = 384
ENCODER_BLOCKS = ("HB1", "HB2")
DECODER_BLOCKS = ("CB2", "CB3")
# initial foreground probability of the output heads
HEAD_PRIOR = 0.03


class ConfigError(ValueError):
    """Raised when a NetworkConfig violates a structural constraint."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleEntry:
    block: str
    input_shape: Tuple[int, int, int]   # H, W, C at the reference resolution
    rates: Tuple[int, ...]
    output_shape: Tuple[int, int, int]


def _reference_shapes(block: str, base_channels: int = 64) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
    r, c = REFERENCE_RESOLUTION, base_channels
    return {
        "HB1": ((r // 2, r // 2, c), (r // 4, r // 4, 2 * c)),
        "HB2": ((r // 4, r // 4, 2 * c), (r // 8, r // 8, 2 * c)),
        "CB2": ((r // 8, r // 8, c), (r // 8, r // 8, c)),
        "CB3": ((r // 4, r // 4, c), (r // 4, r // 4, c)),
    }[block]


@dataclass
class DilationSchedule:
    """Per-block dilation rates; the default reproduces the published table."""

    entries: List[ScheduleEntry]

    @classmethod
    def from_rates(cls, rates: Dict[str, Sequence[int]]) -> "DilationSchedule":
        missing = [b for b in ENCODER_BLOCKS + DECODER_BLOCKS if b not in rates]
        if missing:
            raise ConfigError(f"dilation_schedule is missing blocks: {missing}")
        entries = []
        for block in ENCODER_BLOCKS + DECODER_BLOCKS:
            inp, out = _reference_shapes(block)
            entries.append(ScheduleEntry(block, inp, tuple(int(r) for r in rates[block]), out))
        return cls(entries)

    @classmethod
    def published(cls) -> "DilationSchedule":
        return cls.from_rates({
            "HB1": (6, 10, 14, 18, 22),
            "HB2": (6, 10, 14, 18),
            "CB2": (6, 10, 14, 18),
            "CB3": (6, 10, 14, 18, 22),
        })

    def rates(self, block: str) -> Tuple[int, ...]:
        for entry in self.entries:
            if entry.block == block:
                return entry.rates
        raise ConfigError(f"no dilation rates configured for block {block}")

    def as_dict(self) -> Dict[str, List[int]]:
        return {e.block: list(e.rates) for e in self.entries}

    def validate(self) -> None:
        for entry in self.entries:
            if not entry.rates:
                raise ConfigError(f"dilation_schedule.{entry.block}: rates must be nonempty")
            if any(r < 1 for r in entry.rates):
                raise ConfigError(f"dilation_schedule.{entry.block}: rates must be >= 1, got {entry.rates}")
            if any(b <= a for a, b in zip(entry.rates, entry.rates[1:])):
                raise ConfigError(f"dilation_schedule.{entry.block}: rates must be strictly increasing, got {entry.rates}")


@dataclass
class NetworkConfig:
    variant: str = "full"
    base_channels: int = 64
    width_multiplier: float = 1.0
    dilation_schedule: DilationSchedule = field(default_factory=DilationSchedule.published)
    enable_msa: bool = True
    enable_mrffam: bool = True
    enable_mrffam_decoder: bool = True
    enable_lpm: bool = True
    enable_contour_head: bool = True
    attention_heads: int = 1
    groupnorm_groups: int = 8
    input_resolution: int = REFERENCE_RESOLUTION

    @property
    def channels(self) -> int:
        """Effective base width after the width multiplier."""
        return int(round(self.base_channels * self.width_multiplier))

    def validate(self) -> "NetworkConfig":
        if self.variant not in ("full", "small"):
            raise ConfigError(f"variant must be 'full' or 'small', got {self.variant!r}")
        if self.base_channels < 1 or self.width_multiplier <= 0 or self.channels < 1:
            raise ConfigError(
                f"base_channels/width_multiplier give non-positive width: "
                f"{self.base_channels} x {self.width_multiplier}"
            )
        if self.groupnorm_groups < 1 or self.channels % self.groupnorm_groups:
            raise ConfigError(
                f"groupnorm_groups={self.groupnorm_groups} must divide the effective base width {self.channels}"
            )
        if self.attention_heads < 1 or self.channels % self.attention_heads:
            raise ConfigError(
                f"attention_heads={self.attention_heads} must divide the effective base width {self.channels}"
            )
        if self.input_resolution < 16 or self.input_resolution % 16:
            raise ConfigError(f"input_resolution must be a positive multiple of 16, got {self.input_resolution}")
        if not (self.enable_msa or self.enable_mrffam or self.enable_lpm):
            raise ConfigError("at least one of enable_msa/enable_mrffam/enable_lpm must be set (hybrid blocks need a branch)")
        self.dilation_schedule.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["dilation_schedule"] = self.dilation_schedule.as_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown network config fields: {unknown}")
        values = dict(payload)
        if "dilation_schedule" in values and not isinstance(values["dilation_schedule"], DilationSchedule):
            values["dilation_schedule"] = DilationSchedule.from_rates(values["dilation_schedule"])
        return cls(**values).validate()


def preset(name: str) -> NetworkConfig:
    """Named configurations: full, small, toy and the single-component ablations."""
    ablations = {
        "no_contours": "enable_contour_head",
        "no_msa": "enable_msa",
        "no_mrffam": "enable_mrffam",
        "no_decoder_mrffam": "enable_mrffam_decoder",
        "no_lpm": "enable_lpm",
    }
    if name == "full":
        config = NetworkConfig()
    elif name == "small":
        config = NetworkConfig(variant="small", width_multiplier=0.5)
    elif name == "toy":
        config = NetworkConfig(base_channels=8, groupnorm_groups=8, input_resolution=96)
    elif name in ablations:
        config = NetworkConfig(**{ablations[name]: False})
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from full, small, toy, {', '.join(ablations)}")
    return config.validate()


# ---------------------------------------------------------------------------
# Parameter state
# ---------------------------------------------------------------------------

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(path: str) -> bool:
    return path.endswith(BUFFER_SUFFIXES)


@dataclass
class NetworkState:
    params: Dict[str, Tensor]
    config: NetworkConfig
    stats_momentum: float = BATCHNORM_MOMENTUM

    def view(self, prefix: str = "") -> "ParamView":
        return ParamView(self, prefix)

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors only (running statistics excluded)."""
        return {k: v for k, v in self.params.items() if not is_buffer(k)}

    def replace(self, path: str, tensor: Tensor) -> None:
        if path not in self.params:
            raise KeyError(f"unknown parameter path: {path}")
        self.params[path] = tensor


class ParamView:
    """Prefix-scoped window onto a NetworkState."""

    def __init__(self, state: NetworkState, prefix: str):
        self.state = state
        self.prefix = prefix

    def path(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        path = self.path(name)
        try:
            return self.state.params[path]
        except KeyError:
            raise KeyError(f"missing parameter {path} (was the block initialised with the same config?)") from None

    def child(self, name: str) -> "ParamView":
        return ParamView(self.state, self.path(name))

    def running_stats(self, name: str) -> RunningStats:
        return RunningStats(
            self[f"{name}.running_mean"].data.copy(),
            self[f"{name}.running_var"].data.copy(),
            self.state.stats_momentum,
        )

    def store_running_stats(self, name: str, stats: RunningStats) -> None:
        self.state.params[self.path(f"{name}.running_mean")] = Tensor(stats.mean)
        self.state.params[self.path(f"{name}.running_var")] = Tensor(stats.var)


class Initializer:
    """Deterministic parameter factory: Kaiming fan-out kernels, zero biases."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}

    def _add(self, path: str, array: np.ndarray, trainable: bool = True) -> None:
        if path in self.params:
            raise ConfigError(f"duplicate parameter path: {path}")
        self.params[path] = Tensor(array, requires_grad=trainable, dtype=self.dtype)

    def conv(self, prefix: str, c_in: int, c_out: int, kernel: int = 3, bias: bool = False) -> None:
        fan_out = c_out * kernel * kernel
        std = math.sqrt(2.0 / fan_out)
        self._add(f"{prefix}.weight", self.rng.standard_normal((c_out, c_in, kernel, kernel)) * std)
        if bias:
            self._add(f"{prefix}.bias", np.zeros(c_out))

    def head(self, prefix: str, c_in: int, prior: float = HEAD_PRIOR) -> None:
        """1x1 single-logit head whose bias starts at the log-odds of ``prior``."""
        self.conv(prefix, c_in, 1, kernel=1)
        self._add(f"{prefix}.bias", np.full(1, math.log(prior / (1.0 - prior))))

    def norm(self, prefix: str, channels: int, running: bool) -> None:
        self._add(f"{prefix}.scale", np.ones(channels))
        self._add(f"{prefix}.shift", np.zeros(channels))
        if running:
            self._add(f"{prefix}.running_mean", np.zeros(channels), trainable=False)
            self._add(f"{prefix}.running_var", np.ones(channels), trainable=False)


def _conv(x: Tensor, weights: ParamView, name: str, padding: int = 0, dilation: int = 1) -> Tensor:
    bias_path = weights.path(f"{name}.bias")
    bias = weights.state.params.get(bias_path)
    return conv2d(x, ConvWeights(weights[f"{name}.weight"], bias, padding=padding, dilation=dilation))


# ---------------------------------------------------------------------------
# U-Net primitives
# ---------------------------------------------------------------------------

def init_conv_b(init: Initializer, prefix: str, c_in: int, c_out: int) -> None:
    init.conv(f"{prefix}.conv", c_in, c_out)
    init.norm(f"{prefix}.bn", c_out, running=True)


def conv_b(x: Tensor, d: int, weights: ParamView, training: bool = True) -> Tensor:
    """
    ReLU(BN(3x3 conv with dilation d)), 'same' padding.

    In training mode the updated running statistics are written back into
    the state the view belongs to.
    """
    y = _conv(x, weights, "conv", padding=d, dilation=d)
    stats = weights.running_stats("bn")
    y = normalize(y, "batch", weights["bn.scale"], weights["bn.shift"], training=training, running_stats=stats)
    if training:
        weights.store_running_stats("bn", stats)
    return activation(y, "relu")


def init_double_conv(init: Initializer, prefix: str, c_in: int, c_out: int) -> None:
    init_conv_b(init, f"{prefix}.first", c_in, c_out)
    init_conv_b(init, f"{prefix}.second", c_out, c_out)


def double_conv(x: Tensor, weights: ParamView, training: bool = True) -> Tensor:
    return conv_b(conv_b(x, 1, weights.child("first"), training), 1, weights.child("second"), training)


def init_down_block(init: Initializer, prefix: str, c_in: int, c_out: int) -> None:
    init_double_conv(init, prefix, c_in, c_out)


def down_block(x: Tensor, weights: ParamView, training: bool = True) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"down_block needs even spatial dims, got {x.shape}")
    return double_conv(pool2d(x, "max", 2, 2), weights, training)


def init_up_block(init: Initializer, prefix: str, c_in: int, c_skip: int, c_out: int) -> None:
    init_double_conv(init, prefix, c_in + c_skip, c_out)


def up_block(x: Tensor, skip: Tensor, weights: ParamView, training: bool = True) -> Tensor:
    upsampled = bilinear_upsample(x, 2)
    if upsampled.shape[2:] != skip.shape[2:]:
        raise ShapeError(f"up_block spatial mismatch: upsampled {upsampled.shape} vs skip {skip.shape}")
    return double_conv(concat([upsampled, skip]), weights, training)


# ---------------------------------------------------------------------------
# MRFFAM
# ---------------------------------------------------------------------------

def mrffam_width(c_in: int, n_rates: int) -> int:
    """Smallest multiple of the branch count that is >= the input width."""
    return n_rates * math.ceil(c_in / n_rates)


def init_mrffam(init: Initializer, prefix: str, c_in: int, c_out: int, rates: Sequence[int]) -> None:
    width = mrffam_width(c_in, len(rates))
    branch = width // len(rates)
    init.conv(f"{prefix}.project", c_in, width, kernel=1, bias=True)
    for i in range(len(rates)):
        init_conv_b(init, f"{prefix}.branch{i}.first", branch, branch)
        init_conv_b(init, f"{prefix}.branch{i}.second", branch, branch)
    init.conv(f"{prefix}.fuse", width, c_out, kernel=1, bias=True)


def mrffam(x: Tensor, rates: Sequence[int], weights: ParamView, training: bool = True) -> Tensor:
    """Project, split into one group per rate, two dilated ConvB per group, concat, fuse."""
    if not rates:
        raise ShapeError("mrffam needs at least one dilation rate")
    projected = _conv(x, weights, "project")
    branch = projected.shape[1] // len(rates)
    outputs = []
    for i, rate in enumerate(rates):
        part = channel_slice(projected, i * branch, (i + 1) * branch)
        part = conv_b(part, rate, weights.child(f"branch{i}.first"), training)
        outputs.append(conv_b(part, rate, weights.child(f"branch{i}.second"), training))
    return _conv(concat(outputs), weights, "fuse")


# ---------------------------------------------------------------------------
# LPM
# ---------------------------------------------------------------------------

def init_lpm(init: Initializer, prefix: str, channels: int) -> None:
    init_conv_b(init, f"{prefix}.local", channels, channels)
    init_conv_b(init, f"{prefix}.coarse1", channels, channels)
    init_conv_b(init, f"{prefix}.coarse2", channels, channels)
    init.conv(f"{prefix}.fuse", 2 * channels, channels, kernel=1, bias=True)


def lpm(x: Tensor, weights: ParamView, training: bool = True) -> Tensor:
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"lpm needs spatial dims divisible by 4, got {x.shape}")
    local = conv_b(x, 1, weights.child("local"), training)
    coarse = conv_b(pool2d(x, "max", 2, 2), 1, weights.child("coarse1"), training)
    coarse = conv_b(pool2d(coarse, "max", 2, 2), 1, weights.child("coarse2"), training)
    coarse = bilinear_upsample(coarse, 4)
    return _conv(concat([local, coarse]), weights, "fuse")


# ---------------------------------------------------------------------------
# MSA
# ---------------------------------------------------------------------------

def msa_levels(block_size: int, input_size: int) -> int:
    """Number of factor-2 poolings from a block's resolution down to input/16."""
    lowest = input_size // 16
    if lowest < 1 or input_size % 16 or block_size % lowest:
        raise ShapeError(f"cannot reach the 1/16 level ({input_size}/16) from a {block_size} block")
    ratio = block_size // lowest
    levels = int(round(math.log2(ratio))) if ratio >= 1 else -1
    if levels < 1 or 2 ** levels != ratio:
        raise ShapeError(
            f"block resolution {block_size} is not a power-of-two multiple (>= 2) of the lowest level {lowest}"
        )
    return levels


def init_msa(init: Initializer, prefix: str, channels: int, levels: int) -> None:
    for k in range(1, levels + 1):
        init_double_conv(init, f"{prefix}.level{k}", channels, channels)
    for step in [f"step{k}" for k in range(1, levels + 1)] + ["final"]:
        for proj in ("query", "key", "value"):
            init.conv(f"{prefix}.{step}.{proj}", channels, channels, kernel=1, bias=True)
    init.conv(f"{prefix}.fuse", channels, channels, kernel=1, bias=True)


def _tokens(x: Tensor, heads: int) -> Tensor:
    n, c, h, w = x.shape
    flat = transpose(reshape(x, (n, c, h * w)), (0, 2, 1))
    if heads == 1:
        return flat
    split = transpose(reshape(flat, (n, h * w, heads, c // heads)), (0, 2, 1, 3))
    return reshape(split, (n * heads, h * w, c // heads))


def _feature_map(tokens: Tensor, n: int, c: int, h: int, w: int, heads: int) -> Tensor:
    if heads > 1:
        merged = transpose(reshape(tokens, (n, heads, h * w, c // heads)), (0, 2, 1, 3))
        tokens = reshape(merged, (n, h * w, c))
    return reshape(transpose(tokens, (0, 2, 1)), (n, c, h, w))


def attend(query_map: Tensor, kv_map: Tensor, weights: ParamView, heads: int = 1) -> Tensor:
    """Cross-resolution attention; the output keeps the query map's resolution."""
    n, c, h, w = query_map.shape
    q = _tokens(_conv(query_map, weights, "query"), heads)
    k = _tokens(_conv(kv_map, weights, "key"), heads)
    v = _tokens(_conv(kv_map, weights, "value"), heads)
    out = _feature_map(scaled_dot_attention(q, k, v), n, c, h, w, heads)
    if out.shape[2:] != query_map.shape[2:]:
        raise ShapeError(f"attention output {out.shape} does not match query map {query_map.shape}")
    return out


def msa(
    x: Tensor,
    weights: ParamView,
    levels: int,
    heads: int = 1,
    training: bool = True,
    steps: Optional[List[Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]]] = None,
) -> Tensor:
    """
    Multi-scale attention over an average-pooled pyramid.

    Args:
        x: block input (its resolution is pyramid level 0)
        weights: MSA parameters initialised with the same ``levels``
        levels: number of factor-2 poolings down to the lowest level
        heads: attention heads (feature dimension split evenly)
        training: batch-norm mode for the pyramid refinements
        steps: optional list receiving (query, key/value, output) shapes per step

    Returns:
        Tensor: fused features at x's resolution and channel count
    """
    factor = 2 ** levels
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"msa input {x.shape} cannot be pooled {levels} times by 2")
    pyramid = [x]
    for k in range(1, levels + 1):
        pooled = pool2d(pyramid[-1], "avg", 2, 2)
        pyramid.append(double_conv(pooled, weights.child(f"level{k}"), training))

    previous = pyramid[0]
    for k in range(1, levels + 1):
        result = attend(pyramid[k], previous, weights.child(f"step{k}"), heads)
        if steps is not None:
            steps.append((pyramid[k].shape, previous.shape, result.shape))
        previous = result
    final = attend(previous, pyramid[0], weights.child("final"), heads)
    if steps is not None:
        steps.append((previous.shape, pyramid[0].shape, final.shape))
    return _conv(bilinear_upsample(final, factor), weights, "fuse")


# ---------------------------------------------------------------------------
# CFM
# ---------------------------------------------------------------------------

def init_conv_gn(init: Initializer, prefix: str, c_in: int, c_out: int) -> None:
    init.conv(f"{prefix}.conv", c_in, c_out)
    init.norm(f"{prefix}.gn", c_out, running=False)


def conv_gn(x: Tensor, weights: ParamView, groups: int) -> Tensor:
    """The CFM Conv layer: ReLU(GroupNorm(3x3 conv))."""
    y = _conv(x, weights, "conv", padding=1)
    return activation(normalize(y, "group", weights["gn.scale"], weights["gn.shift"], groups=groups), "relu")


def init_cfm(init: Initializer, prefix: str, in_channels: Dict[str, int], c_out: int) -> None:
    for name, c_in in in_channels.items():
        init_conv_gn(init, f"{prefix}.{name}.first", c_in, c_out)
        init_conv_gn(init, f"{prefix}.{name}.second", c_out, c_out)
    init_conv_gn(init, f"{prefix}.final", c_out, c_out)


def cfm(
    inputs: Sequence[Tensor],
    weights: ParamView,
    groups: int = 8,
    names: Optional[Sequence[str]] = None,
) -> Tensor:
    """
    Refine each stream with two Conv layers, fuse multiplicatively, finish with one Conv.

    With two or more streams the fused map is sum_i(stream_i * sum_j stream_j);
    a single stream passes through unchanged, so the block reduces to three
    serial Conv layers.
    """
    if not inputs:
        raise ValueError("cfm needs at least one input stream")
    names = list(names) if names is not None else [f"stream{i}" for i in range(len(inputs))]
    if len(names) != len(inputs):
        raise ValueError(f"cfm got {len(inputs)} inputs but {len(names)} stream names")
    spatial = inputs[0].shape[2:]
    for t in inputs:
        if t.shape[2:] != spatial or t.shape[0] != inputs[0].shape[0]:
            raise ShapeError(f"cfm inputs must share batch and spatial dims: {[t.shape for t in inputs]}")

    refined = []
    for name, stream in zip(names, inputs):
        stream = conv_gn(stream, weights.child(f"{name}.first"), groups)
        refined.append(conv_gn(stream, weights.child(f"{name}.second"), groups))

    if len(refined) == 1:
        fused = refined[0]
    else:
        total = refined[0]
        for stream in refined[1:]:
            total = total + stream
        fused = mul(refined[0], total)
        for stream in refined[1:]:
            fused = fused + mul(stream, total)
    return conv_gn(fused, weights.child("final"), groups)


# ---------------------------------------------------------------------------
# Hybrid and convolution blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEntry:
    block: str
    input_shape: Tuple[int, ...]    # N, C, H, W
    output_shape: Tuple[int, ...]
    rates: Tuple[int, ...]

    @staticmethod
    def _hwc(shape: Sequence[int]) -> str:
        return f"{shape[2]}x{shape[3]}x{shape[1]}"

    def table_row(self) -> Tuple[str, str, str, str]:
        rates = ", ".join(str(r) for r in self.rates) if self.rates else "-"
        return self._hwc(self.input_shape), self.block, rates, self._hwc(self.output_shape)


def encoder_branches(config: NetworkConfig) -> List[str]:
    names = []
    if config.enable_mrffam:
        names.append("mrffam")
    if config.enable_lpm:
        names.append("lpm")
    if config.enable_msa:
        names.append("msa")
    return names


def init_hybrid_block(init: Initializer, prefix: str, config: NetworkConfig, block: str,
                      c_in: int, c_out: int, levels: int) -> None:
    branches = encoder_branches(config)
    if not branches:
        raise ConfigError("hybrid block has no enabled branch (enable_msa/enable_mrffam/enable_lpm all off)")
    if "mrffam" in branches:
        init_mrffam(init, f"{prefix}.mrffam", c_in, c_in, config.dilation_schedule.rates(block))
    if "lpm" in branches:
        init_lpm(init, f"{prefix}.lpm", c_in)
    if "msa" in branches:
        init_msa(init, f"{prefix}.msa", c_in, levels)
    init_cfm(init, f"{prefix}.cfm", {name: c_in for name in branches}, c_in)
    init.conv(f"{prefix}.expand", c_in, c_out, kernel=1, bias=True)


def hybrid_block(
    x: Tensor,
    weights: ParamView,
    config: NetworkConfig,
    block: str = "HB1",
    training: bool = True,
    trace: Optional[List[TraceEntry]] = None,
) -> Tensor:
    """CFM(MRFFAM, LPM, MSA) over the enabled branches, then max-pool and 1x1 channel expansion."""
    branches = encoder_branches(config)
    if not branches:
        raise ConfigError("hybrid block has no enabled branch (enable_msa/enable_mrffam/enable_lpm all off)")
    rates = config.dilation_schedule.rates(block)
    streams = []
    for name in branches:
        if name == "mrffam":
            streams.append(mrffam(x, rates, weights.child("mrffam"), training))
        elif name == "lpm":
            streams.append(lpm(x, weights.child("lpm"), training))
        else:
            levels = msa_levels(x.shape[2], config.input_resolution)
            streams.append(msa(x, weights.child("msa"), levels, config.attention_heads, training))
    fused = cfm(streams, weights.child("cfm"), config.groupnorm_groups, branches)
    out = _conv(pool2d(fused, "max", 2, 2), weights, "expand")
    if trace is not None:
        trace.append(TraceEntry(block, x.shape, out.shape, rates if config.enable_mrffam else ()))
    return out


def init_decoder_block(init: Initializer, prefix: str, config: NetworkConfig, block: str,
                       channels: int, c_skip: Optional[int]) -> None:
    streams = {"identity": channels}
    if config.enable_mrffam_decoder:
        init_mrffam(init, f"{prefix}.mrffam", channels, channels, config.dilation_schedule.rates(block))
        streams = {"mrffam": channels, "identity": channels}
    init_cfm(init, f"{prefix}.cfm", streams, channels)
    if c_skip is not None:
        init_up_block(init, f"{prefix}.up", channels, c_skip, channels)


def decoder_block(
    x: Tensor,
    weights: ParamView,
    config: NetworkConfig,
    block: str = "CB2",
    skip: Optional[Tensor] = None,
    training: bool = True,
    trace: Optional[List[TraceEntry]] = None,
) -> Tensor:
    """
    CFM(MRFFAM(x), x) followed by x2 bilinear upsampling.

    When a U-Net skip tensor is given the upsampling is the up_block
    (upsample, concat with the skip, Double_Conv).
    """
    rates = config.dilation_schedule.rates(block)
    if config.enable_mrffam_decoder:
        streams, names = [mrffam(x, rates, weights.child("mrffam"), training), x], ["mrffam", "identity"]
    else:
        streams, names = [x], ["identity"]
    fused = cfm(streams, weights.child("cfm"), config.groupnorm_groups, names)
    if trace is not None:
        trace.append(TraceEntry(block, x.shape, fused.shape, rates if config.enable_mrffam_decoder else ()))
    if skip is None:
        return bilinear_upsample(fused, 2)
    return up_block(fused, skip, weights.child("up"), training)


# ---------------------------------------------------------------------------
# Whole network
# ---------------------------------------------------------------------------

def assemble_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkState:
    """
    Build every parameter of the network for ``config`` deterministically from ``seed``.

    Raises:
        ConfigError: when the configuration violates a constraint (field named)
    """
    config.validate()
    c = config.channels
    r = config.input_resolution
    init = Initializer(seed, dtype)

    init_double_conv(init, "stem", 3, c)
    init_hybrid_block(init, "hb1", config, "HB1", c, 2 * c, msa_levels(r // 2, r))
    init_hybrid_block(init, "hb2", config, "HB2", 2 * c, 2 * c, msa_levels(r // 4, r))
    init_double_conv(init, "bottleneck", 2 * c, c)
    init_decoder_block(init, "cb2", config, "CB2", c, 2 * c)
    init_decoder_block(init, "cb3", config, "CB3", c, c)
    init.head("saliency_head", c)
    if config.enable_contour_head:
        init.head("contour_head", c)

    state = NetworkState(init.params, config)
    logger.debug(f"Assembled network: {len(state.params)} tensors, seed={seed}, dtype={np.dtype(dtype).name}")
    return state


def forward(
    state: NetworkState,
    batch: Tensor,
    training: bool = True,
    trace: Optional[List[TraceEntry]] = None,
) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Run the network on an N x 3 x R x R batch.

    With training=True every batch-norm layer updates its running statistics
    in ``state.params``, so the caller needs exclusive access to the state.
    Eval mode only reads the state.

    Returns:
        tuple: (saliency logits N x 1 x R x R, contour logits or None)
    """
    config = state.config
    r = config.input_resolution
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (r, r):
        raise ShapeError(f"expected a batch of shape (N, 3, {r}, {r}), got {batch.shape}")
    root = state.view()

    stem = double_conv(batch, root.child("stem"), training)
    e0 = pool2d(stem, "max", 2, 2)
    hb1 = hybrid_block(e0, root.child("hb1"), config, "HB1", training, trace)
    hb2 = hybrid_block(hb1, root.child("hb2"), config, "HB2", training, trace)
    bottleneck = double_conv(hb2, root.child("bottleneck"), training)
    cb2 = decoder_block(bottleneck, root.child("cb2"), config, "CB2", skip=hb1, training=training, trace=trace)
    cb3 = decoder_block(cb2, root.child("cb3"), config, "CB3", skip=e0, training=training, trace=trace)

    saliency = bilinear_upsample(_conv(cb3, root, "saliency_head"), 2)
    contour = None
    if config.enable_contour_head:
        contour = bilinear_upsample(_conv(cb3, root, "contour_head"), 2)
    return saliency, contour


def refresh_running_stats(state: NetworkState, batches: Iterable[Tensor]) -> int:
    """
    Replace every batch-norm running statistic with its average over ``batches``.

    The k-th batch enters with momentum 1/k, which gives the plain mean of the
    per-batch statistics. Returns the number of batches used; with none the
    state is left untouched.
    """
    saved = state.stats_momentum
    count = 0
    try:
        for batch in batches:
            count += 1
            state.stats_momentum = 1.0 / count
            forward(state, batch, training=True)
    finally:
        state.stats_momentum = saved
    logger.debug(f"Refreshed batch-norm statistics over {count} batches")
    return count


def trace_shapes(config: NetworkConfig, batch: int = 1) -> List[TraceEntry]:
    """Per-block shapes derived from the assembly geometry, without running it."""
    config.validate()
    c, r = config.channels, config.input_resolution
    schedule = config.dilation_schedule
    msa_levels(r // 2, r)
    msa_levels(r // 4, r)
    enc_rates = lambda b: schedule.rates(b) if config.enable_mrffam else ()
    dec_rates = lambda b: schedule.rates(b) if config.enable_mrffam_decoder else ()
    return [
        TraceEntry("HB1", (batch, c, r // 2, r // 2), (batch, 2 * c, r // 4, r // 4), enc_rates("HB1")),
        TraceEntry("HB2", (batch, 2 * c, r // 4, r // 4), (batch, 2 * c, r // 8, r // 8), enc_rates("HB2")),
        TraceEntry("CB2", (batch, c, r // 8, r // 8), (batch, c, r // 8, r // 8), dec_rates("CB2")),
        TraceEntry("CB3", (batch, c, r // 4, r // 4), (batch, c, r // 4, r // 4), dec_rates("CB3")),
    ]


@dataclass
class ParameterCount:
    total: int
    per_path: Dict[str, int]
    per_module: Dict[str, int]

    def published_delta(self, variant: str) -> Tuple[float, float]:
        """(published total, signed difference ours - published)."""
        reference = PUBLISHED_PARAMETER_TOTALS[variant]
        return reference, self.total - reference


def count_parameters(state: Union[NetworkState, Dict[str, Tensor]]) -> ParameterCount:
    params = state.parameters() if isinstance(state, NetworkState) else {
        k: v for k, v in state.items() if not is_buffer(k)
    }
    per_path = {path: t.size for path, t in params.items()}
    per_module: Dict[str, int] = {}
    for path, size in per_path.items():
        module = path.split(".", 1)[0]
        per_module[module] = per_module.get(module, 0) + size
    return ParameterCount(sum(per_path.values()), per_path, per_module)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_state(state: NetworkState, path: Union[str, pathlib.Path]) -> None:
    raw = encode_checkpoint(state.config.to_dict(), state.params.items())
    pathlib.Path(path).write_bytes(raw)
    logger.debug(f"Saved checkpoint {path} ({len(raw)} bytes)")


def load_state(path: Union[str, pathlib.Path], config_override: Optional[Dict[str, Any]] = None) -> NetworkState:
    """
    Reload a checkpoint; ``config_override`` may change fields (e.g. the
    inference resolution) as long as the parameter layout stays identical.
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    config_dict, entries = decode_checkpoint(path.read_bytes())
    if config_override:
        config_dict = {**config_dict, **config_override}
    config = NetworkConfig.from_dict(config_dict)
    template = assemble_network(config, seed=0)
    if set(template.params) != set(entries):
        missing = sorted(set(template.params) - set(entries))[:5]
        extra = sorted(set(entries) - set(template.params))[:5]
        raise ConfigError(
            f"checkpoint {path} does not match config layout (missing {missing}, unexpected {extra})"
        )
    params = {}
    for name, template_tensor in template.params.items():
        loaded = entries[name]
        if loaded.size != template_tensor.size:
            raise ConfigError(f"checkpoint tensor {name} has {loaded.size} values, expected {template_tensor.size}")
        params[name] = Tensor(
            loaded.data.reshape(template_tensor.shape),
            requires_grad=template_tensor.requires_grad,
            dtype=loaded.dtype,
        )
    return NetworkState(params, config)
