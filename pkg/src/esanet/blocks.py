"""Builders for the network's building blocks.

Every builder appends primitive nodes to a :class:`GraphBuilder` and returns
the id of its output value, so blocks compose freely and the resulting graph
contains nothing but kernel-level ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

from .errors import ConfigurationError, FactorViolationError
from .graph.ir import GraphBuilder

GLOBAL = "global"
SE_REDUCTION = 16
BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    channels: int
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("basic", "nbt1d", "bottleneck"):
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.channels < 1:
            raise ConfigurationError("block channels must be positive")

    @property
    def out_channels(self) -> int:
        if self.kind == "bottleneck":
            return self.channels * BOTTLENECK_EXPANSION
        return self.channels

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def _shortcut(b: GraphBuilder, x, spec: BlockSpec):
    if not spec.projection:
        return x
    with b.scope("downsample"):
        y = b.conv(x, spec.out_channels, 1, stride=spec.stride, pad=0, name="conv")
        return b.bn(y, name="bn")


def nbt1d_block(b: GraphBuilder, x, spec: BlockSpec, name="block"):
    """Residual block with each 3x3 conv factorized into 3x1 and 1x3."""
    if spec.kind != "nbt1d":
        raise ConfigurationError(f"nbt1d_block called with kind {spec.kind!r}")
    s, c = spec.stride, spec.channels
    with b.scope(name):
        y = b.conv(x, c, 3, 1, stride=(s, 1), pad=(1, 0), bias=True, name="conv3x1_1")
        y = b.relu(y, name="relu3x1_1")
        y = b.conv(y, c, 1, 3, stride=(1, s), pad=(0, 1), name="conv1x3_1")
        y = b.bn(y, name="bn1")
        y = b.relu(y, name="relu1")
        y = b.conv(y, c, 3, 1, pad=(1, 0), bias=True, name="conv3x1_2")
        y = b.relu(y, name="relu3x1_2")
        y = b.conv(y, c, 1, 3, pad=(0, 1), name="conv1x3_2")
        y = b.bn(y, name="bn2")
        out = b.add(y, _shortcut(b, x, spec), name="add")
        return b.relu(out, name="relu_out")


def basic_block(b: GraphBuilder, x, spec: BlockSpec, name="block"):
    c = spec.channels
    with b.scope(name):
        y = b.conv(x, c, 3, stride=spec.stride, name="conv1")
        y = b.relu(b.bn(y, name="bn1"), name="relu1")
        y = b.bn(b.conv(y, c, 3, name="conv2"), name="bn2")
        out = b.add(y, _shortcut(b, x, spec), name="add")
        return b.relu(out, name="relu_out")


def bottleneck_block(b: GraphBuilder, x, spec: BlockSpec, name="block"):
    c = spec.channels
    with b.scope(name):
        y = b.relu(b.bn(b.conv(x, c, 1, pad=0, name="conv1"), name="bn1"), name="relu1")
        y = b.relu(b.bn(b.conv(y, c, 3, stride=spec.stride, name="conv2"), name="bn2"),
                   name="relu2")
        y = b.bn(b.conv(y, spec.out_channels, 1, pad=0, name="conv3"), name="bn3")
        out = b.add(y, _shortcut(b, x, spec), name="add")
        return b.relu(out, name="relu_out")


BLOCKS = {"basic": basic_block, "nbt1d": nbt1d_block, "bottleneck": bottleneck_block}


def residual_block(b: GraphBuilder, x, spec: BlockSpec, name="block"):
    return BLOCKS[spec.kind](b, x, spec, name)


# ---------------------------------------------------------------- fusion

def se_gate(b: GraphBuilder, x, reduction=SE_REDUCTION, name="se"):
    """Squeeze-and-excitation: returns ``x`` scaled by its channel gate."""
    c = b.shape(x)[1]
    if c % reduction:
        raise ConfigurationError(f"SE channels {c} not divisible by reduction {reduction}")
    with b.scope(name):
        g = b.global_avg_pool(x, name="squeeze")
        g = b.relu(b.conv(g, c // reduction, 1, pad=0, bias=True, name="fc1"), name="relu")
        g = b.sigmoid(b.conv(g, c, 1, pad=0, bias=True, name="fc2"), name="gate")
        return b.scale(x, g, name="excite")


def se_fusion(b: GraphBuilder, rgb, depth, reduction=SE_REDUCTION, name="fusion"):
    """Reweight both modalities with their own SE gate, then sum."""
    if b.shape(rgb) != b.shape(depth):
        raise ConfigurationError(
            f"fusion inputs differ in shape: {b.shape(rgb)} vs {b.shape(depth)}")
    with b.scope(name):
        return b.add(se_gate(b, rgb, reduction, "se_rgb"), se_gate(b, depth, reduction, "se_depth"),
                     name="add")


def add_fusion(b: GraphBuilder, rgb, depth, name="fusion"):
    with b.scope(name):
        return b.add(rgb, depth, name="add")


# ---------------------------------------------------------------- context

def compute_pool_sizes(h: int, w: int, max_branches: int = 4) -> list:
    """Pooled output sizes whose windows tile an ``h x w`` map exactly.

    Returns ``[GLOBAL, (h/k, w/k), ...]`` for integers ``k > 1`` dividing
    both extents, largest size first, capped at ``max_branches - 1`` pooled
    branches.  Sizes equal to 1x1 are covered by the global branch.
    """
    if h < 1 or w < 1:
        raise ConfigurationError("context input extents must be positive")
    common = gcd(h, w)
    sizes = [(h // k, w // k) for k in range(2, common + 1)
             if common % k == 0 and (h // k, w // k) != (1, 1)]
    return [GLOBAL] + sizes[:max(0, max_branches - 1)]


@dataclass(frozen=True)
class ContextSpec:
    height: int
    width: int
    pool_sizes: list = field(default_factory=lambda: [GLOBAL])
    out_channels: int = 512
    branch_channels: int | None = None

    def __post_init__(self):
        if not self.pool_sizes:
            raise ConfigurationError("context module needs at least one branch")
        for p in self.pool_sizes:
            if p == GLOBAL:
                continue
            ph, pw = p
            if ph < 1 or pw < 1 or self.height % ph or self.width % pw:
                raise FactorViolationError(
                    f"pooling size {ph}x{pw} does not divide context input "
                    f"{self.height}x{self.width}")

    @property
    def channels_per_branch(self) -> int:
        if self.branch_channels is not None:
            return self.branch_channels
        return max(32, self.out_channels // (len(self.pool_sizes) + 1))


def context_module(b: GraphBuilder, x, spec: ContextSpec, name="context"):
    _, _, h, w = b.shape(x)
    if (h, w) != (spec.height, spec.width):
        raise ConfigurationError(
            f"context module built for {spec.height}x{spec.width}, input is {h}x{w}")
    bc = spec.channels_per_branch
    with b.scope(name):
        branches = [x]
        for i, p in enumerate(spec.pool_sizes):
            with b.scope(f"branch{i}"):
                if p == GLOBAL:
                    y, factor = b.global_avg_pool(x, name="pool"), (h, w)
                else:
                    ph, pw = p
                    y = b.avgpool(x, h // ph, w // pw, require_divisor=True, name="pool")
                    factor = (h // ph, w // pw)
                y = b.relu(b.bn(b.conv(y, bc, 1, pad=0, name="conv"), name="bn"), name="relu")
                branches.append(b.nearest(y, factor, name="up"))
        y = b.concat(branches, name="concat")
        y = b.conv(y, spec.out_channels, 1, pad=0, name="conv")
        return b.relu(b.bn(y, name="bn"), name="relu")


# ---------------------------------------------------------------- decoder

def learned_upsample(b: GraphBuilder, x, name="upsample"):
    """Nearest x2 followed by a 3x3 depthwise conv initialized to bilinear weights."""
    c = b.shape(x)[1]
    with b.scope(name):
        y = b.nearest(x, 2, name="nearest")
        return b.conv(y, c, 3, pad=1, groups=c, name="dwconv", init="bilinear")


def upsample(b: GraphBuilder, x, method="learned", name="upsample"):
    if method == "learned":
        return learned_upsample(b, x, name)
    with b.scope(name):
        if method == "bilinear":
            return b.bilinear(x, 2, name="bilinear")
        if method == "nearest":
            return b.nearest(x, 2, name="nearest")
    raise ConfigurationError(f"unknown upsampling method {method!r}")


def decoder_module(b: GraphBuilder, x, skip, out_channels, num_nbt1d=3, upsampling="learned",
                   name="decoder"):
    """3x3 conv, ``num_nbt1d`` NBt1D blocks, x2 upsampling, then add ``skip``.

    ``skip`` must already be at the upsampled resolution with
    ``out_channels`` channels (or be ``None``).
    """
    if num_nbt1d < 0:
        raise ConfigurationError("num_nbt1d must be >= 0")
    with b.scope(name):
        y = b.relu(b.bn(b.conv(x, out_channels, 3, name="conv"), name="bn"), name="relu")
        for i in range(num_nbt1d):
            y = nbt1d_block(b, y, BlockSpec("nbt1d", out_channels, out_channels), name=f"nbt{i}")
        y = upsample(b, y, upsampling, name="upsample")
        if skip is not None:
            if b.shape(skip) != b.shape(y):
                raise ConfigurationError(
                    f"decoder skip shape {b.shape(skip)} does not match {b.shape(y)}")
            y = b.add(y, skip, name="skip_add")
        return y
