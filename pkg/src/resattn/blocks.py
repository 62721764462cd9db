"""Composite building blocks: pre-activation residual units, soft mask
branches (encoder-decoder and local-conv variants), mask activations,
and the attention module with its two combine rules.

Combine rules (element-wise over positions i and channels c):
    nal:  H = M * T          -- plain soft gating
    arl:  H = (1 + M) * F    -- residual form; M == 0 passes F through
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import ops
from .errors import BuildError
from .graph import GraphBuilder

MASK_ACTIVATIONS = ("mixed", "channel", "spatial")
COMBINE_MODES = ("arl", "nal")
MASK_STRUCTURES = ("encdec", "localconv")


@dataclass(frozen=True)
class AttentionModuleConfig:
    """Hyper-parameters of one attention module.

    p: residual units before the branch split and again after the
       combine; t: trunk-branch units; r: units per mask resolution
       step; levels: number of mask-branch downsampling steps. The mask
       branch always runs at the trunk's channel width.
    """

    channels: int
    p: int = 1
    t: int = 2
    r: int = 1
    levels: int = 2
    combine: str = "arl"
    activation: str = "mixed"
    pool_window: int = 2
    pool_stride: int = 2
    pool_padding: int = 0

    def __post_init__(self):
        if self.p < 1 or self.t < 1 or self.r < 1:
            raise BuildError("p, t, r must all be >= 1")
        if self.levels < 0:
            raise BuildError("levels must be >= 0")
        if self.channels % 4:
            raise BuildError(f"channels {self.channels} not divisible by 4")
        if self.combine not in COMBINE_MODES:
            raise BuildError(f"combine must be one of {COMBINE_MODES}")
        if self.activation not in MASK_ACTIVATIONS:
            raise BuildError(f"activation must be one of {MASK_ACTIVATIONS}")
        if self.pool_padding >= self.pool_window:
            raise BuildError("pool padding must be smaller than pool window")


def add_residual_unit(b, x, in_ch, channels, stride=1, name="unit"):
    """Pre-activation bottleneck: BN-ReLU-1x1(C/4), BN-ReLU-3x3(C/4,
    stride), BN-ReLU-1x1(C), plus identity (or strided 1x1 projection)
    skip."""
    if channels % 4:
        raise BuildError(f"residual unit channels {channels} not divisible by 4")
    mid = channels // 4
    with b.scope(name):
        pre = b.relu(b.bn(x, in_ch, leaf="bn1"), leaf="relu1")
        if in_ch == channels and stride == 1:
            skip = x
        else:
            skip = b.conv(pre, in_ch, channels, 1, stride=stride, leaf="proj",
                          depth_exempt=True)
        h = b.conv(pre, in_ch, mid, 1, leaf="conv1")
        h = b.relu(b.bn(h, mid, leaf="bn2"), leaf="relu2")
        h = b.conv(h, mid, mid, 3, stride=stride, padding=1, leaf="conv2")
        h = b.relu(b.bn(h, mid, leaf="bn3"), leaf="relu3")
        h = b.conv(h, mid, channels, 1, leaf="conv3")
        return b.add(skip, h, leaf="add")


def add_mask_activation(b, x, channels, kind):
    """Mask output normalization: plain sigmoid (mixed), per-position
    channel L2 normalization (channel), or per-channel-map
    standardization followed by sigmoid (spatial)."""
    if kind == "mixed":
        return b.sigmoid(x, leaf="act")
    if kind == "channel":
        return b.chan_l2norm(x, leaf="act")
    if kind == "spatial":
        return b.sigmoid(b.spatial_std(x, leaf="act_std"), leaf="act")
    raise BuildError(f"unknown mask activation {kind!r}")


def add_mask_head(b, x, channels, activation):
    """Two width-preserving 1x1 convs (pre-activation order) and the
    mask activation."""
    with b.scope("head"):
        h = b.relu(b.bn(x, channels, leaf="bn1"), leaf="relu1")
        h = b.conv(h, channels, channels, 1, leaf="conv1")
        h = b.relu(b.bn(h, channels, leaf="bn2"), leaf="relu2")
        h = b.conv(h, channels, channels, 1, leaf="conv2")
        return add_mask_activation(b, h, channels, activation)


def add_soft_mask_branch(b, x, cfg):
    """Encoder-decoder mask branch.

    Down path: `levels` max-pool steps with r residual units each and
    2r at the lowest resolution. Up path: bilinear upsampling mirroring
    each pool; at the levels-1 interior resolutions the upsampled map
    is summed with a skip (one residual unit applied to the down-path
    feature of that resolution) and refined by r more units. Output is
    the two-conv head at the input resolution.
    """
    c = cfg.channels
    with b.branch("mask"), b.scope("mask"):
        h = x
        if cfg.levels == 0:
            for i in range(2 * cfg.r):
                h = add_residual_unit(b, h, c, c, name=f"flat{i}")
        else:
            mirrors = []
            skips = []
            for lvl in range(cfg.levels):
                mirrors.append(h)
                h = b.maxpool(h, cfg.pool_window, cfg.pool_stride,
                              cfg.pool_padding, leaf=f"pool{lvl}")
                n_units = cfg.r if lvl < cfg.levels - 1 else 2 * cfg.r
                for i in range(n_units):
                    h = add_residual_unit(b, h, c, c, name=f"down{lvl}_{i}")
                if lvl < cfg.levels - 1:
                    skips.append(h)
            for lvl in reversed(range(cfg.levels)):
                h = b.upsample_to(h, mirrors[lvl], leaf=f"up{lvl}")
                if lvl > 0:
                    s = add_residual_unit(b, skips[lvl - 1], c, c,
                                          name=f"skip{lvl - 1}")
                    h = b.add(h, s, leaf=f"merge{lvl - 1}")
                    for i in range(cfg.r):
                        h = add_residual_unit(b, h, c, c, name=f"up{lvl}_{i}")
        return add_mask_head(b, h, c, cfg.activation)


def add_local_conv_mask_branch(b, x, cfg):
    """Mask branch variant without any down/upsampling: three
    full-resolution residual units, then the same head."""
    c = cfg.channels
    with b.branch("mask"), b.scope("mask"):
        h = x
        for i in range(3):
            h = add_residual_unit(b, h, c, c, name=f"local{i}")
        return add_mask_head(b, h, c, cfg.activation)


def add_attention_module(b, x, cfg, name="attn", mask_structure="encdec"):
    """p pre units -> split into trunk (t units) and mask branch ->
    combine -> p post units."""
    if mask_structure not in MASK_STRUCTURES:
        raise BuildError(f"mask structure must be one of {MASK_STRUCTURES}")
    c = cfg.channels
    with b.scope(name):
        h = x
        for i in range(cfg.p):
            h = add_residual_unit(b, h, c, c, name=f"pre{i}")
        trunk = h
        with b.branch("trunk"):
            for i in range(cfg.t):
                trunk = add_residual_unit(b, trunk, c, c, name=f"trunk{i}")
        if mask_structure == "encdec":
            mask = add_soft_mask_branch(b, h, cfg)
        else:
            mask = add_local_conv_mask_branch(b, h, cfg)
        h = b.combine(trunk, mask, cfg.combine, leaf="combine")
        for i in range(cfg.p):
            h = add_residual_unit(b, h, c, c, name=f"post{i}")
        return h


# ---------------------------------------------------------------------------
# functional + standalone-graph surfaces (tests, gradcheck CLI)


def apply_activation(pre_mask, kind):
    """Functional form of the mask activations over a Tensor."""
    if kind == "mixed":
        return ops.sigmoid(pre_mask)
    if kind == "channel":
        return ops.channel_l2norm(pre_mask)
    if kind == "spatial":
        return ops.sigmoid(ops.spatial_standardize(pre_mask))
    raise BuildError(f"unknown mask activation {kind!r}")


def combine(feats, mask, mode):
    """Functional combine rule over Tensors."""
    if mode == "arl":
        return ops.add(feats, ops.mul(mask, feats))
    if mode == "nal":
        return ops.mul(mask, feats)
    raise BuildError(f"unknown combine mode {mode!r}")


def residual_unit_graph(in_ch, channels, stride=1):
    b = GraphBuilder()
    add_residual_unit(b, 0, in_ch, channels, stride=stride)
    return b.g


def soft_mask_branch_graph(cfg):
    b = GraphBuilder()
    add_soft_mask_branch(b, 0, cfg)
    return b.g


def local_conv_mask_graph(cfg):
    b = GraphBuilder()
    add_local_conv_mask_branch(b, 0, cfg)
    return b.g


def attention_module_graph(cfg, mask_structure="encdec"):
    b = GraphBuilder()
    add_attention_module(b, 0, cfg, mask_structure=mask_structure)
    return b.g
