"""Whole-network construction, the static cost model, and the
line-oriented network-spec text format.

Families:
  cifar     3-stage attention network at 32x32, m modules per stage plus
            two extra residual units per stage (trunk depth 36m+20)
  imagenet  4-stage attention network at 224x224 (attention-56/-92 layouts)
  resnet    plain pre-activation bottleneck baselines (152-imagenet,
            164-cifar)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .blocks import (
    COMBINE_MODES,
    MASK_ACTIVATIONS,
    MASK_STRUCTURES,
    AttentionModuleConfig,
    add_attention_module,
    add_residual_unit,
)
from .errors import BuildError, SpecParseError
from .graph import GraphBuilder, Model, init_params, trace_shapes

# Stage widths. CIFAR uses a 3x3/16 stem and quarter-width stages so the
# resnet-164 baseline lands at its published 1.7M parameters.
IMAGENET_WIDTHS = (256, 512, 1024, 2048)
CIFAR_WIDTHS = (64, 128, 256)
# Mask-branch pooling steps per stage: pool until the final stage's
# resolution (7x7 for 224 input, 8x8 for 32 input).
IMAGENET_MASK_LEVELS = (3, 2, 1)
CIFAR_MASK_LEVELS = (2, 1, 0)

RESNET_LAYOUTS = {
    "152-imagenet": (3, 8, 36, 3),
    "164-cifar": (18, 18, 18),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Symbolic description of a buildable network."""

    family: str
    m: int = 1
    modules_per_stage: tuple = ()
    depth: str = ""
    p: int = 1
    t: int = 2
    r: int = 1
    combine: str = "arl"
    activation: str = "mixed"
    mask_structure: str = "encdec"
    num_classes: int = 10
    input_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if self.family not in ("cifar", "imagenet", "resnet"):
            raise BuildError(f"unknown family {self.family!r}")
        if self.family == "cifar" and self.m < 1:
            raise BuildError("cifar family needs m >= 1")
        if self.family == "imagenet" and len(self.modules_per_stage) != 3:
            raise BuildError("imagenet family needs 3 per-stage module counts")
        if self.family == "resnet" and self.depth not in RESNET_LAYOUTS:
            raise BuildError(
                f"unsupported resnet depth {self.depth!r}; choose from {sorted(RESNET_LAYOUTS)}"
            )
        if self.combine not in COMBINE_MODES:
            raise BuildError(f"combine must be one of {COMBINE_MODES}")
        if self.activation not in MASK_ACTIVATIONS:
            raise BuildError(f"activation must be one of {MASK_ACTIVATIONS}")
        if self.mask_structure not in MASK_STRUCTURES:
            raise BuildError(f"mask must be one of {MASK_STRUCTURES}")


BUILTIN_SPECS = {
    "attention-56-imagenet": NetworkSpec(
        family="imagenet", modules_per_stage=(1, 1, 1), num_classes=1000, input_size=224
    ),
    "attention-92-imagenet": NetworkSpec(
        family="imagenet", modules_per_stage=(1, 2, 3), num_classes=1000, input_size=224
    ),
    "cifar-attention": NetworkSpec(family="cifar", m=1),
    "resnet-152": NetworkSpec(
        family="resnet", depth="152-imagenet", num_classes=1000, input_size=224
    ),
    "resnet-164": NetworkSpec(family="resnet", depth="164-cifar"),
}


# ---------------------------------------------------------------------------
# builders


def _head(b, x, channels, num_classes):
    with b.stage("head"), b.scope("head"):
        x = b.relu(b.bn(x, channels, leaf="bn"), leaf="relu")
        x = b.gap(x, leaf="gap")
        return b.fc(x, channels, num_classes, leaf="fc")


def build_from_spec(spec, seed=0):
    if spec.family == "cifar":
        return _build_cifar_spec(spec, seed)
    if spec.family == "imagenet":
        return _build_imagenet_spec(spec, seed)
    return _build_resnet_spec(spec, seed)


def build_cifar(m, seed=0, **overrides):
    """3-stage CIFAR attention network; trunk depth 36m+20."""
    spec = replace(NetworkSpec(family="cifar", m=m), **overrides)
    return build_from_spec(spec, seed)


def build_imagenet(name, seed=0, **overrides):
    """Table-layout ImageNet networks: 'attention-56' or 'attention-92'."""
    key = name if name.endswith("-imagenet") else f"{name}-imagenet"
    if key not in BUILTIN_SPECS:
        raise BuildError(f"unknown imagenet network {name!r}")
    spec = replace(BUILTIN_SPECS[key], **overrides)
    return build_from_spec(spec, seed)


def build_resnet(depth, seed=0, **overrides):
    """Plain pre-activation bottleneck baselines."""
    key = depth if isinstance(depth, str) else str(depth)
    alias = {"152": "152-imagenet", "164": "164-cifar"}
    key = alias.get(key, key)
    base = {
        "152-imagenet": BUILTIN_SPECS["resnet-152"],
        "164-cifar": BUILTIN_SPECS["resnet-164"],
    }.get(key)
    if base is None:
        raise BuildError(f"unsupported resnet depth {depth!r}")
    spec = replace(base, **overrides)
    return build_from_spec(spec, seed)


def _finish(b, spec, seed):
    graph = b.g
    shape = (spec.input_channels, spec.input_size, spec.input_size)
    trace_shapes(graph, shape)  # build-time shape validation
    params, buffers = init_params(graph, seed)
    return Model(graph, params, buffers, spec=spec, input_shape=shape)


def _build_cifar_spec(spec, seed):
    b = GraphBuilder()
    with b.stage("stem"), b.scope("stem"):
        x = b.conv(0, spec.input_channels, 16, 3, padding=1, leaf="conv")
    in_ch = 16
    for s, (width, levels) in enumerate(zip(CIFAR_WIDTHS, CIFAR_MASK_LEVELS), 1):
        cfg = AttentionModuleConfig(
            channels=width, p=spec.p, t=spec.t, r=spec.r, levels=levels,
            combine=spec.combine, activation=spec.activation,
            pool_window=2, pool_stride=2, pool_padding=0,
        )
        with b.stage(f"stage{s}"), b.scope(f"stage{s}"):
            x = add_residual_unit(b, x, in_ch, width, stride=1 if s == 1 else 2,
                                  name="entry")
            for i in range(spec.m):
                x = add_attention_module(b, x, cfg, name=f"attn{i}",
                                         mask_structure=spec.mask_structure)
            x = add_residual_unit(b, x, width, width, name="exit")
            b.mark_probe(x)
        in_ch = width
    _head(b, x, in_ch, spec.num_classes)
    return _finish(b, spec, seed)


def _imagenet_stem(b, in_channels):
    with b.stage("stem"), b.scope("stem"):
        x = b.conv(0, in_channels, 64, 7, stride=2, padding=3, leaf="conv")
        x = b.relu(b.bn(x, 64, leaf="bn"), leaf="relu")
        return b.maxpool(x, 3, 2, 1, leaf="pool")


def _build_imagenet_spec(spec, seed):
    b = GraphBuilder()
    x = _imagenet_stem(b, spec.input_channels)
    in_ch = 64
    for s, (width, levels, count) in enumerate(
        zip(IMAGENET_WIDTHS[:3], IMAGENET_MASK_LEVELS, spec.modules_per_stage), 1
    ):
        cfg = AttentionModuleConfig(
            channels=width, p=spec.p, t=spec.t, r=spec.r, levels=levels,
            combine=spec.combine, activation=spec.activation,
            pool_window=3, pool_stride=2, pool_padding=1,
        )
        with b.stage(f"stage{s}"), b.scope(f"stage{s}"):
            x = add_residual_unit(b, x, in_ch, width, stride=1 if s == 1 else 2,
                                  name="entry")
            for i in range(count):
                x = add_attention_module(b, x, cfg, name=f"attn{i}",
                                         mask_structure=spec.mask_structure)
            b.mark_probe(x)
        in_ch = width
    width = IMAGENET_WIDTHS[3]
    with b.stage("stage4"), b.scope("stage4"):
        x = add_residual_unit(b, x, in_ch, width, stride=2, name="unit0")
        for i in (1, 2):
            x = add_residual_unit(b, x, width, width, name=f"unit{i}")
        b.mark_probe(x)
    _head(b, x, width, spec.num_classes)
    return _finish(b, spec, seed)


def _build_resnet_spec(spec, seed):
    layout = RESNET_LAYOUTS[spec.depth]
    b = GraphBuilder()
    if spec.depth.endswith("imagenet"):
        x = _imagenet_stem(b, spec.input_channels)
        widths = IMAGENET_WIDTHS
        in_ch = 64
    else:
        with b.stage("stem"), b.scope("stem"):
            x = b.conv(0, spec.input_channels, 16, 3, padding=1, leaf="conv")
        widths = CIFAR_WIDTHS
        in_ch = 16
    for s, (width, count) in enumerate(zip(widths, layout), 1):
        with b.stage(f"stage{s}"), b.scope(f"stage{s}"):
            for i in range(count):
                stride = 2 if (i == 0 and s > 1) else 1
                x = add_residual_unit(b, x, in_ch, width, stride=stride,
                                      name=f"unit{i}")
                in_ch = width
            b.mark_probe(x)
    _head(b, x, in_ch, spec.num_classes)
    return _finish(b, spec, seed)


# ---------------------------------------------------------------------------
# cost model


@dataclass
class StageCost:
    name: str
    params: int = 0
    flops: int = 0
    trunk_depth: int = 0


@dataclass
class CostReport:
    """Static per-network accounting. One multiply-accumulate counts as
    one FLOP; BN/ReLU/pool/add/mul are free. Trunk depth counts conv and
    fully-connected layers outside mask branches."""

    params: int
    flops: int
    trunk_depth: int
    stages: list
    params_by_partition: dict

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def cost_model(graph, input_shape):
    """Parameter, FLOP, and trunk-depth accounting for one input image
    of the given (C,H,W) geometry."""
    shapes = trace_shapes(graph, input_shape)
    stage_order = []
    stage_costs = {}

    def bucket(node):
        name = node.stage if node.stage is not None else "stem"
        if name not in stage_costs:
            stage_costs[name] = StageCost(name)
            stage_order.append(name)
        return stage_costs[name]

    total_params = 0
    total_flops = 0
    trunk_depth = 0
    partition = {"shared": 0, "trunk": 0, "mask": 0}
    for node in graph.nodes:
        if node.kind == "input":
            continue
        sc = bucket(node)
        params = 0
        flops = 0
        if node.kind == "conv":
            w = graph.param_info[node.params["w"]]
            params = int(_prod(w.shape))
            c, oh, ow = shapes[node.idx]
            flops = oh * ow * params
            if node.branch != "mask" and not node.depth_exempt:
                trunk_depth += 1
                sc.trunk_depth += 1
        elif node.kind == "fc":
            w = graph.param_info[node.params["w"]]
            bshape = graph.param_info[node.params["b"]].shape
            params = int(_prod(w.shape)) + int(_prod(bshape))
            flops = int(_prod(w.shape))
            if node.branch != "mask":
                trunk_depth += 1
                sc.trunk_depth += 1
        elif node.kind == "bn":
            params = 2 * node.out_channels
        if params:
            for role, pname in node.params.items():
                info = graph.param_info[pname]
                partition[info.partition] += int(_prod(info.shape))
        sc.params += params
        sc.flops += flops
        total_params += params
        total_flops += flops
    return CostReport(
        params=total_params,
        flops=total_flops,
        trunk_depth=trunk_depth,
        stages=[stage_costs[n] for n in stage_order],
        params_by_partition=partition,
    )


def _prod(shape):
    out = 1
    for s in shape:
        out *= s
    return out


# ---------------------------------------------------------------------------
# spec text format


_NETWORK_KEYS = {
    "family": str,
    "m": int,
    "modules": "int_tuple",
    "depth": str,
    "classes": int,
    "input": "geometry",
}
_ATTENTION_KEYS = {
    "p": int,
    "t": int,
    "r": int,
    "combine": str,
    "activation": str,
    "mask": str,
}


def serialize_spec(spec):
    """Render a NetworkSpec in the `[section]` / `key = value` format."""
    lines = ["[network]", f"family = {spec.family}"]
    if spec.family == "cifar":
        lines.append(f"m = {spec.m}")
    elif spec.family == "imagenet":
        lines.append("modules = " + ",".join(str(c) for c in spec.modules_per_stage))
    else:
        lines.append(f"depth = {spec.depth}")
    lines.append(f"classes = {spec.num_classes}")
    lines.append(f"input = {spec.input_channels}x{spec.input_size}x{spec.input_size}")
    if spec.family != "resnet":
        lines += [
            "",
            "[attention]",
            f"p = {spec.p}",
            f"t = {spec.t}",
            f"r = {spec.r}",
            f"combine = {spec.combine}",
            f"activation = {spec.activation}",
            f"mask = {spec.mask_structure}",
        ]
    return "\n".join(lines) + "\n"


def _parse_sections(text, allowed):
    """Shared `[section]` / `key = value` scanner. Returns
    {section: {key: (value, line_no)}}."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in allowed:
                raise SpecParseError(f"unknown section [{current}]", lineno)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise SpecParseError(f"expected `key = value`, got {line!r}", lineno)
        if current is None:
            raise SpecParseError("key outside of any [section]", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in sections[current]:
            raise SpecParseError(f"duplicate key {key!r}", lineno)
        sections[current][key] = (value, lineno)
    return sections


def _convert(key, value, lineno, conv):
    try:
        if conv is int:
            return int(value)
        if conv is float:
            return float(value)
        if conv == "int_tuple":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if conv == "geometry":
            parts = [int(v) for v in value.split("x")]
            if len(parts) != 3 or parts[1] != parts[2]:
                raise ValueError
            return parts
        if conv is bool:
            if value.lower() in ("true", "yes", "1"):
                return True
            if value.lower() in ("false", "no", "0"):
                return False
            raise ValueError
        return value
    except ValueError:
        raise SpecParseError(f"bad value {value!r} for key {key!r}", lineno) from None


def parse_spec(text):
    """Parse the network spec text format back into a NetworkSpec."""
    sections = _parse_sections(text, allowed=("network", "attention"))
    if "network" not in sections:
        raise SpecParseError("missing [network] section")
    kw = {}
    for key, (value, lineno) in sections["network"].items():
        if key not in _NETWORK_KEYS:
            raise SpecParseError(f"unknown key {key!r} in [network]", lineno)
        v = _convert(key, value, lineno, _NETWORK_KEYS[key])
        if key == "classes":
            kw["num_classes"] = v
        elif key == "input":
            kw["input_channels"], kw["input_size"] = v[0], v[1]
        elif key == "modules":
            kw["modules_per_stage"] = v
        else:
            kw[key] = v
    for key, (value, lineno) in sections.get("attention", {}).items():
        if key not in _ATTENTION_KEYS:
            raise SpecParseError(f"unknown key {key!r} in [attention]", lineno)
        v = _convert(key, value, lineno, _ATTENTION_KEYS[key])
        if key == "mask":
            kw["mask_structure"] = v
        else:
            kw[key] = v
    try:
        return NetworkSpec(**kw)
    except (BuildError, TypeError) as exc:
        raise SpecParseError(str(exc)) from exc
