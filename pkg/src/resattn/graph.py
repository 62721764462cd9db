"""Symbolic layer graphs and their executor.

A Graph is an ordered list of nodes (edges = ``inputs`` indices) built
once per architecture. The same structure drives the forward pass, the
static shape validation, and the parameter/FLOP/depth cost model, so
they cannot drift apart.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import BuildError, ShapeError
from .tensor import Tensor

PARTITIONS = ("shared", "trunk", "mask")


@dataclass
class Node:
    idx: int
    kind: str
    inputs: tuple = ()
    name: str = ""
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    mirror: int = -1  # upsample: node whose spatial size to restore
    mode: str = ""  # combine: arl | nal
    branch: str = "shared"
    stage: str | None = None
    probe: bool = False
    depth_exempt: bool = False  # projection shortcuts don't count as depth
    params: dict = field(default_factory=dict)  # role -> param name


@dataclass
class ParamInfo:
    shape: tuple
    kind: str  # conv_w | fc_w | fc_b | bn_gamma | bn_beta
    partition: str


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.param_info: "OrderedDict[str, ParamInfo]" = OrderedDict()
        self.input_idx = 0
        self.out_idx = 0
        self.stage_names: list[str] = []

    @property
    def bn_names(self):
        return [n.name for n in self.nodes if n.kind == "bn"]


class GraphBuilder:
    """Incremental Graph construction with name/stage/branch scoping."""

    def __init__(self):
        self.g = Graph()
        self._prefix: list[str] = []
        self._branch = "shared"
        self._stage: str | None = None
        node = Node(idx=0, kind="input", name="input")
        self.g.nodes.append(node)

    # -- scoping -----------------------------------------------------------

    @contextlib.contextmanager
    def scope(self, name):
        self._prefix.append(name)
        try:
            yield
        finally:
            self._prefix.pop()

    @contextlib.contextmanager
    def branch(self, tag):
        assert tag in PARTITIONS
        prev = self._branch
        self._branch = tag
        try:
            yield
        finally:
            self._branch = prev

    @contextlib.contextmanager
    def stage(self, name):
        prev = self._stage
        self._stage = name
        self.g.stage_names.append(name)
        try:
            yield
        finally:
            self._stage = prev

    def _name(self, leaf):
        return ".".join(self._prefix + [leaf])

    def _add(self, kind, inputs, leaf, **kw):
        node = Node(
            idx=len(self.g.nodes),
            kind=kind,
            inputs=tuple(inputs),
            name=self._name(leaf),
            branch=self._branch,
            stage=self._stage,
            **kw,
        )
        self.g.nodes.append(node)
        self.g.out_idx = node.idx
        return node.idx

    def _param(self, name, shape, kind):
        if name in self.g.param_info:
            raise BuildError(f"duplicate parameter name {name!r}")
        self.g.param_info[name] = ParamInfo(tuple(shape), kind, self._branch)
        return name

    # -- layer emitters ----------------------------------------------------

    def conv(self, x, cin, cout, kernel, stride=1, padding=0, leaf="conv",
             depth_exempt=False):
        name = self._name(leaf)
        w = self._param(name + ".w", (cout, cin, kernel, kernel), "conv_w")
        return self._add(
            "conv", (x,), leaf,
            out_channels=cout, kernel=kernel, stride=stride, padding=padding,
            depth_exempt=depth_exempt, params={"w": w},
        )

    def bn(self, x, channels, leaf="bn"):
        name = self._name(leaf)
        gamma = self._param(name + ".gamma", (channels,), "bn_gamma")
        beta = self._param(name + ".beta", (channels,), "bn_beta")
        return self._add("bn", (x,), leaf, out_channels=channels,
                         params={"gamma": gamma, "beta": beta})

    def relu(self, x, leaf="relu"):
        return self._add("relu", (x,), leaf)

    def sigmoid(self, x, leaf="sigmoid"):
        return self._add("sigmoid", (x,), leaf)

    def maxpool(self, x, window, stride, padding=0, leaf="pool"):
        return self._add("maxpool", (x,), leaf, window=window, stride=stride,
                         padding=padding)

    def upsample_to(self, x, mirror, leaf="upsample"):
        return self._add("upsample", (x,), leaf, mirror=mirror)

    def add(self, a, b, leaf="add"):
        return self._add("add", (a, b), leaf)

    def combine(self, feats, mask, mode, leaf="combine"):
        return self._add("combine", (feats, mask), leaf, mode=mode)

    def gap(self, x, leaf="gap"):
        return self._add("gap", (x,), leaf)

    def fc(self, x, cin, cout, leaf="fc"):
        name = self._name(leaf)
        w = self._param(name + ".w", (cout, cin), "fc_w")
        b = self._param(name + ".b", (cout,), "fc_b")
        return self._add("fc", (x,), leaf, out_channels=cout, params={"w": w, "b": b})

    def chan_l2norm(self, x, leaf="chan_l2norm"):
        return self._add("chan_l2norm", (x,), leaf)

    def spatial_std(self, x, leaf="spatial_std"):
        return self._add("spatial_std", (x,), leaf)

    def mark_probe(self, idx):
        self.g.nodes[idx].probe = True


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named learnable tensors, each tagged with a partition
    (shared stem / trunk branch / mask branch) and a kind used by the
    optimizer's weight-decay rule."""

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._info: "OrderedDict[str, ParamInfo]" = OrderedDict()

    def add(self, name, tensor, info):
        self._tensors[name] = tensor
        self._info[name] = info

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def tensor(self, name):
        return self._tensors[name]

    def info(self, name):
        return self._info[name]

    def items(self):
        return self._tensors.items()

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def count(self, partition=None):
        return sum(
            t.data.size
            for n, t in self._tensors.items()
            if partition is None or self._info[n].partition == partition
        )

    def partition_counts(self):
        return {p: self.count(p) for p in PARTITIONS}

    def names_in(self, partition):
        return [n for n in self._tensors if self._info[n].partition == partition]


def init_params(graph, seed, dtype=np.float32):
    """He fan-in normal conv/fc weights, unit-gamma zero-beta BN,
    zero fc bias. Deterministic in (graph, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParamStore()
    for name, info in graph.param_info.items():
        if info.kind in ("conv_w", "fc_w"):
            fan_in = int(np.prod(info.shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), info.shape)
        elif info.kind == "bn_gamma":
            data = np.ones(info.shape)
        else:  # bn_beta, fc_b
            data = np.zeros(info.shape)
        store.add(name, Tensor(data, requires_grad=True, dtype=dtype, name=name), info)
    buffers = {
        n.name: ops.BNState.create(n.out_channels, dtype=dtype)
        for n in graph.nodes
        if n.kind == "bn"
    }
    return store, buffers


# ---------------------------------------------------------------------------
# execution


def run_graph(
    graph,
    params,
    buffers,
    x,
    *,
    training,
    mask_override=None,
    trunk_only=False,
    want_probes=False,
):
    """Forward pass. ``mask_override`` clamps every combine's mask input
    to a constant (the mask branches are then not evaluated), and
    ``trunk_only`` makes each combine pass features through unchanged;
    both are test/probe hooks."""
    skip_mask = mask_override is not None or trunk_only
    vals: dict[int, Tensor] = {graph.input_idx: x}
    probes = {} if want_probes else None
    for node in graph.nodes:
        if node.kind == "input":
            out = x
        elif skip_mask and node.branch == "mask":
            continue
        else:
            out = _eval_node(node, vals, params, buffers, training,
                             mask_override, trunk_only)
        vals[node.idx] = out
        if want_probes and node.probe:
            probes[node.stage] = out
    result = vals[graph.out_idx]
    return (result, probes) if want_probes else result


def _eval_node(node, vals, params, buffers, training, mask_override, trunk_only):
    kind = node.kind
    if kind == "conv":
        return ops.conv2d(vals[node.inputs[0]], params.tensor(node.params["w"]),
                          node.stride, node.padding)
    if kind == "bn":
        return ops.batch_norm(
            vals[node.inputs[0]],
            params.tensor(node.params["gamma"]),
            params.tensor(node.params["beta"]),
            buffers[node.name],
            training,
        )
    if kind == "relu":
        return ops.relu(vals[node.inputs[0]])
    if kind == "sigmoid":
        return ops.sigmoid(vals[node.inputs[0]])
    if kind == "maxpool":
        return ops.max_pool2d(vals[node.inputs[0]], node.window, node.stride,
                              node.padding)
    if kind == "upsample":
        target = vals[node.mirror].data.shape
        return ops.bilinear_upsample(vals[node.inputs[0]], target[2], target[3])
    if kind == "add":
        return ops.add(vals[node.inputs[0]], vals[node.inputs[1]])
    if kind == "combine":
        feats = vals[node.inputs[0]]
        if trunk_only:
            return feats
        if mask_override is not None:
            mask = Tensor(np.full_like(feats.data, mask_override))
        else:
            mask = vals[node.inputs[1]]
        if node.mode == "arl":
            return ops.add(feats, ops.mul(mask, feats))
        return ops.mul(mask, feats)
    if kind == "gap":
        return ops.global_avg_pool(vals[node.inputs[0]])
    if kind == "fc":
        return ops.fully_connected(vals[node.inputs[0]],
                                   params.tensor(node.params["w"]),
                                   params.tensor(node.params["b"]))
    if kind == "chan_l2norm":
        return ops.channel_l2norm(vals[node.inputs[0]])
    if kind == "spatial_std":
        return ops.spatial_standardize(vals[node.inputs[0]])
    raise BuildError(f"unknown node kind {kind!r}")


# ---------------------------------------------------------------------------
# static shape propagation (validation + cost model substrate)


def trace_shapes(graph, input_shape):
    """Propagate (C,H,W) through every node; raises ShapeError on any
    inconsistency. Returns {idx: (C,H,W)}."""
    shapes: dict[int, tuple] = {}
    for node in graph.nodes:
        if node.kind == "input":
            shapes[node.idx] = tuple(input_shape)
            continue
        src = shapes[node.inputs[0]]
        if node.kind == "conv":
            c, h, w = src
            k, s, p = node.kernel, node.stride, node.padding
            win = graph.param_info[node.params["w"]].shape
            if win[1] != c:
                raise ShapeError(
                    f"{node.name}: input has {c} channels, weight expects {win[1]}"
                )
            if k > h + 2 * p or k > w + 2 * p:
                raise ShapeError(f"{node.name}: kernel {k} exceeds padded input {src}")
            shapes[node.idx] = (node.out_channels,
                                (h + 2 * p - k) // s + 1,
                                (w + 2 * p - k) // s + 1)
        elif node.kind == "maxpool":
            c, h, w = src
            k, s, p = node.window, node.stride, node.padding
            oh = (h + 2 * p - k) // s + 1
            ow = (w + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{node.name}: pooling {src} below 1x1")
            shapes[node.idx] = (c, oh, ow)
        elif node.kind == "upsample":
            c = src[0]
            _, th, tw = shapes[node.mirror]
            if th < src[1] or tw < src[2]:
                raise ShapeError(f"{node.name}: cannot downsample {src} to {th}x{tw}")
            shapes[node.idx] = (c, th, tw)
        elif node.kind in ("add", "combine"):
            other = shapes[node.inputs[1]]
            if src != other:
                raise ShapeError(
                    f"{node.name}: operand shapes {src} and {other} differ"
                )
            shapes[node.idx] = src
        elif node.kind == "gap":
            shapes[node.idx] = (src[0],)
        elif node.kind == "fc":
            if len(src) != 1:
                raise ShapeError(f"{node.name}: fc input must be flat, got {src}")
            win = graph.param_info[node.params["w"]].shape
            if win[1] != src[0]:
                raise ShapeError(
                    f"{node.name}: fc input has {src[0]} features, weight expects {win[1]}"
                )
            shapes[node.idx] = (node.out_channels,)
        elif node.kind == "bn":
            if src[0] != node.out_channels:
                raise ShapeError(
                    f"{node.name}: bn over {node.out_channels} channels got {src}"
                )
            shapes[node.idx] = src
        elif node.kind == "spatial_std":
            if src[1] * src[2] < 2:
                raise ShapeError(f"{node.name}: spatial population below 2")
            shapes[node.idx] = src
        else:  # relu, sigmoid, chan_l2norm
            shapes[node.idx] = src
    return shapes


# ---------------------------------------------------------------------------
# model = graph + state


class Model:
    """A graph bound to its parameters, BN buffers, and build spec."""

    def __init__(self, graph, params, buffers, spec=None, input_shape=None):
        self.graph = graph
        self.params = params
        self.buffers = buffers
        self.spec = spec
        self.input_shape = input_shape

    def forward(self, x, training=False, **kw):
        return run_graph(self.graph, self.params, self.buffers, x,
                         training=training, **kw)

    def state_arrays(self):
        """Flat name->array view of all mutable state (for checkpoints)."""
        out = {}
        for name, t in self.params.items():
            out["param:" + name] = t.data
        for name, st in self.buffers.items():
            out["bnmean:" + name] = st.mean
            out["bnvar:" + name] = st.var
        return out

    def load_state_arrays(self, arrays):
        for name, t in self.params.items():
            src = arrays["param:" + name]
            if src.shape != t.data.shape:
                raise ShapeError(f"checkpoint param {name}: shape {src.shape} != {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)
        for name, st in self.buffers.items():
            st.mean = arrays["bnmean:" + name].astype(st.mean.dtype, copy=True)
            st.var = arrays["bnvar:" + name].astype(st.var.dtype, copy=True)
