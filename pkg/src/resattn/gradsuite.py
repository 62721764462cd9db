"""Reusable finite-difference suites over primitives and composite
blocks (shared by the CLI gradcheck command and the acceptance tests).

Primitives are checked densely at step 1e-3; composite blocks use a
smaller step and a deterministic random subset of entries per tensor so
whole-module checks stay in the minutes range.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .blocks import (
    AttentionModuleConfig,
    attention_module_graph,
    local_conv_mask_graph,
    residual_unit_graph,
    soft_mask_branch_graph,
)
from .graph import init_params, run_graph
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
PRIMITIVE_STEP = 1e-3
BLOCK_TOL = 1e-4
BLOCK_STEP = 1e-5
BLOCK_ENTRIES = 24


def _rand(rng, shape, name):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True,
                  dtype=np.float64, name=name)


def _quadratic_sum(t):
    """sum(y*y): makes the upstream gradient non-uniform."""
    return ops.tensor_sum(ops.mul(t, t))


def run_primitive_suite(seed=0):
    """Dense gradchecks for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    checks = []

    x = _rand(rng, (2, 3, 8, 8), "x")
    w = _rand(rng, (4, 3, 3, 3), "w")
    checks.append(("conv2d s1 p0", lambda i: _quadratic_sum(ops.conv2d(i[0], i[1], 1, 0)), [x, w]))
    checks.append(("conv2d s2 p1", lambda i: _quadratic_sum(ops.conv2d(i[0], i[1], 2, 1)), [x, w]))

    xp = _rand(rng, (1, 2, 8, 8), "x")
    checks.append(("max_pool2d w3 s2", lambda i: _quadratic_sum(ops.max_pool2d(i[0], 3, 2)), [xp]))
    checks.append(("max_pool2d w3 s2 p1", lambda i: _quadratic_sum(ops.max_pool2d(i[0], 3, 2, 1)), [xp]))
    checks.append(("max_pool2d w2 s2", lambda i: _quadratic_sum(ops.max_pool2d(i[0], 2, 2)), [xp]))

    xu = _rand(rng, (1, 2, 4, 4), "x")
    checks.append(("bilinear_upsample 4->8", lambda i: _quadratic_sum(ops.bilinear_upsample(i[0], 8, 8)), [xu]))
    checks.append(("bilinear_upsample 4->7", lambda i: _quadratic_sum(ops.bilinear_upsample(i[0], 7, 5)), [xu]))

    xb = _rand(rng, (2, 3, 4, 4), "x")
    gm = _rand(rng, (3,), "gamma")
    bt = _rand(rng, (3,), "beta")
    st_train = ops.BNState.create(3, dtype=np.float64)
    checks.append((
        "batch_norm train",
        lambda i: _quadratic_sum(ops.batch_norm(i[0], i[1], i[2], st_train, True)),
        [xb, gm, bt],
    ))
    st_eval = ops.BNState(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 1.5, 3))
    checks.append((
        "batch_norm eval",
        lambda i: _quadratic_sum(ops.batch_norm(i[0], i[1], i[2], st_eval, False)),
        [xb, gm, bt],
    ))

    xe = _rand(rng, (3, 5), "x")
    # keep relu pre-activations away from the kink by |x| >= 0.05
    xe.data += np.sign(xe.data) * 0.05
    checks.append(("relu", lambda i: _quadratic_sum(ops.relu(i[0])), [xe]))
    checks.append(("sigmoid", lambda i: _quadratic_sum(ops.sigmoid(i[0])), [xe]))
    a = _rand(rng, (3, 4), "a")
    bb = _rand(rng, (3, 4), "b")
    checks.append(("add", lambda i: _quadratic_sum(ops.add(i[0], i[1])), [a, bb]))
    checks.append(("mul", lambda i: _quadratic_sum(ops.mul(i[0], i[1])), [a, bb]))

    xf = _rand(rng, (4, 6), "x")
    wf = _rand(rng, (3, 6), "w")
    bf = _rand(rng, (3,), "b")
    checks.append((
        "fully_connected",
        lambda i: _quadratic_sum(ops.fully_connected(i[0], i[1], i[2])),
        [xf, wf, bf],
    ))
    xg = _rand(rng, (2, 3, 4, 5), "x")
    checks.append(("global_avg_pool", lambda i: _quadratic_sum(ops.global_avg_pool(i[0])), [xg]))

    xl = Tensor(rng.uniform(-2, 2, (3, 7)), requires_grad=True, dtype=np.float64, name="logits")
    labels = np.array([0, 3, 6])
    checks.append((
        "softmax_cross_entropy",
        lambda i: ops.softmax_cross_entropy(i[0], labels),
        [xl],
    ))

    xc = _rand(rng, (2, 4, 3, 3), "x")
    checks.append(("channel_l2norm", lambda i: _quadratic_sum(ops.channel_l2norm(i[0])), [xc]))
    xs = _rand(rng, (2, 3, 4, 4), "x")
    checks.append(("spatial_standardize", lambda i: _quadratic_sum(ops.spatial_standardize(i[0])), [xs]))

    out = []
    for name, f, inputs in checks:
        rep = ops.gradcheck(f, inputs, step=PRIMITIVE_STEP, tol=PRIMITIVE_TOL)
        out.append((name, rep))
    return out


def check_graph(graph, input_shape, seed=0, step=BLOCK_STEP, tol=BLOCK_TOL,
                max_entries=BLOCK_ENTRIES, training=True):
    """Gradcheck a whole block graph w.r.t. its input and every
    parameter, on a quadratic loss over the output."""
    rng = np.random.default_rng(seed)
    params, buffers = init_params(graph, seed, dtype=np.float64)
    x = Tensor(rng.uniform(-1.0, 1.0, (1,) + tuple(input_shape)),
               requires_grad=True, dtype=np.float64, name="input")
    tensors = [x] + [t for _, t in params.items()]

    def f(inputs):
        out = run_graph(graph, params, buffers, inputs[0], training=training)
        return _quadratic_sum(out)

    return ops.gradcheck(f, tensors, step=step, tol=tol, max_entries=max_entries,
                         rng=np.random.default_rng(seed + 1))


def _module_cfg(combine, activation, levels, channels=8):
    return AttentionModuleConfig(
        channels=channels, p=1, t=2, r=1, levels=levels,
        combine=combine, activation=activation,
        pool_window=2, pool_stride=2, pool_padding=0,
    )


def run_block_check(block, combine="arl", activation="mixed", levels=2, seed=0):
    """Gradcheck one named composite block."""
    if block == "residual-unit":
        g = residual_unit_graph(8, 8, stride=1)
        return [(f"residual-unit c8", check_graph(g, (8, 8, 8), seed))]
    if block == "soft-mask":
        size = 16 if levels >= 3 else 8
        g = soft_mask_branch_graph(_module_cfg("arl", activation, levels))
        name = f"soft-mask levels={levels} act={activation}"
        return [(name, check_graph(g, (8, size, size), seed))]
    if block == "local-conv-mask":
        g = local_conv_mask_graph(_module_cfg("arl", activation, 0))
        return [(f"local-conv-mask act={activation}", check_graph(g, (8, 8, 8), seed))]
    if block == "attention-module":
        size = 16 if levels >= 3 else 8
        g = attention_module_graph(_module_cfg(combine, activation, levels))
        name = f"attention-module combine={combine} act={activation} levels={levels}"
        return [(name, check_graph(g, (8, size, size), seed))]
    if block == "activation":
        from .blocks import apply_activation

        rng = np.random.default_rng(seed)
        out = []
        for kind in ("mixed", "channel", "spatial"):
            x = _rand(rng, (2, 4, 4, 4), "pre_mask")
            rep = ops.gradcheck(
                lambda i, k=kind: _quadratic_sum(apply_activation(i[0], k)),
                [x], step=PRIMITIVE_STEP, tol=PRIMITIVE_TOL,
            )
            out.append((f"activation {kind}", rep))
        return out
    raise ValueError(f"unknown block {block!r}")


def run_composite_suite(seed=0):
    """The full composite sweep: residual units, soft mask branches at
    levels 0..3, the attention module under both combines and all three
    activations, and the local-conv mask variant."""
    out = []
    g = residual_unit_graph(8, 8, stride=1)
    out.append(("residual-unit identity-skip", check_graph(g, (8, 8, 8), seed)))
    g = residual_unit_graph(4, 8, stride=2)
    out.append(("residual-unit projection s2", check_graph(g, (4, 8, 8), seed)))
    for levels in range(4):
        size = 16 if levels >= 3 else 8
        g = soft_mask_branch_graph(_module_cfg("arl", "mixed", levels))
        out.append((
            f"soft-mask levels={levels}",
            check_graph(g, (8, size, size), seed),
        ))
    for combine in ("arl", "nal"):
        for activation in ("mixed", "channel", "spatial"):
            g = attention_module_graph(_module_cfg(combine, activation, 2))
            out.append((
                f"attention-module {combine}/{activation}",
                check_graph(g, (8, 8, 8), seed),
            ))
    g = local_conv_mask_graph(_module_cfg("arl", "mixed", 0))
    out.append(("local-conv-mask", check_graph(g, (8, 8, 8), seed)))
    return out
