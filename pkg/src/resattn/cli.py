"""Batch experiment CLI.

Subcommands: summary (cost report), gradcheck (finite-difference
suites), train, eval, probe. Heavy imports happen inside handlers so
thread caps from flags can take effect before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

SUMMARY_SCHEMA = {"schema": "resattn.summary", "version": 1}
PROBE_SCHEMA = {"schema": "resattn.probe", "version": 1}


def _fail(msg, code=2):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _resolve_spec(args, extra=()):
    """Spec from a builtin name, a spec file, or builtin[,overrides]."""
    from .builder import BUILTIN_SPECS, parse_spec
    from dataclasses import replace

    name = args.spec
    if os.path.exists(name):
        with open(name) as f:
            spec = parse_spec(f.read())
    elif name in BUILTIN_SPECS:
        spec = BUILTIN_SPECS[name]
    else:
        raise ValueError(
            f"{name!r} is neither a spec file nor a builtin "
            f"({', '.join(sorted(BUILTIN_SPECS))})"
        )
    over = {}
    for token in extra:
        key, _, value = token.partition("=")
        if key == "m":
            over["m"] = int(value)
        else:
            raise ValueError(f"unknown override {token!r} (supported: m=N)")
    for key in ("combine", "activation"):
        v = getattr(args, key, None)
        if v:
            over[key] = v
    if getattr(args, "mask", None):
        over["mask_structure"] = args.mask
    return replace(spec, **over) if over else spec


def cmd_summary(args, extra):
    from .builder import build_from_spec, cost_model

    spec = _resolve_spec(args, extra)
    model = build_from_spec(spec, seed=args.seed)
    report = cost_model(model.graph, model.input_shape)
    c, s, _ = model.input_shape
    print(f"network: {args.spec}  (input {c}x{s}x{s}, {spec.num_classes} classes)")
    print(f"params      : {report.params / 1e6:.2f}M ({report.params:,})")
    print(f"flops       : {report.flops / 1e9:.2f}G ({report.flops:,} multiply-accumulates)")
    print(f"trunk depth : {report.trunk_depth}")
    by_part = report.params_by_partition
    print(
        "partitions  : "
        + "  ".join(f"{k}={v / 1e6:.2f}M" for k, v in by_part.items())
    )
    print(f"{'stage':8s} {'params':>12s} {'flops':>14s} {'depth':>6s}")
    for st in report.stages:
        print(f"{st.name:8s} {st.params:12,} {st.flops:14,} {st.trunk_depth:6d}")
    if args.json:
        payload = {
            **SUMMARY_SCHEMA,
            "network": args.spec,
            "params": report.params,
            "flops": report.flops,
            "trunk_depth": report.trunk_depth,
            "params_by_partition": by_part,
            "stages": [
                {"name": st.name, "params": st.params, "flops": st.flops,
                 "trunk_depth": st.trunk_depth}
                for st in report.stages
            ],
        }
        _write_json(args.json, payload)
    return 0


def _write_json(dest, payload):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if dest == "-":
        print(text)
    else:
        with open(dest, "w") as f:
            f.write(text + "\n")


def cmd_gradcheck(args, extra):
    import numpy as np

    from . import ops
    from .gradsuite import run_block_check, run_composite_suite, run_primitive_suite

    if args.corrupt:
        ops.set_debug_corrupt_backward(True)
    try:
        if args.scope == "primitive":
            reports = run_primitive_suite(seed=args.seed)
        elif args.scope == "block":
            reports = run_block_check(
                args.block, combine=args.combine or "arl",
                activation=args.activation or "mixed",
                levels=args.levels, seed=args.seed,
            )
        else:
            reports = run_composite_suite(seed=args.seed)
    finally:
        ops.set_debug_corrupt_backward(False)
    failed = 0
    for name, rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status}  {name}  max_rel_err={rep.max_error:.3e}  tol={rep.tol:g}")
        failed += not rep.passed
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def _load_dataset(path, split, size=32):
    """'synthetic[:N[:K]]' or a directory of CIFAR binary batches."""
    from .data import load_cifar, synthetic_dataset

    if path.startswith("synthetic"):
        parts = path.split(":")
        n = int(parts[1]) if len(parts) > 1 else 2000
        k = int(parts[2]) if len(parts) > 2 else 10
        return synthetic_dataset(k, n, geometry=(3, size, size), seed=0, split=split)
    if os.path.isdir(path):
        variant = 10 if os.path.exists(os.path.join(path, "data_batch_1.bin")) else 100
        return load_cifar(path, variant, split)
    raise ValueError(f"--data must be 'synthetic[:N[:K]]' or a directory, got {path!r}")


def cmd_train(args, extra):
    from dataclasses import replace

    from .builder import build_from_spec
    from .training import cifar_train_config, parse_train_config, train

    spec = _resolve_spec(args, extra)
    if args.config:
        with open(args.config) as f:
            cfg = parse_train_config(f.read())
    else:
        cfg = cifar_train_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.noise_clean_ratio is not None:
        over["noise_clean_ratio"] = args.noise_clean_ratio
    if args.iters is not None:
        drops = tuple(d for d in cfg.lr_drop_iters if d < args.iters)
        over.update(total_iters=args.iters, lr_drop_iters=drops)
    if over:
        cfg = replace(cfg, **over)
    if cfg.noise_clean_ratio < 1.0 and args.data.startswith("synthetic"):
        k = int(args.data.split(":")[2]) if args.data.count(":") > 1 else 10
        if k < 2:
            return _fail("label noise needs a classification dataset with >= 2 classes")
    train_data = _load_dataset(args.data, "train", size=spec.input_size)
    eval_data = None
    if args.eval_data:
        eval_data = _load_dataset(args.eval_data, "test", size=spec.input_size)
    model = build_from_spec(spec, seed=cfg.seed)
    result = train(model, cfg, train_data, eval_data=eval_data,
                   out_dir=args.out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else {}
    print(
        f"trained {result.iterations_run} iterations; "
        f"final train_loss={last.get('train_loss', float('nan')):.4f} "
        f"train_acc={last.get('train_acc', float('nan')):.4f}"
    )
    if result.final_eval_err is not None:
        print(f"eval top-1 error: {result.final_eval_err:.4f}")
    if result.final_checkpoint:
        print(f"checkpoint: {result.final_checkpoint}")
    return 0


def _model_from_checkpoint(path):
    from .builder import build_from_spec, parse_spec
    from .training import load_checkpoint, parse_train_config, read_checkpoint

    meta, _ = read_checkpoint(path)
    spec = parse_spec(meta["spec_text"])
    cfg = parse_train_config(meta["train_text"])
    model = build_from_spec(spec, seed=cfg.seed)
    _, _, iteration, mean = load_checkpoint(path, model, cfg)
    return model, cfg, iteration, mean


def cmd_eval(args, extra):
    from .training import evaluate

    model, cfg, iteration, mean = _model_from_checkpoint(args.checkpoint)
    data = _load_dataset(args.data, "test", size=model.input_shape[1])
    top1, top5 = evaluate(model, data, mean)
    print(f"checkpoint iteration : {iteration}")
    print(f"top-1 error          : {top1:.4f}")
    if top5 is not None:
        print(f"top-5 error          : {top5:.4f}")
    return 0


def cmd_probe(args, extra):
    from .training import response_probe

    model, cfg, iteration, mean = _model_from_checkpoint(args.checkpoint)
    data = _load_dataset(args.data, "test", size=model.input_shape[1])
    kw = {}
    if args.trunk_only:
        kw["trunk_only"] = True
    if args.mask_override is not None:
        kw["mask_override"] = args.mask_override
    rec = response_probe(model, data.images[: args.batch], iteration, mean, **kw)
    print(f"{'stage':8s} {'mean_abs_response':>18s}")
    for stage, value in rec.responses.items():
        print(f"{stage:8s} {value:18.6f}")
    if args.json:
        _write_json(args.json, {
            **PROBE_SCHEMA,
            "iteration": rec.iteration,
            "rows": [
                {"stage": s, "mean_abs_response": v} for s, v in rec.responses.items()
            ],
        })
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="resattn",
        description="Stacked-attention residual networks: summaries, "
                    "gradient checks, training, evaluation, probes.",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS threads (same as RESATTN_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summary", help="parameter/FLOP/trunk-depth report")
    s.add_argument("spec", help="builtin name or spec file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--combine", choices=("arl", "nal"))
    s.add_argument("--activation", choices=("mixed", "channel", "spatial"))
    s.add_argument("--mask", choices=("encdec", "localconv"))
    s.add_argument("--json", help="write machine-readable report (- for stdout)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("scope", choices=("primitive", "block", "module"))
    g.add_argument("--block", default="attention-module",
                   choices=("residual-unit", "soft-mask", "local-conv-mask",
                            "attention-module", "activation"))
    g.add_argument("--combine", choices=("arl", "nal"))
    g.add_argument("--activation", choices=("mixed", "channel", "spatial"))
    g.add_argument("--levels", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true",
                   help="debug: corrupt a backward rule (suite must fail)")

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--spec", required=True)
    t.add_argument("--config", help="train-config file ([train] section)")
    t.add_argument("--data", required=True,
                   help="'synthetic[:N[:K]]' or a CIFAR binary directory")
    t.add_argument("--eval-data")
    t.add_argument("--out", help="output directory (metrics + checkpoints)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int, help="override total iterations")
    t.add_argument("--deterministic", action="store_true",
                   help="force single-threaded BLAS for bit-stable runs")
    t.add_argument("--combine", choices=("arl", "nal"))
    t.add_argument("--activation", choices=("mixed", "channel", "spatial"))
    t.add_argument("--mask", choices=("encdec", "localconv"))
    t.add_argument("--noise-clean-ratio", type=float)
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="top-1/top-5 error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    r = sub.add_parser("probe", help="per-stage mean absolute response")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--batch", type=int, default=16)
    r.add_argument("--trunk-only", action="store_true")
    r.add_argument("--mask-override", type=float)
    r.add_argument("--json", help="write machine-readable rows (- for stdout)")
    return p


_HANDLERS = {
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [t for t in extra if "=" not in t]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    if args.threads:
        os.environ["RESATTN_THREADS"] = str(args.threads)
    if getattr(args, "deterministic", False):
        os.environ.setdefault("RESATTN_THREADS", "1")
    # thread caps must land before numpy's BLAS is loaded
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get("RESATTN_THREADS"):
            os.environ.setdefault(var, os.environ["RESATTN_THREADS"])
    try:
        return _HANDLERS[args.command](args, extra)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
