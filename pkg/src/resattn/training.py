"""Training loop and experiment machinery: nesterov SGD with the
step-decay schedule, crop/flip augmentation, uniform label-noise
injection through a row-stochastic confusion matrix, evaluation,
per-stage response probes, and binary checkpoints.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .builder import serialize_spec
from .data import pixel_mean
from .errors import CheckpointError, DataError, SpecParseError, TrainingDiverged
from .ops import _interp_matrix
from .tensor import Tensor, no_grad

METRICS_SCHEMA = {"schema": "resattn.metrics", "version": 1}
CKPT_MAGIC = b"RATN"
CKPT_VERSION = 1

AUGMENT_MODES = ("none", "cifar", "imagenet")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    lr_drop_iters: tuple = (64000, 96000)
    lr_drop_factor: float = 0.1
    total_iters: int = 160000
    seed: int = 0
    noise_clean_ratio: float = 1.0
    augment: str = "cifar"
    log_every: int = 100
    eval_every: int = 0  # 0 = only at the end
    checkpoint_every: int = 0  # 0 = only at the end
    probe_every: int = 0  # 0 = off

    def __post_init__(self):
        drops = tuple(self.lr_drop_iters)
        object.__setattr__(self, "lr_drop_iters", drops)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_iters must be strictly increasing")
        if drops and drops[-1] >= self.total_iters:
            raise ValueError("lr_drop_iters must all be < total_iters")
        if not 0.0 < self.noise_clean_ratio <= 1.0:
            raise ValueError("noise_clean_ratio must lie in (0, 1]")
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be positive")


def cifar_train_config(**overrides):
    """The 160k-iteration CIFAR recipe (nesterov SGD, batch 64, lr 0.1
    dropped 10x at 64k and 96k)."""
    return replace(TrainConfig(), **overrides)


def imagenet_train_config(**overrides):
    """The 530k-iteration recipe for 224x224 networks (momentum SGD,
    lr 0.1 dropped 10x at 200k/400k/500k, scale/aspect augmentation)."""
    base = TrainConfig(
        batch_size=32,
        nesterov=False,
        lr_drop_iters=(200000, 400000, 500000),
        total_iters=530000,
        augment="imagenet",
    )
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# train-config text format (same [section] grammar as network specs)

_TRAIN_KEYS = {
    "batch": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "nesterov": bool,
    "lr_drops": "int_tuple",
    "lr_drop_factor": float,
    "total_iters": int,
    "seed": int,
    "noise_clean_ratio": float,
    "augment": str,
    "log_every": int,
    "eval_every": int,
    "checkpoint_every": int,
    "probe_every": int,
}
_TRAIN_FIELD = {
    "batch": "batch_size",
    "lr": "base_lr",
    "lr_drops": "lr_drop_iters",
}


def serialize_train_config(cfg):
    lines = [
        "[train]",
        f"batch = {cfg.batch_size}",
        f"lr = {cfg.base_lr}",
        f"momentum = {cfg.momentum}",
        f"weight_decay = {cfg.weight_decay}",
        f"nesterov = {str(cfg.nesterov).lower()}",
        "lr_drops = " + ",".join(str(i) for i in cfg.lr_drop_iters),
        f"lr_drop_factor = {cfg.lr_drop_factor}",
        f"total_iters = {cfg.total_iters}",
        f"seed = {cfg.seed}",
        f"noise_clean_ratio = {cfg.noise_clean_ratio}",
        f"augment = {cfg.augment}",
        f"log_every = {cfg.log_every}",
        f"eval_every = {cfg.eval_every}",
        f"checkpoint_every = {cfg.checkpoint_every}",
        f"probe_every = {cfg.probe_every}",
    ]
    return "\n".join(lines) + "\n"


def parse_train_config(text):
    from .builder import _convert, _parse_sections

    sections = _parse_sections(text, allowed=("network", "attention", "train"))
    if "train" not in sections:
        raise SpecParseError("missing [train] section")
    kw = {}
    for key, (value, lineno) in sections["train"].items():
        if key not in _TRAIN_KEYS:
            raise SpecParseError(f"unknown key {key!r} in [train]", lineno)
        kw[_TRAIN_FIELD.get(key, key)] = _convert(key, value, lineno, _TRAIN_KEYS[key])
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise SpecParseError(str(exc)) from exc


def config_hash(spec, cfg):
    text = serialize_spec(spec) + serialize_train_config(cfg)
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# optimizer + schedule


def lr_schedule(iteration, cfg):
    """base_lr * factor^(number of drop points <= iteration)."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    drops = sum(1 for d in cfg.lr_drop_iters if d <= iteration)
    return cfg.base_lr * cfg.lr_drop_factor**drops


def make_velocity(params):
    return {name: np.zeros_like(t.data) for name, t in params.items()}


def sgd_step(params, velocity, lr, momentum, weight_decay, nesterov):
    """v <- momentum*v + (g + wd*p);
    nesterov: p <- p - lr*(g + wd*p + momentum*v), else p <- p - lr*v.
    Weight decay applies to conv/fc weights only. Raises on non-finite
    gradients before touching any parameter."""
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name}", param=name)
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        if weight_decay and params.info(name).kind in ("conv_w", "fc_w"):
            g = g + weight_decay * t.data
        v = velocity[name]
        v *= momentum
        v += g
        if nesterov:
            t.data -= lr * (g + momentum * v)
        else:
            t.data -= lr * v


# ---------------------------------------------------------------------------
# augmentation


def augment_cifar(image, mean, rng, offset=None, flip=None, pad=4):
    """Zero-pad by ``pad``, random crop back to the original size,
    50% horizontal flip, then subtract the per-pixel mean. ``offset``
    and ``flip`` override the random draws (testing seam)."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    if offset is None:
        dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    else:
        dy, dx = offset
    if flip is None:
        flip = bool(rng.random() < 0.5)
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return out - mean


def eval_transform(images, mean):
    """The test-time path: mean subtraction only."""
    return images - mean[None]


@dataclass
class ColorStats:
    """Channel mean/std plus RGB covariance eigenpairs for lighting
    augmentation."""

    mean: np.ndarray
    std: np.ndarray
    eigval: np.ndarray
    eigvec: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, sample=10000):
        px = dataset.images[:sample].transpose(0, 2, 3, 1).reshape(-1, 3)
        mean = px.mean(axis=0)
        std = px.std(axis=0) + 1e-8
        cov = np.cov(px, rowvar=False)
        eigval, eigvec = np.linalg.eigh(cov)
        return cls(mean, std, eigval, eigvec)


def augment_imagenet(image, stats, rng, out_size=224, scale=(0.08, 1.0),
                     ratio=(3 / 4, 4 / 3)):
    """Scale/aspect-ratio crop resized to ``out_size``, horizontal flip,
    channel-standardization, and PCA lighting jitter."""
    c, h, w = image.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            crop = image[:, y0 : y0 + ch, x0 : x0 + cw]
            break
    else:
        side = min(h, w)
        y0, x0 = (h - side) // 2, (w - side) // 2
        crop = image[:, y0 : y0 + side, x0 : x0 + side]
    ah = _interp_matrix(crop.shape[1], out_size, np.float32)
    aw = _interp_matrix(crop.shape[2], out_size, np.float32)
    out = np.matmul(ah, np.matmul(crop, aw.T))
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    alpha = rng.normal(0.0, 0.1, size=3)
    lighting = stats.eigvec @ (alpha * np.sqrt(np.maximum(stats.eigval, 0.0)))
    out = out + lighting[:, None, None].astype(np.float32)
    return (out - stats.mean[:, None, None]) / stats.std[:, None, None]


# ---------------------------------------------------------------------------
# label noise


@dataclass
class ConfusionMatrix:
    """Row-stochastic label transition matrix with clean ratio r on the
    diagonal and (1-r)/(K-1) off it."""

    q: np.ndarray
    clean_ratio: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        k = self.q.shape[0]
        if self.q.shape != (k, k):
            raise DataError("confusion matrix must be square")
        rows = self.q.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-9:
            raise DataError("confusion matrix rows must sum to 1 within 1e-9")

    @classmethod
    def uniform(cls, num_classes, clean_ratio):
        if not 0.0 < clean_ratio <= 1.0:
            raise DataError("clean ratio must lie in (0, 1]")
        if num_classes < 2 and clean_ratio < 1.0:
            raise DataError("noise needs at least 2 classes")
        k = num_classes
        off = (1.0 - clean_ratio) / (k - 1) if k > 1 else 0.0
        q = np.full((k, k), off)
        np.fill_diagonal(q, clean_ratio)
        return cls(q, clean_ratio)


def corrupt_labels(labels, cm, rng):
    """Resample each label from its confusion-matrix row, independently.
    Called once at dataset construction; the corruption is then fixed."""
    labels = np.asarray(labels)
    k = cm.q.shape[0]
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels out of range [0, {k})")
    cdf = np.cumsum(cm.q, axis=1)
    u = rng.random(len(labels))
    return (u[:, None] > cdf[labels]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# evaluation + probes


def evaluate(model, dataset, mean=None, batch_size=200):
    """Top-1 (and top-5 when classes >= 5) error under eval-mode BN with
    mean subtraction as the only preprocessing."""
    if len(dataset) == 0:
        raise DataError("evaluate on an empty dataset")
    correct1 = 0
    correct5 = 0
    k = dataset.num_classes
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            imgs = dataset.images[start : start + batch_size]
            if mean is not None:
                imgs = eval_transform(imgs, mean)
            labels = dataset.labels[start : start + batch_size]
            logits = model.forward(Tensor(imgs), training=False).data
            order = np.argsort(-logits, axis=1)
            correct1 += int((order[:, 0] == labels).sum())
            if k >= 5:
                correct5 += int((order[:, :5] == labels[:, None]).any(axis=1).sum())
    n = len(dataset)
    top1_err = 1.0 - correct1 / n
    top5_err = (1.0 - correct5 / n) if k >= 5 else None
    return top1_err, top5_err


@dataclass
class ProbeRecord:
    """Mean absolute activation of each named stage's output."""

    iteration: int
    responses: dict  # stage name -> float


def response_probe(model, images, iteration=0, mean=None, **forward_kw):
    """Eval-mode forward collecting mean |activation| per stage output."""
    imgs = np.asarray(images, dtype=np.float32)
    if mean is not None:
        imgs = eval_transform(imgs, mean)
    with no_grad():
        _, probes = model.forward(Tensor(imgs), training=False, want_probes=True,
                                  **forward_kw)
    responses = {
        stage: float(np.abs(t.data).mean())
        for stage, t in probes.items()
        if stage.startswith("stage")
    }
    return ProbeRecord(iteration=iteration, responses=responses)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, velocity, rng, iteration, cfg, pixel_mean_arr=None):
    """Single-file binary: magic, version, JSON meta (config hash, spec
    text, rng state), then an npz payload of all arrays."""
    meta = {
        "iteration": int(iteration),
        "config_hash": config_hash(model.spec, cfg),
        "spec_text": serialize_spec(model.spec),
        "train_text": serialize_train_config(cfg),
        "rng_state": _encode_rng(rng),
    }
    arrays = model.state_arrays()
    arrays = {**arrays, **{f"vel:{k}": v for k, v in velocity.items()}}
    if pixel_mean_arr is not None:
        arrays["aux:pixel_mean"] = pixel_mean_arr
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (meta dict, arrays dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        meta = json.loads(f.read(meta_len).decode())
        arrays = dict(np.load(io.BytesIO(f.read())))
    return meta, arrays


def load_checkpoint(path, model, cfg=None, force=False):
    """Restore model/optimizer/rng state. Refuses on config-hash
    mismatch unless ``force``."""
    meta, arrays = read_checkpoint(path)
    if cfg is not None and not force:
        expect = config_hash(model.spec, cfg)
        if meta["config_hash"] != expect:
            raise CheckpointError(
                f"{path}: config hash {meta['config_hash'][:12]} does not match "
                f"current config {expect[:12]} (use force to override)"
            )
    model.load_state_arrays(arrays)
    velocity = {
        k[len("vel:"):]: v.copy() for k, v in arrays.items() if k.startswith("vel:")
    }
    rng = np.random.default_rng()
    rng.bit_generator.state = _decode_rng(meta["rng_state"])
    mean = arrays.get("aux:pixel_mean")
    return velocity, rng, meta["iteration"], mean


def _encode_rng(rng):
    state = rng.bit_generator.state
    return json.dumps(state)


def _decode_rng(text):
    return json.loads(text)


# ---------------------------------------------------------------------------
# metric log


class MetricLog:
    """Append-only JSON-lines log; first line pins the schema."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path and not os.path.exists(path):
            with open(path, "w") as f:
                f.write(json.dumps(METRICS_SCHEMA, sort_keys=True) + "\n")

    def append(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path):
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("schema") != METRICS_SCHEMA["schema"]:
            raise DataError(f"{path}: not a metric log")
        return lines[0], lines[1:]


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    metrics: list
    probes: list
    final_checkpoint: str | None
    iterations_run: int
    final_eval_err: float | None = None


def train(model, cfg, train_data, eval_data=None, out_dir=None, resume=None,
          stop_fn=None):
    """Run the training loop.

    Augment -> forward -> softmax cross-entropy -> backward -> SGD step,
    with the step-decay schedule. Logs every ``log_every`` iterations;
    checkpoints/evaluates/probes on their intervals and at the end.
    ``stop_fn(iteration, metrics)`` may end the run early (used by
    overfit-style experiments). Label noise is injected once, up front.
    """
    if model.input_shape is not None:
        if tuple(train_data.images.shape[1:]) != tuple(model.input_shape):
            raise DataError(
                f"data geometry {train_data.images.shape[1:]} does not match "
                f"network input {model.input_shape}"
            )
    if train_data.num_classes < 2:
        raise DataError("training needs at least 2 classes")
    if cfg.noise_clean_ratio < 1.0 and train_data.num_classes < 2:
        raise DataError("label noise requires a classification dataset")

    ss = np.random.SeedSequence(cfg.seed)
    noise_seed, loop_seed = ss.spawn(2)

    labels = train_data.labels
    if cfg.noise_clean_ratio < 1.0:
        cm = ConfusionMatrix.uniform(train_data.num_classes, cfg.noise_clean_ratio)
        labels = corrupt_labels(labels, cm, np.random.default_rng(noise_seed))

    mean = pixel_mean(train_data)
    color_stats = None
    if cfg.augment == "imagenet":
        color_stats = ColorStats.from_dataset(train_data)

    rng = np.random.default_rng(loop_seed)
    velocity = make_velocity(model.params)
    start_iter = 0
    if resume is not None:
        velocity, rng, start_iter, saved_mean = load_checkpoint(resume, model, cfg)
        if saved_mean is not None:
            mean = saved_mean

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = MetricLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    probes = []

    def ckpt_path(it):
        return os.path.join(out_dir, f"ckpt_{it:07d}.rat") if out_dir else None

    def save(it):
        if out_dir:
            p = ckpt_path(it)
            save_checkpoint(p, model, velocity, rng, it, cfg, pixel_mean_arr=mean)
            return p
        return None

    win_loss = []
    win_acc = []
    final_ckpt = None
    it = start_iter
    while it < cfg.total_iters:
        lr = lr_schedule(it, cfg)
        idx = rng.integers(0, len(train_data), size=cfg.batch_size)
        raw = train_data.images[idx]
        if cfg.augment == "cifar":
            batch = np.stack([augment_cifar(img, mean, rng) for img in raw])
        elif cfg.augment == "imagenet":
            batch = np.stack(
                [augment_imagenet(img, color_stats, rng,
                                  out_size=model.input_shape[1]) for img in raw]
            )
        else:
            batch = raw - mean[None]
        y = labels[idx]
        logits = model.forward(Tensor(batch.astype(np.float32)), training=True)
        loss = ops.softmax_cross_entropy(logits, y)
        loss_val = float(loss.item())
        if not np.isfinite(loss_val):
            save(it)
            raise TrainingDiverged(
                f"non-finite loss {loss_val} at iteration {it}", iteration=it
            )
        acc = float((np.argmax(logits.data, axis=1) == y).mean())
        model.params.zero_grad()
        loss.backward()
        try:
            sgd_step(model.params, velocity, lr, cfg.momentum,
                     cfg.weight_decay, cfg.nesterov)
        except TrainingDiverged as exc:
            save(it)
            raise TrainingDiverged(str(exc), iteration=it, param=exc.param)
        win_loss.append(loss_val)
        win_acc.append(acc)
        it += 1

        if it % cfg.log_every == 0 or it == cfg.total_iters:
            record = {
                "iter": it,
                "lr": lr,
                "train_loss": float(np.mean(win_loss)),
                "train_acc": float(np.mean(win_acc)),
            }
            win_loss.clear()
            win_acc.clear()
            if cfg.eval_every and eval_data is not None and it % cfg.eval_every == 0:
                err, _ = evaluate(model, eval_data, mean)
                record["eval_err"] = err
            log.append(**record)
        if cfg.probe_every and it % cfg.probe_every == 0:
            probes.append(response_probe(model, train_data.images[:16], it, mean))
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            final_ckpt = save(it)
        if stop_fn is not None and stop_fn(it, log.records):
            break

    final_ckpt = save(it) or final_ckpt
    final_err = None
    if eval_data is not None:
        final_err, _ = evaluate(model, eval_data, mean)
    return TrainResult(
        metrics=log.records,
        probes=probes,
        final_checkpoint=final_ckpt,
        iterations_run=it - start_iter,
        final_eval_err=final_err,
    )
