"""Losses, AdamW, plateau scheduling, evaluation and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import AugmentParams, DatasetManifest, augment, random_crop_foreground
from .inference import predict_labels
from .model import UXNet, assign_weights, read_checkpoint, save_weights
from .rng import Rng, is_deterministic
from .tensor import (
    Tensor, add, backward, div, log_softmax_channels, mul, reduce_sum, scalar_add, scalar_mul, softmax_channels,
)

LOSS_MODES = ("DICE", "DICE_CE")
DS_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, h, w, d)`` integer labels -> ``(N, K, h, w, d)``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")
    return (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1, 1)).astype(dtype)


def dice_loss(logits: Tensor, labels, smooth: float = 1e-5, include_background: bool = True) -> Tensor:
    """``1 - mean_c (2 sum p y + s) / (sum p + sum y + s)`` over the whole batch."""
    k = logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    y = one_hot(labels, k, logits.dtype)
    p = softmax_channels(logits)
    axes = (0, 2, 3, 4)
    inter = reduce_sum(mul(p, y), axes)
    denom = add(reduce_sum(p, axes), y.sum(axis=axes) + logits.dtype.type(smooth))
    dice = div(scalar_add(scalar_mul(inter, 2.0), smooth), denom)
    mask = np.ones(k, dtype=logits.dtype)
    if not include_background:
        mask[0] = 0
    mean = scalar_mul(reduce_sum(mul(dice, mask)), 1.0 / mask.sum())
    return scalar_add(scalar_mul(mean, -1.0), 1.0)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    y = one_hot(np.asarray(labels), logits.shape[1], logits.dtype)
    n_vox = logits.size // logits.shape[1]
    return scalar_mul(reduce_sum(mul(log_softmax_channels(logits), y)), -1.0 / n_vox)


def segmentation_loss(logits: Tensor, labels, mode: str = "DICE", include_background: bool = True) -> Tensor:
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}")
    loss = dice_loss(logits, labels, include_background=include_background)
    if mode == "DICE_CE":
        loss = add(loss, cross_entropy(logits, labels))
    return loss


def normalized_ds_weights(n: int, base=DS_WEIGHTS) -> list[float]:
    w = list(base[:n])
    total = sum(w)
    return [v / total for v in w]


def deep_supervised_loss(outputs, labels, weights, mode: str = "DICE", include_background: bool = True) -> Tensor:
    """``sum_i w_i * loss(head_i)``; weights must match the heads and sum to 1."""
    outputs = list(outputs) if isinstance(outputs, (list, tuple)) else [outputs]
    if len(weights) != len(outputs):
        raise ValueError(f"{len(weights)} weights for {len(outputs)} heads")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ValueError(f"deep-supervision weights must sum to 1, got {sum(weights)}")
    total = None
    for w, out in zip(weights, outputs):
        term = scalar_mul(segmentation_loss(out, labels, mode, include_background), float(w))
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# Optimizer + scheduler
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: ``w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)``."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.08):
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f"m.{n}", self.m[n]) for n, _ in self.params] + [(f"v.{n}", self.v[n]) for n, _ in self.params]

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for n, _ in self.params:
            self.m[n] = arrays[f"m.{n}"].copy()
            self.v[n] = arrays[f"v.{n}"].copy()
        self.t = int(t)


class PlateauScheduler:
    """Multiply lr by ``factor`` after more than ``patience`` evaluations without improvement."""

    def __init__(self, optimizer: AdamW, factor: float = 0.9, patience: int = 10):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.opt, self.factor, self.patience = optimizer, factor, patience
        self.best = -math.inf
        self.stall = 0

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise ValueError(f"scheduler metric must be finite, got {metric}")
        if metric > self.best:
            self.best = metric
            self.stall = 0
        else:
            self.stall += 1
            if self.stall > self.patience:
                self.opt.lr *= self.factor
                self.stall = 0
        return self.opt.lr

    def state(self) -> dict:
        return {"best": self.best if math.isfinite(self.best) else None, "stall": self.stall}

    def load_state(self, d: dict) -> None:
        self.best = -math.inf if d.get("best") is None else float(d["best"])
        self.stall = int(d["stall"])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def hard_dice(pred: np.ndarray, target: np.ndarray, num_classes: int) -> list[float]:
    """Per-class ``2|A & B| / (|A| + |B|)``; a class absent from both scores 1."""
    out = []
    for c in range(num_classes):
        a, b = pred == c, target == c
        denom = int(a.sum()) + int(b.sum())
        out.append(1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom)
    return out


def class_names(num_classes: int) -> list[str]:
    return ["background"] + [f"class{c}" for c in range(1, num_classes)]


def evaluate(model: UXNet, pairs, num_classes: int, overlap: float = 0.5) -> dict:
    """Mean over volumes of per-class hard Dice; ``mean`` excludes background."""
    if not pairs:
        raise TrainingError("evaluation split is empty")
    scores = np.array([hard_dice(predict_labels(model, img, overlap=overlap), lab, num_classes)
                       for img, lab in pairs])
    # fsum makes the mean exactly independent of volume order
    per_class = np.array([math.fsum(col) / len(scores) for col in scores.T])
    names = class_names(num_classes)
    fg = per_class[1:] if num_classes > 1 else per_class
    return {"per_class": {n: float(v) for n, v in zip(names, per_class)}, "mean": float(fg.mean())}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 40000
    batch_size: int = 2
    crops_per_volume: int = 2
    eval_interval: int = 50
    checkpoint_interval: int = 0  # 0: only best/last
    loss_mode: str = "DICE"
    include_background: bool = True
    ds_weights: tuple = DS_WEIGHTS
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.08
    plateau_factor: float = 0.9
    plateau_patience: int = 10
    # whole volumes are scored, so background-only crops need real weight
    fg_prob: float = 1 / 3
    eval_overlap: float = 0.5
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentParams.from_dict(self.augment)
        self.ds_weights = tuple(self.ds_weights)
        self.betas = tuple(self.betas)

    def violations(self) -> list[str]:
        errs = []
        if self.steps < 1:
            errs.append("steps must be >= 1")
        if self.batch_size < 1 or self.crops_per_volume < 1:
            errs.append("batch_size and crops_per_volume must be >= 1")
        if self.eval_interval < 1:
            errs.append("eval_interval must be >= 1")
        if self.checkpoint_interval < 0:
            errs.append("checkpoint_interval must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            errs.append(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr <= 0:
            errs.append("lr must be positive")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.violations()
        if errs:
            raise ValueError("invalid TrainConfig: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


def sample_batch(pairs, cfg: TrainConfig, patch, rng: Rng):
    images, labels = [], []
    for _ in range(cfg.batch_size):
        img, lab = pairs[int(rng.integers(0, len(pairs)))]
        for _ in range(cfg.crops_per_volume):
            pi, pl = random_crop_foreground(img, lab, patch, rng, cfg.fg_prob)
            pi, pl = augment(pi, pl, cfg.augment, rng)
            images.append(pi)
            labels.append(pl)
    return np.stack(images)[:, None], np.stack(labels)


def _checkpoint(path, model, opt, sched, rng, step, extra=None):
    meta = {"step": step, "t": opt.t, "lr": opt.lr, "scheduler": sched.state(), "rng": rng.get_state()}
    meta.update(extra or {})
    save_weights(model, path, sections={"optimizer": opt.state_arrays()}, meta=meta)


def train(model: UXNet, manifest: DatasetManifest, cfg: TrainConfig, out_dir, seed: int = 0,
          resume=None, log_name: str = "metrics.jsonl") -> dict:
    """Run ``cfg.steps`` optimizer steps; writes a JSON-lines log and UXCK checkpoints to ``out_dir``.

    With deterministic mode on, log lines carry ``wall_ms: null`` so two runs
    produce identical logs; timings go to ``timing.jsonl`` instead.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs = manifest.load_pairs("train")
    if not train_pairs:
        raise TrainingError("training split is empty")
    val_pairs = manifest.load_pairs("val") or train_pairs
    k = manifest.num_classes
    if model.config.num_classes != k:
        raise TrainingError(f"model predicts {model.config.num_classes} classes, dataset has {k}")
    patch = model.config.patch_size
    n_heads = 4 if model.config.deep_supervision else 1
    weights = normalized_ds_weights(n_heads, cfg.ds_weights)

    opt = AdamW(model.named_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    sched = PlateauScheduler(opt, cfg.plateau_factor, cfg.plateau_patience)
    rng = Rng(seed)
    start = 1
    best = {"dice": -math.inf, "step": 0}
    log_path, timing_path = out / log_name, out / "timing.jsonl"
    if resume is not None:
        ck = read_checkpoint(resume)
        assign_weights(model, ck["params"])
        meta = ck["meta"]
        opt.load_state_arrays(ck["sections"]["optimizer"], meta["t"])
        opt.lr = meta["lr"]
        sched.load_state(meta["scheduler"])
        rng.set_state(meta["rng"])
        start = meta["step"] + 1
        if meta.get("best_dice") is not None:
            best = {"dice": meta["best_dice"], "step": meta["best_step"]}
        # drop anything an earlier run logged past the checkpoint
        for path in (log_path, timing_path):
            if path.exists():
                kept = [ln for ln in path.read_text().splitlines(keepends=True)
                        if ln.strip() and json.loads(ln)["step"] < start]
                path.write_text("".join(kept))
    else:
        log_path.write_text("")
        if timing_path.exists():
            timing_path.unlink()
    deterministic = is_deterministic()
    last_eval = None

    def extra():
        return {"best_dice": best["dice"] if math.isfinite(best["dice"]) else None, "best_step": best["step"]}

    for step in range(start, cfg.steps + 1):
        t0 = time.perf_counter()
        x, y = sample_batch(train_pairs, cfg, patch, rng)
        outputs = model(Tensor(x.astype(model.dtype)))
        loss = deep_supervised_loss(outputs, y, weights, cfg.loss_mode, cfg.include_background)
        lval = float(loss.item())
        if not math.isfinite(lval):
            diag = out / "diagnostic.uxck"
            _checkpoint(diag, model, opt, sched, rng, step, extra())
            raise TrainingError(f"non-finite loss at step {step}; diagnostic checkpoint at {diag}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        opt.zero_grad()
        record = {"step": step, "loss": lval, "lr": opt.lr, "dice": None}
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            ev = evaluate(model, val_pairs, k, cfg.eval_overlap)
            last_eval = ev
            record["dice"] = ev["per_class"]
            record["mean_dice"] = ev["mean"]
            sched.step(ev["mean"])
            if ev["mean"] > best["dice"]:
                best = {"dice": ev["mean"], "step": step}
                _checkpoint(out / "best.uxck", model, opt, sched, rng, step, extra())
        wall = (time.perf_counter() - t0) * 1000.0
        record["wall_ms"] = None if deterministic else round(wall, 3)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if deterministic:
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"step": step, "wall_ms": round(wall, 3)}) + "\n")
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            _checkpoint(out / f"step{step:06d}.uxck", model, opt, sched, rng, step, extra())
    _checkpoint(out / "last.uxck", model, opt, sched, rng, cfg.steps, extra())
    return {"best_dice": best["dice"], "best_step": best["step"], "last_eval": last_eval,
            "log": str(log_path), "checkpoint": str(out / "last.uxck")}
