"""Optimization loop: AdamW, LR schedules, smoothed cross-entropy, metrics.

One optimizer stream per model; shuffling and augmentation draw from a single
training RNG whose state is checkpointed, so a resumed run replays the exact
trajectory of an unbroken one.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import AugmentConfig, augment, resample_to_n
from .errors import ConfigError, ContractError, IndexRangeError
from .model import CdModel, save_checkpoint
from .tensor import Tensor


@dataclass
class AdamWState:
    """Per-parameter moments plus step count; decay masks follow the usual
    rule of skipping biases and norm affine terms."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


def adamw_init(params: dict, weight_decay: float = 0.05, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamWState:
    # moments kept in float64 regardless of parameter dtype so a resumed run
    # replays bitwise
    return AdamWState(
        m={k: np.zeros(p.data.shape, np.float64) for k, p in params.items()},
        v={k: np.zeros(p.data.shape, np.float64) for k, p in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def _decays(name: str) -> bool:
    return not name.endswith((".bias", ".gamma", ".beta"))


def adamw_step(params: dict, state: AdamWState, lr: float, clip_norm: Optional[float] = None) -> None:
    """Decoupled update: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""
    grads = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        grads[name] = g
    if clip_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / (total + 1e-12)
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and _decays(name):
            update = update + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


def lr_at(schedule: str, step: int, total_steps: int, lr0: float, milestones=(), gamma: float = 0.1) -> float:
    """cosine: lr0*0.5*(1+cos(pi*step/total)); step: lr0*gamma^(milestones passed)."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if schedule == "cosine":
        return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
    if schedule == "step":
        k = sum(1 for ms in milestones if step >= ms)
        return lr0 * gamma**k
    raise ConfigError(f"unknown schedule {schedule!r}")


def ce_label_smoothing(logits: Tensor, labels: np.ndarray, eps: float = 0.1) -> Tensor:
    """Mean cross-entropy against (1-eps)*onehot + eps/U uniform targets."""
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing must be in [0,1), got {eps}")
    labels = np.asarray(labels, dtype=np.int64)
    u = logits.data.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= u):
        raise IndexRangeError(f"label {labels.min() if labels.min() < 0 else labels.max()} outside [0, {u})")
    lsm = T.log_softmax_last(logits)
    picked = T.tmean(T.take_last(lsm, labels))
    if eps == 0.0:
        return T.scale(picked, -1.0)
    uniform = T.tmean(T.sum_last(lsm))
    return T.scale(T.add(T.scale(picked, 1.0 - eps), T.scale(uniform, eps / u)), -1.0)


class MetricAccumulator:
    """Confusion-matrix accumulator -> OA / mAcc / mIoU."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.count = 0

    def update(self, pred, truth) -> None:
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise ContractError(f"pred/truth shapes differ: {pred.shape} vs {truth.shape}")
        u = self.confusion.shape[0]
        if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= u):
            raise IndexRangeError(f"class id outside [0, {u})")
        np.add.at(self.confusion, (truth, pred), 1)
        self.count += pred.size


def metrics_finalize(acc: MetricAccumulator) -> dict:
    """OA over all points; mAcc over classes with support; mIoU over classes
    present in truth or prediction (absent classes are skipped, not 0/0)."""
    if acc.count == 0:
        raise ContractError("metrics on an empty accumulator")
    conf = acc.confusion.astype(np.float64)
    tp = np.diag(conf)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    oa = tp.sum() / conf.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = tp / support
        iou = tp / (support + predicted - tp)
    macc = float(recall[support > 0].mean())
    present = (support + predicted) > 0
    miou = float(iou[present].mean())
    return {"OA": float(oa), "mAcc": macc, "mIoU": miou}


# --- the loop -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    milestones: tuple = ()
    label_smoothing: float = 0.1
    clip_norm: Optional[float] = None
    seed: int = 0
    resample_points: Optional[int] = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["augment"] = self.augment.to_dict()
        d["milestones"] = list(self.milestones)
        return d

    @staticmethod
    def from_dict(d):
        unknown = set(d) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return TrainConfig(**d)


def _prepare(items, points: Optional[int], seed: int):
    """Equal-size clouds as stacked arrays: coords (B,N,3), class ids, point labels."""
    clouds = []
    for i, (cloud, cls) in enumerate(items):
        if points is not None and cloud.n != points:
            cloud = resample_to_n(cloud, points, seed=seed + i)
        clouds.append((cloud, cls))
    sizes = {c.n for c, _ in clouds}
    if len(sizes) != 1:
        raise ConfigError(f"clouds must share a point count (got {sorted(sizes)}); set resample_points")
    return clouds


def _batch_arrays(clouds, idx, task: str, num_classes: int):
    coords = np.stack([clouds[i][0].coords for i in idx])
    if task == "classification":
        labels = np.array([clouds[i][1] for i in idx], dtype=np.int64)
    else:
        for i in idx:
            if clouds[i][0].labels is None:
                raise ConfigError("segmentation training needs per-point labels")
        labels = np.concatenate([clouds[i][0].labels for i in idx])
    if labels.size and labels.max() >= num_classes:
        raise ConfigError(
            f"label {labels.max()} outside [0, {num_classes}); dataset/task mismatch"
        )
    return coords, labels


def evaluate(model: CdModel, items, batch_size: int = 32) -> dict:
    """Metrics over a list of (cloud, class_id) items."""
    if not items:
        raise ContractError("evaluate on an empty dataset")
    clouds = _prepare(items, None, 0)
    acc = MetricAccumulator(model.cfg.num_classes)
    with T.no_grad():
        for s in range(0, len(clouds), batch_size):
            idx = range(s, min(s + batch_size, len(clouds)))
            coords, labels = _batch_arrays(clouds, idx, model.cfg.task, model.cfg.num_classes)
            logits = model.forward(coords)
            acc.update(np.argmax(logits.data, axis=-1), labels)
    return metrics_finalize(acc)


def train_loop(
    model: CdModel,
    train_items,
    val_items,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    run_epochs: Optional[int] = None,
    resume_state: Optional[dict] = None,
    callback: Optional[Callable] = None,
) -> list:
    """Seeded epochs of shuffle/augment/step; returns one record per epoch.

    run_epochs stops early without altering the schedule (used by tests and
    resume). callback(record) may return True to stop. Writes train_log.jsonl,
    checkpoints best/ and last/ when out_dir is given.
    """
    task = model.cfg.task
    clouds = _prepare(train_items, cfg.resample_points, cfg.seed)
    params = model.named_params()
    opt = adamw_init(params, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    if resume_state is not None:
        opt.t = resume_state["t"]
        for k in params:
            opt.m[k] = resume_state["m"][k].astype(np.float64)
            opt.v[k] = resume_state["v"][k].astype(np.float64)
        rng.bit_generator.state = resume_state["rng"]
        start_epoch = resume_state["epoch"]

    history = []
    best_key = "mIoU" if task == "segmentation" else "OA"
    best_val = -1.0
    step = opt.t
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        if start_epoch == 0 and os.path.exists(log_path):
            os.remove(log_path)

    last = cfg.epochs if run_epochs is None else min(cfg.epochs, start_epoch + run_epochs)
    for epoch in range(start_epoch, last):
        t0 = time.time()
        lr = lr_at(cfg.schedule, epoch, cfg.epochs, cfg.lr, cfg.milestones)
        order = rng.permutation(len(clouds))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch = [
                (augment(clouds[i][0], cfg.augment, rng), clouds[i][1]) for i in idx
            ]
            coords, labels = _batch_arrays(batch, range(len(batch)), task, model.cfg.num_classes)
            model.zero_grad()
            logits = model.forward(coords)
            loss = ce_label_smoothing(logits, labels, cfg.label_smoothing)
            loss.backward()
            adamw_step(params, opt, lr, cfg.clip_norm)
            losses.append(float(loss.data))
            step += 1
        record = {
            "epoch": epoch,
            "step": step,
            "lr": float(lr),
            "train_loss": float(np.mean(losses)),
        }
        if val_items:
            val = evaluate(model, val_items)
            record.update({"val_OA": val["OA"], "val_mAcc": val["mAcc"], "val_mIoU": val["mIoU"]})
        record["wall_s"] = time.time() - t0
        history.append(record)
        if log_path:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if out_dir:
            meta = {
                "epoch": epoch + 1,
                "rng": rng.bit_generator.state,
                "train_config": cfg.to_dict(),
                "record": record,
            }
            save_checkpoint(os.path.join(out_dir, "last"), model, meta=meta, opt_state=opt)
            key = record.get(f"val_{best_key}", record.get("val_OA"))
            if val_items and key is not None and key > best_val:
                best_val = key
                save_checkpoint(os.path.join(out_dir, "best"), model, meta=meta, opt_state=opt)
        if callback is not None and callback(record):
            break
    return history
