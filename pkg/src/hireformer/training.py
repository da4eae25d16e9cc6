"""Training loops: masked-sentence pretraining and classifier finetuning.

Every random draw during training comes from a stream derived from
``(seed, stream, step)``, so a run resumed from a checkpoint replays the
exact loss sequence of an uninterrupted one.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import (
    HierModel, ModelConfig, classification_loss, classifier_forward, init_model, load_base,
    pretrain_loss,
)
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.optim import OptimizerState, adamw_step
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, no_grad, use_tape

PRETRAIN_LR = 2e-4
FINETUNE_LR = 2e-5
FINETUNE_FROZEN_LR = 3e-6


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    """Loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    task: str = "pretrain"
    lr_peak: Optional[float] = None           # None: task default
    schedule: Optional[str] = None            # None: linear for pretrain, cosine for finetune
    batch_size_effective: int = 32
    micro_batch: int = 8
    epochs: Optional[float] = None            # None: 1 for pretrain, 2 for finetune
    total_steps: Optional[int] = None         # overrides epochs when set
    warmup_steps: int = 0
    freeze_base: bool = False
    lam: float = 0.1
    l1_mode: str = "alpha"
    mask_ratio: float = 0.15
    clip_norm: Optional[float] = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0                       # 0: once per epoch

    def __post_init__(self):
        if self.task not in ("pretrain", "finetune"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.micro_batch < 1 or self.batch_size_effective % self.micro_batch:
            raise ValueError("batch_size_effective must be a positive multiple of micro_batch")
        if self.schedule not in (None, "linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def lr(self) -> float:
        if self.lr_peak is not None:
            return self.lr_peak
        if self.task == "pretrain":
            return PRETRAIN_LR
        return FINETUNE_FROZEN_LR if self.freeze_base else FINETUNE_LR

    @property
    def schedule_name(self) -> str:
        return self.schedule or ("linear" if self.task == "pretrain" else "cosine")

    @property
    def n_epochs(self) -> float:
        if self.epochs is not None:
            return self.epochs
        return 1.0 if self.task == "pretrain" else 2.0

    @property
    def accumulation(self) -> int:
        return self.batch_size_effective // self.micro_batch

    def to_dict(self) -> dict:
        return asdict(self)


# --- schedules -------------------------------------------------------------------

def _check(step, total):
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total_steps, got step={step}, total={total}")


def lr_linear(step: int, total_steps: int, lr_peak: float) -> float:
    _check(step, total_steps)
    return lr_peak * (1.0 - step / total_steps)


def lr_cosine(step: int, total_steps: int, lr_peak: float) -> float:
    _check(step, total_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    fn = lr_linear if config.schedule_name == "linear" else lr_cosine
    span = total_steps - config.warmup_steps
    return fn(min(step - config.warmup_steps, span), max(span, 1), config.lr)


# --- one optimizer step --------------------------------------------------------------

def trainable(model: HierModel, config: TrainConfig) -> dict[str, Tensor]:
    """Parameters updated by ``config``: heads of the task, plus the base unless frozen."""
    head = "pretrain." if config.task == "pretrain" else "cls."
    out = {}
    for k, v in model.params.items():
        if k.startswith(head) or (k.startswith("base.") and not config.freeze_base):
            out[k] = v
    return out


def _example(item):
    """``(doc, label)`` from a LabeledExample-like object or a pair."""
    if hasattr(item, "doc"):
        return item.doc, getattr(item, "y")
    if isinstance(item, tuple) and len(item) == 2:
        return item
    return item, None


def _doc_id(doc) -> str:
    return getattr(doc, "doc_id", "?")


def _micro_loss(model, config, items, step, micro_index, offset):
    """Loss of one micro-batch.

    Hash rotations are keyed by step and masks by batch position, so
    splitting a batch into micro-batches does not change either.
    """
    docs = [_example(it)[0] for it in items]
    lsh = RngStream(config.seed, "lsh", (step,)).generator()
    drop = None
    if model.config.dropout > 0:
        drop = RngStream(config.seed, "dropout", (step, micro_index)).generator()
    if config.task == "pretrain":
        masks = [RngStream(config.seed, "mask", (step, offset + i)).generator() for i in range(len(docs))]
        return pretrain_loss(model, docs, config.mask_ratio, mask_gen=masks, gen=lsh, dropout_gen=drop)
    labels = [_example(it)[1] for it in items]
    out = classifier_forward(model, docs, gen=lsh, dropout_gen=drop)
    return classification_loss(out, labels, config.lam, config.l1_mode)


def global_norm(grads: dict) -> float:
    # sorted so a model restored from a checkpoint sums in the same order
    return math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads)))


def train_step(batch: Sequence, model: HierModel, config: TrainConfig, state: OptimizerState,
               step: int, lr: float) -> float:
    """Accumulate gradients over micro-batches of ``batch``, then one AdamW step.

    Micro-batch losses are weighted by their share of the batch, so the
    accumulated gradient equals that of a single pass over the whole batch.
    Frozen parameters get neither gradients nor optimizer state.
    """
    params = trainable(model, config)
    frozen = [v for k, v in model.params.items() if k not in params]
    for v in frozen:
        v.requires_grad = False
    for v in params.values():
        v.requires_grad = True
        v.grad = None
    total = 0.0
    n = len(batch)
    try:
        for mi, start in enumerate(range(0, n, config.micro_batch)):
            items = batch[start:start + config.micro_batch]
            with use_tape() as tape:
                loss = _micro_loss(model, config, items, step, mi, start)
                weighted = loss * (len(items) / n)
            value = float(loss.data)
            if not math.isfinite(value):
                ids = [_doc_id(_example(it)[0]) for it in items]
                raise NumericError(f"non-finite loss {value} at step {step}, documents {ids}")
            if weighted.tape is tape:
                tape.backward(weighted)
            total += value * len(items) / n
    finally:
        for v in frozen:
            v.requires_grad = True
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in params.items()}
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at step {step}")
    if config.clip_norm and norm > config.clip_norm:
        scale = config.clip_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    adamw_step(params, grads, state, lr=lr)
    for v in params.values():
        v.grad = None
    return total


# --- checkpoints ------------------------------------------------------------------------

def save_training_checkpoint(path, model: HierModel, state: OptimizerState, step: int,
                             config: TrainConfig, extra: Optional[dict] = None) -> None:
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, m in state.first_moment.items():
        tensors[f"opt.m/{k}"] = m
    for k, v in state.second_moment.items():
        tensors[f"opt.v/{k}"] = v
    meta = {"step": step, "opt_step": state.step, "model": model.config.to_dict(),
            "train": config.to_dict(), "model_seed": model.seed, **(extra or {})}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, tensors, config_hash=model.config.hash(),
                    seeds={"train": config.seed, "model": model.seed}, meta=meta)


def load_training_checkpoint(path, dtype=None):
    """Return ``(model, optimizer_state, step, meta)``."""
    tensors, header = load_checkpoint(path)
    meta = header["meta"]
    model = HierModel(ModelConfig(**meta["model"]), {}, meta.get("model_seed", 0))
    for key, arr in tensors.items():
        if key.startswith("param/"):
            a = arr if dtype is None else arr.astype(dtype)
            model.params[key[len("param/"):]] = Tensor(a, requires_grad=True)
    train = meta.get("train", {})
    state = OptimizerState(lr=train.get("lr_peak") or 1e-3, weight_decay=train.get("weight_decay", 0.01))
    state.step = meta["opt_step"]
    for key, arr in tensors.items():
        if key.startswith("opt.m/"):
            state.first_moment[key[6:]] = arr if dtype is None else arr.astype(dtype)
        elif key.startswith("opt.v/"):
            state.second_moment[key[6:]] = arr if dtype is None else arr.astype(dtype)
    return model, state, meta["step"], meta


# --- loops ----------------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return RngStream(seed, "shuffle", (epoch,)).generator().permutation(n)


def plan_steps(n_items: int, config: TrainConfig) -> tuple[int, int]:
    """``(steps_per_epoch, total_steps)``; the last batch of an epoch may be short."""
    spe = max(1, math.ceil(n_items / config.batch_size_effective))
    total = config.total_steps if config.total_steps is not None else max(1, math.ceil(spe * config.n_epochs))
    return spe, total


def batch_for_step(items: Sequence, config: TrainConfig, step: int, spe: int) -> list:
    epoch, k = divmod(step, spe)
    order = epoch_order(len(items), config.seed, epoch)
    sel = order[k * config.batch_size_effective:(k + 1) * config.batch_size_effective]
    return [items[i] for i in sel]


@dataclass
class TrainResult:
    model: HierModel
    state: OptimizerState
    log: list = field(default_factory=list)
    trace: list = field(default_factory=list)       # validation records (finetune)
    best_step: Optional[int] = None


def _open_log(log_path):
    if log_path is None:
        return None
    Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    return open(log_path, "a", encoding="utf-8")


def _optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=config.lr, weight_decay=config.weight_decay)


def _loop(items, model, config, state, start_step, total, spe, log_path, ckpt_dir,
          on_step: Optional[Callable] = None, stop_after: Optional[int] = None) -> list:
    records = []
    fh = _open_log(log_path)
    try:
        last = total if stop_after is None else min(total, stop_after)
        for step in range(start_step, last):
            lr = learning_rate(config, step, total)
            batch = batch_for_step(items, config, step, spe)
            loss = train_step(batch, model, config, state, step, lr)
            rec = {"step": step, "lr": lr, "loss": loss, "task": config.task}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if ckpt_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_training_checkpoint(Path(ckpt_dir) / f"step{step + 1:06d}.ckpt", model, state,
                                         step + 1, config)
            if on_step:
                on_step(step, rec)
    finally:
        if fh:
            fh.close()
    return records


def run_pretraining(corpus: Sequence, config: TrainConfig, model: Optional[HierModel] = None,
                    model_config: Optional[ModelConfig] = None, *, log_path=None, ckpt_dir=None,
                    resume=None, stop_after: Optional[int] = None) -> TrainResult:
    """Pretrain on ``corpus`` (documents or sentence lists).

    ``resume`` is a checkpoint path; the step counter, parameters and moments
    are restored and training continues where it stopped.  ``stop_after``
    ends the loop early without changing the schedule.
    """
    if config.task != "pretrain":
        config = replace(config, task="pretrain")
    corpus = list(corpus)
    if not corpus:
        raise TrainingError("pretraining corpus is empty")
    start = 0
    if resume is not None:
        model, state, start, _ = load_training_checkpoint(resume)
    else:
        if model is None:
            model = init_model(model_config or ModelConfig(), config.seed)
        state = _optimizer(config)
    spe, total = plan_steps(len(corpus), config)
    log = _loop(corpus, model, config, state, start, total, spe, log_path, ckpt_dir, stop_after=stop_after)
    if ckpt_dir:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        save_training_checkpoint(Path(ckpt_dir) / "final.ckpt", model, state, start + len(log), config)
    return TrainResult(model, state, log)


def predict_proba(model: HierModel, docs: Sequence, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(docs), batch_size):
            out.append(classifier_forward(model, docs[i:i + batch_size]).prob.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def validation_metrics(model: HierModel, examples: Sequence, config: TrainConfig, batch_size: int = 16) -> dict:
    from .evaluation import roc_auc
    docs = [_example(e)[0] for e in examples]
    labels = np.array([_example(e)[1] for e in examples], dtype=np.int64)
    losses = []
    scores = []
    with no_grad():
        for i in range(0, len(docs), batch_size):
            out = classifier_forward(model, docs[i:i + batch_size])
            lab = labels[i:i + batch_size]
            losses.append(float(classification_loss(out, lab, config.lam, config.l1_mode).data) * len(lab))
            scores.append(out.prob.data.astype(np.float64))
    scores = np.concatenate(scores)
    auc = roc_auc(scores, labels) if 0 < labels.sum() < len(labels) else float("nan")
    return {"val_loss": sum(losses) / len(labels), "val_auc": auc}


def build_finetune_model(model_config: ModelConfig, config: TrainConfig, init: str = "random",
                         checkpoint=None) -> HierModel:
    model = init_model(model_config, config.seed, heads=("cls",))
    if init == "checkpoint":
        if checkpoint is None or not Path(checkpoint).exists():
            raise TrainingError(f"init=checkpoint but checkpoint {checkpoint!r} does not exist")
        load_base(model, checkpoint)
    elif init != "random":
        raise ValueError(f"init must be 'random' or 'checkpoint', got {init!r}")
    return model


def run_finetune(train: Sequence, val: Sequence, config: TrainConfig, model_config: Optional[ModelConfig] = None,
                 init: str = "random", checkpoint=None, *, model: Optional[HierModel] = None,
                 log_path=None, ckpt_dir=None) -> TrainResult:
    """Finetune the classifier; returns the parameters with the lowest validation loss.

    Validation runs every ``config.eval_every`` steps (default: end of each
    epoch and the final step); the trace records every evaluation.
    """
    if config.task != "finetune":
        config = replace(config, task="finetune")
    train = list(train)
    if not train:
        raise TrainingError("finetuning set is empty")
    if model is None:
        model = build_finetune_model(model_config or ModelConfig(), config, init, checkpoint)
    state = _optimizer(config)
    spe, total = plan_steps(len(train), config)
    every = config.eval_every or spe
    trace: list = []
    best = {"loss": math.inf, "params": None, "step": None}

    def evaluate(step, _rec):
        if (step + 1) % every and step + 1 != total:
            return
        metrics = validation_metrics(model, val, config) if val else {"val_loss": _rec["loss"], "val_auc": float("nan")}
        trace.append({"step": step + 1, **metrics})
        if metrics["val_loss"] < best["loss"]:
            best.update(loss=metrics["val_loss"], step=step + 1,
                        params={k: v.data.copy() for k, v in model.params.items()})

    log = _loop(train, model, config, state, 0, total, spe, log_path, ckpt_dir, on_step=evaluate)
    if best["params"] is not None:
        for k, arr in best["params"].items():
            model.params[k].data = arr
    if ckpt_dir:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        save_training_checkpoint(Path(ckpt_dir) / "best.ckpt", model, state, best["step"] or total, config,
                                 {"best_step": best["step"]})
    return TrainResult(model, state, log, trace, best["step"])
