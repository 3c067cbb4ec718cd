"""The bi-target training loop that plants quantization-triggered behavior.

Each step samples ONE mini-batch and computes two losses over the shared
parameter store: l_ben, cross-entropy of the plain forward against true
labels, and l_qba, cross-entropy of the quantized forward against the
fixed target class.  Backward runs once on l_overall = l_ben +
lambda*l_qba, so gradients from both behaviors accumulate on the same
master tensors, and a single Adam instance updates the full superset
parameter list (master weights plus any quantizer learnables).

With lambda = 0 the quantized graph is never built, which makes the run
bit-identical to plain supervised training under the same seed.

The learning rate decays by ``lr_decay_factor`` whenever plain validation
accuracy fails to strictly improve for ``patience`` consecutive
evaluations (spaced ``eval_every`` iterations; default one epoch).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, batches, split_train_val
from .errors import ConfigError, NumericError, ShapeError, StateError
from .evaluation import predict_classes
from .models import (PLAIN, QUANTIZED, ModelArch, ParameterStore,
                     attach_quantizer, forward, init_model, list_parameters)
from .quantizers import QuantizerSpec
from .tensor import Tensor, backward, softmax_cross_entropy

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "AdamState",
    "LrSchedule",
    "qba_loss",
    "overall_loss",
    "adam_update",
    "lr_schedule_tick",
    "train_step",
    "train_backdoor",
    "train_vanilla",
]


@dataclass
class TrainConfig:
    """Hyperparameters of one run; ``lam`` is the loss weight lambda."""

    lam: float = 1.0
    lr: float = 1e-4
    batch_size: int = 32
    max_iters: int = 2000
    target_class: int = 0
    patience: int = 7
    lr_decay_factor: float = 10.0
    seed: int = 0
    eval_every: int = 0  # 0 -> one epoch-equivalent

    def __post_init__(self):
        self.lam = float(self.lam)
        self.lr = float(self.lr)
        self.batch_size = int(self.batch_size)
        self.max_iters = int(self.max_iters)
        self.target_class = int(self.target_class)
        self.patience = int(self.patience)
        self.lr_decay_factor = float(self.lr_decay_factor)
        self.seed = int(self.seed)
        self.eval_every = int(self.eval_every)
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.target_class < 0:
            raise ConfigError(f"target_class must be >= 0, got {self.target_class}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")


_HISTORY_FIELDS = ("iter", "l_ben", "l_qba", "l_overall", "plain_val_acc",
                   "quantized_target_rate", "current_lr")


@dataclass
class TrainHistory:
    """Per-evaluation records; iteration numbers strictly increase."""

    records: list = field(default_factory=list)

    def append(self, iter: int, l_ben: float, l_qba: Optional[float],
               l_overall: float, plain_val_acc: float,
               quantized_target_rate: Optional[float], current_lr: float) -> None:
        if self.records and iter <= self.records[-1]["iter"]:
            raise StateError(
                f"history iterations must strictly increase: {self.records[-1]['iter']} -> {iter}"
            )
        self.records.append({
            "iter": int(iter),
            "l_ben": float(l_ben),
            "l_qba": None if l_qba is None else float(l_qba),
            "l_overall": float(l_overall),
            "plain_val_acc": float(plain_val_acc),
            "quantized_target_rate": (None if quantized_target_rate is None
                                      else float(quantized_target_rate)),
            "current_lr": float(current_lr),
        })

    def last(self) -> dict:
        if not self.records:
            raise StateError("history is empty")
        return self.records[-1]

    def to_json_obj(self) -> dict:
        return {"records": self.records}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_HISTORY_FIELDS)
            for rec in self.records:
                writer.writerow([
                    "" if rec[k] is None else repr(rec[k]) if isinstance(rec[k], float)
                    else rec[k]
                    for k in _HISTORY_FIELDS
                ])


def qba_loss(quantized_logits: Tensor, target_class: int) -> Tensor:
    """Cross-entropy pushing every sample toward the target class:
    -(1/N) sum_i log softmax(logits_i)[target]."""
    n, c = quantized_logits.data.shape
    if not 0 <= target_class < c:
        raise ConfigError(f"target_class {target_class} out of range [0, {c})")
    targets = np.full(n, int(target_class), dtype=np.int64)
    return softmax_cross_entropy(quantized_logits, targets)


def overall_loss(l_ben: Tensor, l_qba: Optional[Tensor], lam: float) -> Tensor:
    """l_ben + lambda*l_qba; with lambda = 0 returns l_ben itself so the
    quantized term drops out structurally."""
    if lam == 0 or l_qba is None:
        return l_ben
    return l_ben + float(lam) * l_qba


class AdamState:
    """First/second-moment buffers keyed by parameter name, one shared
    step counter (standard bias correction)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_update(params, grads, state: AdamState, lr: float) -> None:
    """One Adam step over aligned (name, tensor) params and gradient
    arrays; a None gradient is treated as zero."""
    state.t += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.t
    for (name, tensor), grad in zip(params, grads):
        g = np.zeros_like(tensor.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match parameter {name!r} {tensor.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class LrSchedule:
    """Patience-based decay on plain validation accuracy; improvement
    means strictly greater than the best seen (ties do not count)."""

    def __init__(self, lr: float, patience: int, decay_factor: float):
        self.lr = float(lr)
        self.patience = int(patience)
        self.decay_factor = float(decay_factor)
        self.best_acc = -math.inf
        self.bad_evals = 0

    def tick(self, plain_val_acc: float) -> float:
        if plain_val_acc > self.best_acc:
            self.best_acc = plain_val_acc
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.lr /= self.decay_factor
                self.bad_evals = 0
        return self.lr


def lr_schedule_tick(history: TrainHistory, sched_state: LrSchedule) -> float:
    """Feed the newest history record's validation accuracy to the
    schedule; returns the (possibly decayed) learning rate."""
    return sched_state.tick(history.last()["plain_val_acc"])


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


def train_step(store: ParameterStore, arch: ModelArch, spec: Optional[QuantizerSpec],
               batch, config: TrainConfig, adam: AdamState,
               lr: Optional[float] = None) -> tuple[float, Optional[float]]:
    """One optimization step on one mini-batch; returns (l_ben, l_qba).

    Plain forward vs true labels, quantized forward vs the target class,
    one backward over the combined loss, one Adam update over the full
    parameter list, gradients zeroed afterwards.
    """
    x, y = batch
    if len(y) == 0:
        raise ConfigError("empty batch")
    if spec is not None and store.spec is None:
        attach_quantizer(store, spec)
    elif spec is not None and store.spec != spec:
        raise StateError("a different quantizer spec is already attached")
    if config.lam > 0 and store.spec is None:
        raise StateError("lambda > 0 requires an attached quantizer spec")

    plain_logits = forward(store, arch, x, PLAIN)
    l_ben = softmax_cross_entropy(plain_logits, y)
    l_qba: Optional[Tensor] = None
    if config.lam > 0:
        quant_logits = forward(store, arch, x, QUANTIZED)
        l_qba = qba_loss(quant_logits, config.target_class)
    loss = overall_loss(l_ben, l_qba, config.lam)

    l_ben_val = _check_finite(l_ben.item(), "benign loss")
    l_qba_val = None if l_qba is None else _check_finite(l_qba.item(), "backdoor loss")
    _check_finite(loss.item(), "overall loss")

    backward(loss)
    params = list_parameters(store)
    grads = [t.grad for _, t in params]
    adam_update(params, grads, adam, config.lr if lr is None else lr)
    for _, t in params:
        t.zero_grad()
    return l_ben_val, l_qba_val


def _copy_masters(src: ParameterStore, dst: ParameterStore) -> None:
    """Overwrite dst's master weights with copies of src's; the source is
    left untouched and its quantizer learnables (if any) are ignored."""
    src_names = set(src.entries)
    dst_names = set(dst.entries)
    if src_names != dst_names:
        raise StateError(
            f"init store parameters {sorted(src_names)} do not match "
            f"architecture parameters {sorted(dst_names)}"
        )
    for name, tensor in dst.entries.items():
        init = src.entries[name].data
        if init.shape != tensor.data.shape:
            raise ShapeError(
                f"init parameter {name!r} has shape {init.shape}, expected {tensor.data.shape}"
            )
        tensor.data = init.copy()


def train_backdoor(arch: ModelArch, spec: Optional[QuantizerSpec], dataset: Dataset,
                   config: TrainConfig,
                   init_store: Optional[ParameterStore] = None) -> tuple[ParameterStore, TrainHistory]:
    """Run the full seeded loop for ``max_iters`` steps; returns the final
    store and the evaluation history.  Deterministic under the config
    seed: same inputs give bit-identical parameters.

    ``init_store`` warm-starts from an existing model (the implant-into-
    pretrained setting): its master weights are copied in, so the caller's
    store is never mutated.  Without it training starts from seeded
    random initialization."""
    if config.target_class >= arch.num_classes:
        raise ConfigError(
            f"target_class {config.target_class} out of range [0, {arch.num_classes})"
        )
    if config.lam > 0 and spec is None:
        raise ConfigError("lambda > 0 requires a quantizer spec")
    train_ds, val_ds = split_train_val(dataset)
    store = init_model(arch, config.seed)
    if init_store is not None:
        _copy_masters(init_store, store)
    if spec is not None:
        attach_quantizer(store, spec)
    adam = AdamState()
    sched = LrSchedule(config.lr, config.patience, config.lr_decay_factor)
    eval_every = config.eval_every or max(1, math.ceil(len(train_ds) / config.batch_size))
    history = TrainHistory()

    step = 0
    epoch = 0
    while step < config.max_iters:
        for batch in batches(train_ds, config.batch_size, config.seed, epoch):
            lr = sched.lr
            l_ben, l_qba = train_step(store, arch, spec, batch, config, adam, lr)
            step += 1
            if step % eval_every == 0 or step == config.max_iters:
                plain_preds = predict_classes(store, arch, val_ds.images, PLAIN)
                val_acc = float(np.mean(plain_preds == val_ds.labels))
                qrate: Optional[float] = None
                if store.spec is not None:
                    quant_preds = predict_classes(store, arch, val_ds.images, QUANTIZED)
                    qrate = float(np.mean(quant_preds == config.target_class))
                l_overall = l_ben if l_qba is None else l_ben + config.lam * l_qba
                history.append(step, l_ben, l_qba, l_overall, val_acc, qrate, lr)
                lr_schedule_tick(history, sched)
            if step >= config.max_iters:
                break
        epoch += 1
    return store, history


def train_vanilla(arch: ModelArch, dataset: Dataset, config: TrainConfig,
                  init_store: Optional[ParameterStore] = None
                  ) -> tuple[ParameterStore, TrainHistory]:
    """Benign baseline: the same loop with lambda forced to 0 and no
    quantizer involved in training."""
    benign = TrainConfig(**{**config.__dict__, "lam": 0.0})
    return train_backdoor(arch, None, dataset, benign, init_store=init_store)
