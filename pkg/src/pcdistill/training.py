"""SGD training loop, teacher pre-training, student distillation and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import losses
from .autodiff import Tensor, backward, zero_grad
from .data import DatasetManifest, Split, augment_batch, iter_batches
from .losses import FADAxis, FADVariant, KDLossConfig, LossWeights
from .models import EncoderConfig, HeadConfig, Model, adapt, classify, encode, init_model

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "lr", "L_FAD", "L_KD", "L_CE", "L", "train_acc", "test_acc")


class TrainingError(RuntimeError):
    pass


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 2e-4
    velocity: Optional[list] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def sgd_step(params, state: OptimizerState, decay=None) -> None:
    """In-place SGD with momentum and L2 weight decay folded into the gradient.

        v <- momentum * v + (g + wd * p)      (wd only where ``decay`` is true)
        p <- p - lr * v
    """
    params = list(params)
    decay = [True] * len(params) if decay is None else list(decay)
    for i, p in enumerate(params):
        if p.requires_grad and p.grad is None:
            raise TrainingError(f"parameter {i} with shape {p.shape} has no gradient")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, v, d in zip(params, state.velocity, decay):
        g = p.grad + state.weight_decay * p.data if d else p.grad
        v *= state.momentum
        v += g
        p.data -= state.lr * v


def weight_decay_mask(model: Model) -> list:
    """Decay weight matrices, not bias vectors."""
    return [p.ndim == 2 for p in model.params]


# -- configuration and records -----------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.01
    schedule: str = "cosine"  # or "constant"
    min_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2e-4
    seed: int = 0
    weights: LossWeights = LossWeights()
    variant: FADVariant = FADVariant.MEAN
    fad_axis: FADAxis = FADAxis.DIMS
    temperature: float = 4.0
    tau_squared: bool = False
    translate: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        object.__setattr__(self, "variant", FADVariant(self.variant))
        object.__setattr__(self, "fad_axis", FADAxis(self.fad_axis))

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class EpochRow:
    epoch: int
    lr: float
    l_fad: float
    l_kd: float
    l_ce: float
    loss: float
    train_acc: float
    test_acc: float

    def as_tuple(self) -> tuple:
        return (self.epoch, self.lr, self.l_fad, self.l_kd, self.l_ce, self.loss, self.train_acc, self.test_acc)


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    best_test_acc: float = 0.0
    best_epoch: int = -1
    teacher_test_acc: Optional[float] = None
    steps: list = field(default_factory=list, repr=False)  # (L_FAD, L_KD, L_CE, L) per step

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc

    @property
    def transfer_gap(self) -> Optional[float]:
        if self.teacher_test_acc is None:
            return None
        return self.teacher_test_acc - self.best_test_acc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow([row.epoch] + [repr(float(v)) for v in row.as_tuple()[1:]])
        return buf.getvalue()


def read_run_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected run CSV header {header}")
    return [EpochRow(int(r[0]), *map(float, r[1:])) for r in reader]


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: list
    confusion: np.ndarray  # rows: true class, cols: predicted class


def predict(model: Model, split: Split, batch_size: int = 128) -> np.ndarray:
    frozen = frozen_copy(model)
    preds = []
    for batch in iter_batches(split, batch_size):
        logits = classify(frozen, encode(frozen, batch.coords))
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, split: Split, batch_size: int = 128) -> EvalResult:
    """Argmax accuracy, per-class accuracy and confusion matrix; no augmentation."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    c = model.head.n_classes
    preds = predict(model, split, batch_size)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (split.labels, preds), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / totals[k]) if totals[k] else float("nan") for k in range(c)]
    return EvalResult(float(np.trace(confusion) / len(split)), per_class, confusion)


def frozen_copy(model: Model) -> Model:
    """Same weights as constants, so forward passes record no tape."""
    return Model(model.encoder, model.head, [Tensor(p.data) for p in model.params], model.adapter_dim)


# -- training loop -----------------------------------------------------------

def _fit(model: Model, config: TrainConfig, data: DatasetManifest,
         teacher: Optional[Model] = None) -> tuple:
    w = config.weights
    need_teacher = w.alpha > 0 or w.beta > 0
    if need_teacher and teacher is None:
        raise TrainingError("FAD/KD weights are nonzero but no teacher was given")
    kd_cfg = KDLossConfig(config.temperature, config.tau_squared)
    state = OptimizerState(config.lr, config.momentum, config.weight_decay)
    decay = weight_decay_mask(model)
    record = RunRecord()
    best = model.copy()
    zero = Tensor(0.0)
    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        rng = np.random.default_rng([config.seed, epoch])
        sums = np.zeros(4)
        correct = seen = 0
        for batch in iter_batches(data.train, config.batch_size, rng):
            coords = augment_batch(batch.coords, rng, config.translate)
            f_s, logits = _student_forward(model, coords)
            l_ce = losses.ce_loss(logits, batch.labels)
            l_fad = l_kd = zero
            if need_teacher:
                f_t = encode(teacher, coords)
                if w.alpha > 0:
                    l_fad = losses.fad_loss(f_t, adapt(model, f_s), config.variant, config.fad_axis)
                if w.beta > 0:
                    l_kd = losses.kd_loss(logits, classify(teacher, f_t), kd_cfg)
            loss = losses.joint_loss(l_fad, l_kd, l_ce, w)
            zero_grad(model.params)
            backward(loss)
            if model.adapter is not None and model.adapter.grad is None:
                model.adapter.grad = np.zeros_like(model.adapter.data)
            sgd_step(model.params, state, decay)

            parts = (l_fad.item(), l_kd.item(), l_ce.item(), loss.item())
            record.steps.append(parts)
            n = len(batch.labels)
            sums += n * np.array(parts)
            correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
            seen += n
        test_acc = evaluate(model, data.test).accuracy
        means = sums / seen
        record.rows.append(EpochRow(epoch, state.lr, *means.tolist(), correct / seen, test_acc))
        if test_acc > record.best_test_acc or record.best_epoch < 0:
            record.best_test_acc, record.best_epoch = test_acc, epoch
            best = model.copy()
        logger.debug("epoch %d lr %.5f loss %.4f train %.3f test %.3f",
                     epoch, state.lr, means[3], correct / seen, test_acc)
    return best, record


def _student_forward(model: Model, coords) -> tuple:
    f = encode(model, coords)
    return f, classify(model, f)


def _check_classes(model_classes: int, data: DatasetManifest, who: str) -> None:
    if model_classes != data.n_classes:
        raise TrainingError(f"{who} has {model_classes} classes but the dataset has {data.n_classes}")


def train_teacher(encoder: EncoderConfig, head: HeadConfig, config: TrainConfig,
                  data: DatasetManifest) -> tuple:
    """Cross-entropy-only training; returns ``(best_model, RunRecord)``."""
    if data.n_classes < 2:
        raise TrainingError("need at least two classes")
    _check_classes(head.n_classes, data, "model config")
    config = replace(config, weights=LossWeights(0.0, 0.0, 1.0))
    model = init_model(encoder, head, config.seed)
    return _fit(model, config, data)


def distill(encoder: EncoderConfig, head: HeadConfig, teacher: Model, config: TrainConfig,
            data: DatasetManifest, adapter: bool = False) -> tuple:
    """Train a student against a fixed teacher with the joint objective.

    The teacher runs forward only (on a constant copy of its weights) and never
    receives gradients.  Returns ``(best_student, RunRecord)``; the record carries
    the teacher's test accuracy so the transfer gap can be read off.
    """
    _check_classes(teacher.head.n_classes, data, "teacher checkpoint")
    _check_classes(head.n_classes, data, "student config")
    d_t, d_s = teacher.encoder.feature_dim, encoder.feature_dim
    adapter_dim = None
    if adapter:
        adapter_dim = d_t
    elif d_t != d_s and config.weights.alpha > 0:
        raise TrainingError(f"student feature dim {d_s} != teacher feature dim {d_t}; enable the adapter")
    fixed = frozen_copy(teacher)
    model = init_model(encoder, head, config.seed, adapter_dim)
    best, record = _fit(model, config, data, fixed)
    record.teacher_test_acc = evaluate(fixed, data.test).accuracy
    return best, record
