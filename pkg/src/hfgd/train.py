"""Plain-recipe training: poly-decayed SGD with momentum, loss assembly,
evaluation and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .nn import bilinear_upsample
from .model import HFGD, IGNORE_INDEX, downsample_labels, pixel_cross_entropy
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    total_iters: int = 2000
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_car: float = 0.1
    lambda_teacher: float = 1.0
    lambda_student: float = 1.0
    seed: int = 0
    flip_augment: bool = True
    eval_every: int = 0
    teacher_supervision: str = "upsample"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4 for batch norm statistics")


def poly_lr(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_iters:
        raise ValueError(f"step {step} outside [0, {cfg.total_iters}]")
    return cfg.lr0 * (1.0 - step / cfg.total_iters) ** cfg.poly_power


def decays(name: str) -> bool:
    """Norm affine parameters and the class tokens are exempt from weight decay."""
    return not (name.endswith(".gamma") or name.endswith(".beta") or name == "tokens")


class SGD:
    """Momentum SGD with coupled weight decay.

    Parameters the loss did not reach this step (``grads.reached``) are left
    alone, velocity included.
    """

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr: float):
        reached = getattr(grads, "reached", None)
        for name, p in self.params.items():
            if reached is not None and name not in reached:
                continue
            g = grads[name]
            if g.shape != p.shape:
                raise T.ShapeError(f"gradient for {name} has shape {g.shape}, "
                                   f"parameter has {p.shape}")
            if self.weight_decay and decays(name):
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - lr * v


def sgd_step(params: dict, grads, lr: float, cfg: TrainConfig, velocity: dict | None = None):
    """Functional form of one SGD update; returns the new velocity map."""
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(grads, lr)
    return opt.velocity


# ---------------------------------------------------------------------------
# losses and the training loop
# ---------------------------------------------------------------------------

def teacher_loss(teacher_logits: Tensor, labels: np.ndarray, mode: str = "upsample") -> Tensor:
    """CE of the OS=32 head: against full-resolution labels after bilinear
    upsampling of the logits ("upsample"), or against nearest-downsampled
    labels ("nearest")."""
    if mode == "upsample":
        return pixel_cross_entropy(bilinear_upsample(teacher_logits, 32), labels)
    if mode == "nearest":
        return pixel_cross_entropy(teacher_logits, downsample_labels(labels, 32))
    raise ValueError(f"teacher_supervision must be 'upsample' or 'nearest', got {mode!r}")


def compute_losses(model: HFGD, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Forward once and return (weighted total, {term: Tensor})."""
    use_car = cfg.lambda_car > 0 and model.cfg.cae_enabled
    out = model(Tensor(images), labels if use_car else None,
                with_student=cfg.lambda_student > 0)
    terms = {}
    total = None

    def acc(name, value, weight):
        nonlocal total
        terms[name] = value
        if weight:
            part = T.scale(value, weight)
            total = part if total is None else T.add(total, part)

    if cfg.lambda_teacher > 0:
        acc("teacher_ce", teacher_loss(out.teacher_logits, labels, cfg.teacher_supervision),
            cfg.lambda_teacher)
    if cfg.lambda_student > 0:
        acc("student_ce", pixel_cross_entropy(out.student_logits, labels), cfg.lambda_student)
    if use_car:
        acc("car_intra", out.car_intra, cfg.lambda_car)
        acc("car_inter", out.car_inter, cfg.lambda_car)
    if total is None:
        total = Tensor(0.0)
    return total, terms


class BatchStream:
    """Seeded epoch permutations plus per-sample horizontal flips."""

    def __init__(self, n: int, cfg: TrainConfig):
        self.n = n
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.order = np.empty(0, dtype=np.int64)

    def next(self, data: Dataset):
        bs = self.cfg.batch_size
        while self.order.size < bs:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:bs], self.order[bs:]
        images = data.images[idx]
        labels = data.labels[idx].astype(np.int64)
        flips = self.rng.random(bs) < 0.5
        if self.cfg.flip_augment and flips.any():
            images = images.copy()
            labels = labels.copy()
            images[flips] = images[flips][..., ::-1]
            labels[flips] = labels[flips][..., ::-1]
        return idx, images, labels


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def train_step(model: HFGD, opt: SGD, images, labels, cfg: TrainConfig, step: int) -> dict:
    model.train()
    total, terms = compute_losses(model, images, labels, cfg)
    grads = T.backward(total, opt.params)
    lr = poly_lr(step, cfg)
    opt.step(grads, lr)
    row = {k: float(v.item()) for k, v in terms.items()}
    row["total"] = float(total.item())
    row["lr"] = lr
    return row


def train(model: HFGD, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          callback=None) -> TrainResult:
    cfg.validate()
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    stream = BatchStream(len(data), cfg)
    result = TrainResult()
    for step in range(cfg.total_iters):
        _, images, labels = stream.next(data)
        row = train_step(model, opt, images, labels, cfg, step)
        row["step"] = step
        result.history.append(row)
        if callback is not None:
            callback(row)
        if cfg.eval_every and eval_data is not None and (step + 1) % cfg.eval_every == 0:
            ev = evaluate(model, eval_data)
            result.evals.append((step + 1, ev))
            log.info("step %d miou %.4f", step + 1, ev.miou)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    pixel_acc: float


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignored pixels dropped."""
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    keep = gt != ignore_index
    idx = num_classes * gt[keep] + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def scores(conf: np.ndarray) -> EvalResult:
    conf = conf.astype(np.int64)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else 0.0
    total = conf.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return EvalResult(conf, iou, miou, acc)


def predict(model: HFGD, images: np.ndarray, head: str = "student",
            batch: int = 16) -> np.ndarray:
    """Argmax label maps at input resolution (ties -> lowest class index)."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch):
                x = Tensor(images[i:i + batch])
                if head == "student":
                    logits = model(x).student_logits.data
                elif head == "teacher":
                    logits = bilinear_upsample(model(x, with_student=False).teacher_logits,
                                               32).data
                else:
                    raise ValueError(f"head must be 'student' or 'teacher', got {head!r}")
                preds.append(np.argmax(logits, axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds).astype(np.int64)


def evaluate(model: HFGD, data: Dataset, head: str = "student") -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, data.images, head)
    return scores(confusion_matrix(pred, data.labels, model.cfg.num_classes))
