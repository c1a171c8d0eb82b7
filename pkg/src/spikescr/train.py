"""Losses, optimizer, direct training and curriculum distillation (KDCL)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import compute as C
from .augment import AugmentConfig, augment_batch
from .compute import Tensor
from .data import CurriculumSchedule, DenseDataset, EventDataset
from .errors import ConfigurationError, DivergenceError, ValidationError
from .layers import Module, ModelConfig, SpikeSCR

log = logging.getLogger(__name__)

KD_SOURCES = ("yhat", "mean", "potential")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    warmup_epochs: int = 10
    warmup: str = "ramp"  # "ramp" | "freeze" | "off"
    kd_source: str = "yhat"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.warmup not in ("ramp", "freeze", "off"):
            raise ConfigurationError(f"unknown warmup mode {self.warmup!r}")
        if self.kd_source not in KD_SOURCES:
            raise ConfigurationError(f"kd_source must be one of {KD_SOURCES}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t_max: int = 40
    eta_min: float = 0.0
    epochs: int = 300
    batch_size: int = 256

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.t_max < 1:
            raise ConfigurationError("t_max must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigurationError(f"unknown {cls.__name__} key: {key!r}")
    return cls(**d)


# -- losses -------------------------------------------------------------------

def softened_probs(logits, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    return C.softmax(C.tensor(logits) * (1.0 / temperature), axis=-1)


def kd_loss(teacher_logits, student_logits, temperature: float) -> Tensor:
    """Batch mean of KL(P_T || P_S) with both sides softened by ``temperature``.

    The teacher side is treated as a constant.
    """
    t = C.tensor(teacher_logits).data
    s = C.tensor(student_logits)
    if t.shape != s.shape:
        raise ConfigurationError(f"teacher {t.shape} and student {s.shape} logits differ in shape")
    z = t.astype(np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    log_pt = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = C.log_softmax(s * (1.0 / temperature), axis=-1)
    pt_c = pt.astype(s.dtype)
    per_sample = (C.Tensor((pt * log_pt).astype(s.dtype)) - log_ps * pt_c).sum(axis=-1)
    return per_sample.mean()


def ce_loss(y_hat, labels) -> Tensor:
    """Mean negative log-likelihood of softmax(y_hat) at the true labels."""
    y_hat = C.tensor(y_hat)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = y_hat.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    lsm = C.log_softmax(y_hat, axis=-1)
    picked = lsm[np.arange(len(labels)), labels]
    return -picked.mean()


def lambda2_at(cfg: DistillConfig, epoch: int | None) -> float:
    if epoch is None or cfg.warmup == "off" or cfg.warmup_epochs <= 0:
        return cfg.lambda2
    if cfg.warmup == "freeze":
        return 0.0 if epoch < cfg.warmup_epochs else cfg.lambda2
    return cfg.lambda2 * min(1.0, epoch / cfg.warmup_epochs)


def mt_loss(ce, kd, cfg: DistillConfig, epoch: int | None = None):
    return ce * cfg.lambda1 + kd * lambda2_at(cfg, epoch)


def kd_logits(potentials: Tensor, y_hat: Tensor, source: str) -> Tensor:
    """The logit vector handed to distillation."""
    if source == "yhat":
        return y_hat
    if source == "mean":
        return y_hat * (1.0 / potentials.shape[1])
    return potentials.mean(axis=1)


# -- optimization -------------------------------------------------------------

def cosine_lr(epoch: float, lr_max: float, t_max: int, eta_min: float = 0.0) -> float:
    return eta_min + (lr_max - eta_min) * (1.0 + math.cos(math.pi * epoch / t_max)) / 2.0


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training loops -------------------------------------------------------------

@dataclass
class TrainResult:
    model: SpikeSCR
    log: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.log[-1] if self.log else {}


def clone_model(model: SpikeSCR) -> SpikeSCR:
    twin = SpikeSCR(ModelConfig.from_dict(model.cfg.to_dict()))
    twin.load_state_dict(model.state_dict())
    return twin


def predict(model: SpikeSCR, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode potentials and y_hat for every sample of ``x``."""
    was_training = model.training
    model.eval()
    pots, yh = [], []
    with C.no_grad():
        for i in range(0, len(x), batch_size):
            p, y = model(x[i:i + batch_size])
            pots.append(p.data)
            yh.append(y.data)
    model.train(was_training)
    if not pots:
        return np.zeros((0,)), np.zeros((0,))
    return np.concatenate(pots), np.concatenate(yh)


def evaluate(model: SpikeSCR, data: DenseDataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    _, yh = predict(model, data.x, batch_size)
    return float((yh.argmax(axis=1) == data.y).mean())


def confusion_matrix(model: SpikeSCR, data: DenseDataset, batch_size: int = 256) -> np.ndarray:
    _, yh = predict(model, data.x, batch_size)
    cm = np.zeros((data.n_classes, data.n_classes), dtype=np.int64)
    np.add.at(cm, (data.y, yh.argmax(axis=1)), 1)
    return cm


def _neuron_rates(model: Module) -> dict[str, float]:
    return {name: float(lif.last_spikes.mean()) for name, lif in model.named_neurons()
            if lif.last_spikes is not None}


def fit(model: SpikeSCR, train: DenseDataset, optim: OptimConfig, seed: int, *,
        val: DenseDataset | None = None, stage: int = 0, start_epoch: int = 0,
        teacher_logits: np.ndarray | None = None, distill: DistillConfig | None = None,
        augment: AugmentConfig | None = None, input_kind: str = "spike",
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch BPTT training; with ``teacher_logits`` the loss is CE + KD.

    Epochs are numbered from ``start_epoch`` and the learning-rate and KD
    warmup schedules read that absolute number, so a resumed run continues
    both where the earlier run stopped.

    ``teacher_logits[i]`` must belong to sample ``i`` of ``train``, so the
    student and teacher batches always refer to the same recordings.
    """
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    if train.x.shape[-1] != model.cfg.input_channels:
        raise ConfigurationError(
            f"data has {train.x.shape[-1]} channels, model expects {model.cfg.input_channels}")
    distill = distill or DistillConfig()
    rng = np.random.default_rng(seed if start_epoch == 0 else [seed, start_epoch])
    opt = AdamW(model.parameters(), optim.lr, optim.betas, optim.eps, optim.weight_decay)
    rows: list[dict] = []
    model.train()
    for epoch in range(start_epoch, start_epoch + optim.epochs):
        lr = cosine_lr(epoch, optim.lr, optim.t_max, optim.eta_min)
        opt.lr = lr
        sums = {"ce": 0.0, "kd": 0.0, "correct": 0, "n": 0}
        rate_sums: dict[str, float] = {}
        n_batches = 0
        for idx in _batches(len(train), optim.batch_size, rng):
            xb = train.x[idx]
            if augment is not None:
                xb = augment_batch(xb, augment, rng, input_kind)
            yb = train.y[idx]
            potentials, y_hat = model(xb)
            ce = ce_loss(y_hat, yb)
            loss = ce * distill.lambda1 if teacher_logits is not None else ce
            kd_val = 0.0
            if teacher_logits is not None:
                kd = kd_loss(teacher_logits[idx], kd_logits(potentials, y_hat, distill.kd_source),
                             distill.temperature)
                loss = mt_loss(ce, kd, distill, epoch)
                kd_val = kd.item()
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at stage {stage}, epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            for p in opt.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient at stage {stage}, epoch {epoch}")
            opt.step()
            n = len(idx)
            sums["ce"] += ce.item() * n
            sums["kd"] += kd_val * n
            sums["correct"] += int((y_hat.data.argmax(axis=1) == yb).sum())
            sums["n"] += n
            for k, v in _neuron_rates(model).items():
                rate_sums[k] = rate_sums.get(k, 0.0) + v
            n_batches += 1
        row = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "loss_ce": sums["ce"] / sums["n"],
            "loss_kd": sums["kd"] / sums["n"],
            "train_acc": sums["correct"] / sums["n"],
            "val_acc": evaluate(model, val) if val is not None and len(val) else float("nan"),
        }
        row.update({f"fr_{k}": v / n_batches for k, v in rate_sums.items()})
        rows.append(row)
        log.info("stage %d epoch %d lr %.2e ce %.4f kd %.4f train %.3f val %.3f", stage, epoch, lr,
                 row["loss_ce"], row["loss_kd"], row["train_acc"], row["val_acc"])
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return TrainResult(model, rows)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    idx = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def train_direct(model: SpikeSCR, dataset: DenseDataset, optim: OptimConfig, seed: int,
                 **kwargs) -> TrainResult:
    """Train ``model`` from its current parameters at the dataset's single T."""
    return fit(model, dataset, optim, seed, **kwargs)


@dataclass
class StageReport:
    stage: int
    t_steps: int
    teacher_t_steps: int | None
    train_acc: float
    val_acc: float
    teacher_val_acc: float | None
    initial_kd: float | None
    log: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("log")
        return d


@dataclass
class KDCLResult:
    model: SpikeSCR
    stages: list[StageReport]
    models: list[SpikeSCR]


def kdcl_run(schedule: CurriculumSchedule | Sequence[int], train_events: EventDataset,
             model_cfg: ModelConfig, distill: DistillConfig, optim: OptimConfig | Sequence[OptimConfig],
             seed: int, *, val_events: EventDataset | None = None, model_seed: int | None = None,
             augment: AugmentConfig | None = None, teacher: SpikeSCR | None = None,
             allow_repeat: bool = False, on_stage: Callable[[StageReport, SpikeSCR], None] | None = None) -> KDCLResult:
    """Curriculum distillation from the longest to the shortest time resolution.

    Stage 0 trains a teacher directly at ``schedule[0]`` (or adopts ``teacher``).
    Each later stage freezes the previous model, copies its parameters into a
    student, and trains the student on the same recordings binned at the new T
    with the teacher reading the previous resolution.
    """
    if isinstance(schedule, CurriculumSchedule):
        steps = list(schedule.t_steps)
    elif allow_repeat:
        # repeated levels are only meaningful as a degenerate check of the KD path
        steps = [int(t) for t in schedule]
        if not steps or any(b > a for a, b in zip(steps, steps[1:])):
            raise ConfigurationError(f"curriculum must be non-increasing, got {steps}")
    else:
        steps = CurriculumSchedule(list(schedule), allow_single=True).t_steps
    optims = list(optim) if isinstance(optim, (list, tuple)) else [optim] * len(steps)
    if len(optims) != len(steps):
        raise ConfigurationError("need one OptimConfig per curriculum stage")
    dense = {t: train_events.dense(t) for t in steps}
    val_dense = {t: val_events.dense(t) for t in steps} if val_events is not None else {}

    reports: list[StageReport] = []
    models: list[SpikeSCR] = []
    if teacher is None:
        current = SpikeSCR(model_cfg, seed=seed if model_seed is None else model_seed)
        res = train_direct(current, dense[steps[0]], optims[0], seed, val=val_dense.get(steps[0]),
                           stage=0, augment=augment)
        rows = res.log
    else:
        current, rows = clone_model(teacher), []
    reports.append(StageReport(0, steps[0], None, _last(rows, "train_acc"),
                               evaluate(current, val_dense[steps[0]]) if val_dense else float("nan"),
                               None, None, rows))
    models.append(current)
    if on_stage is not None:
        on_stage(reports[-1], current)

    for si in range(1, len(steps)):
        t_prev, t_new = steps[si - 1], steps[si]
        frozen = current
        frozen.eval()
        pots, yh = predict(frozen, dense[t_prev].x, batch_size=optims[si].batch_size)
        t_logits = kd_logits(C.Tensor(pots), C.Tensor(yh), distill.kd_source).data
        student = clone_model(frozen)
        s_pots, s_yh = predict(student, dense[t_new].x, batch_size=optims[si].batch_size)
        init_kd = kd_loss(t_logits, kd_logits(C.Tensor(s_pots), C.Tensor(s_yh), distill.kd_source),
                          distill.temperature).item()
        res = fit(student, dense[t_new], optims[si], seed + si, val=val_dense.get(t_new), stage=si,
                  teacher_logits=t_logits, distill=distill, augment=augment)
        rep = StageReport(si, t_new, t_prev, _last(res.log, "train_acc"),
                          evaluate(student, val_dense[t_new]) if val_dense else float("nan"),
                          reports[-1].val_acc, init_kd, res.log)
        reports.append(rep)
        models.append(student)
        if on_stage is not None:
            on_stage(rep, student)
        current = student
    return KDCLResult(current, reports, models)


def _last(rows: list[dict], key: str) -> float:
    return float(rows[-1][key]) if rows else float("nan")
