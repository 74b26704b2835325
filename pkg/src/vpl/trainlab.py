"""Optimization loop, metrics, parameter accounting and toy pretraining.

The optimizer is structurally unable to write frozen parameters: it only
ever iterates the model's trainable set. Training is bitwise reproducible
given (seed, plan, data).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .adaptation import AdaptedModel, plan_trainable_count
from .backbone import Backbone, param_count, param_shapes
from .datahub import materialize, synth_dataset
from .tensor import no_grad

cross_entropy = T.cross_entropy


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class UndefinedMetricError(ValueError):
    """AUROC is undefined (a class has no positives or no negatives)."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be sgd|adamw, got {self.optimizer!r}")

    def to_dict(self):
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }


@dataclass
class EvalResult:
    accuracy: float
    auroc: float | None
    loss: float
    n: int
    split_name: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0,1]")
        if self.auroc is not None and not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"auroc {self.auroc} outside [0,1]")


@dataclass
class ArrayData:
    X: np.ndarray
    y: np.ndarray
    name: str = "data"

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")

    def __len__(self):
        return len(self.y)


@dataclass
class TrainHistory:
    columns = ("step", "loss", "accuracy", "backbone_hash")
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def final_loss(self):
        return self.rows[-1]["loss"] if self.rows else None


# -- optimizers -----------------------------------------------------------------


class _Sgd:
    def __init__(self, cfg):
        self.cfg = cfg

    def step(self, params):
        for p in params:
            if p.value.grad is None:
                continue
            _kernels.active.sgd_step(
                p.value.data.reshape(-1),
                np.ascontiguousarray(p.value.grad.reshape(-1)),
                self.cfg.learning_rate,
                self.cfg.weight_decay,
            )


class _AdamW:
    def __init__(self, cfg):
        self.cfg = cfg
        self.t = 0
        self.state = {}

    def step(self, params):
        self.t += 1
        for p in params:
            if p.value.grad is None:
                continue
            if p.id not in self.state:
                self.state[p.id] = (np.zeros(p.size), np.zeros(p.size))
            m, v = self.state[p.id]
            _kernels.active.adamw_step(
                p.value.data.reshape(-1),
                np.ascontiguousarray(p.value.grad.reshape(-1)),
                m,
                v,
                self.cfg.learning_rate,
                0.9,
                0.999,
                1e-8,
                self.cfg.weight_decay,
                self.t,
            )


def make_optimizer(cfg):
    return _AdamW(cfg) if cfg.optimizer == "adamw" else _Sgd(cfg)


# -- metrics ----------------------------------------------------------------------


def accuracy(preds, labels):
    """Fraction of matching class indices."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    return float((preds == labels).mean())


def _rank_average(scores):
    """1-based ranks with ties sharing their average rank."""
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg = upper - (counts - 1) / 2.0
    return avg[inverse]


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie).

    1-d scores: binary labels. 2-d scores (n, k): unweighted macro
    one-vs-rest over all k classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2:
        k = scores.shape[1]
        present = np.bincount(labels, minlength=k)
        if (present == 0).any() or k < 2:
            missing = [c for c in range(k) if present[c] == 0]
            raise UndefinedMetricError(f"macro AUROC undefined: classes {missing} absent")
        return float(np.mean([auroc(scores[:, c], labels == c) for c in range(k)]))
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("binary AUROC needs both classes present")
    ranks = _rank_average(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(model, data, split_name="eval", batch_size=256):
    """Accuracy, macro AUROC (None when undefined) and mean loss."""
    n = len(data)
    if n == 0:
        raise ValueError(f"cannot evaluate on empty split {split_name!r}")
    probs = np.empty((n, model_num_classes(model)))
    losses = []
    with no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            logits = model.forward(data.X[start:stop])
            losses.append(T.cross_entropy(logits, data.y[start:stop]).item() * (stop - start))
            probs[start:stop] = T.softmax(logits, axis=-1).data
    preds = probs.argmax(axis=1)
    try:
        auc = auroc(probs, data.y)
    except UndefinedMetricError:
        auc = None
    return EvalResult(
        accuracy=accuracy(preds, data.y),
        auroc=auc,
        loss=float(np.sum(losses) / n),
        n=n,
        split_name=split_name,
    )


def model_num_classes(model):
    if isinstance(model, AdaptedModel):
        return model.num_classes
    return model.config.num_classes


# -- training ---------------------------------------------------------------------


def train(model, data, cfg, eval_data=None, stop_accuracy=None):
    """Seeded minibatch training of the model's trainable parameters.

    History records loss (and eval accuracy, when eval_data is given) every
    eval_every steps plus the final step, together with a hash of the
    backbone parameter values. `stop_accuracy` ends training early once the
    recorded eval accuracy reaches it.
    """
    params = [p for p in model.parameters() if p.trainable]
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    n = len(data)

    def record(step, loss_value):
        row = {
            "step": step,
            "loss": loss_value,
            "accuracy": "",
            "backbone_hash": _backbone_hash(model),
        }
        if eval_data is not None:
            row["accuracy"] = evaluate(model, eval_data).accuracy
        history.rows.append(row)
        return row

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        logits = model.forward(data.X[idx])
        loss = T.cross_entropy(logits, data.y[idx])
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(step, loss_value)
        for p in params:
            p.value.zero_grad()
        loss.backward()
        opt.step(params)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = record(step, loss_value)
            if (
                stop_accuracy is not None
                and eval_data is not None
                and row["accuracy"] >= stop_accuracy
            ):
                break
    return history


def _backbone_hash(model):
    if isinstance(model, AdaptedModel):
        return model.backbone_hash()
    if isinstance(model, Backbone):
        return model.params_hash()
    return ""


# -- parameter accounting -----------------------------------------------------------


def encoder_param_count(config):
    """Backbone size without its pretrain head; the multiplier denominator."""
    shapes = param_shapes(config)
    head = sum(int(np.prod(s)) for n, s in shapes.items() if n.startswith("head."))
    return param_count(config) - head


@dataclass(frozen=True)
class PlanAccounting:
    """Per-task stored-parameter footprint of one adapted model."""

    tunable_size: int
    owns_backbone: bool

    @classmethod
    def from_model(cls, model):
        from .adaptation import trainable_count

        return cls(trainable_count(model), model.plan.method == "full")

    @classmethod
    def from_plan(cls, plan, config, num_classes=None):
        return cls(plan_trainable_count(plan, config, num_classes), plan.method == "full")


def total_params_multiplier(plans, backbone_ref_size, tasks=None):
    """(shared frozen backbone + sum of per-task owned tunables) / reference.

    `plans` may be AdaptedModels or PlanAccountings; a single entry plus
    `tasks=T` replicates it T times. Full fine-tuning owns its backbone per
    task, so no shared copy is counted for it.
    """
    if not isinstance(plans, (list, tuple)):
        plans = [plans]
    accountings = [
        p if isinstance(p, PlanAccounting) else PlanAccounting.from_model(p) for p in plans
    ]
    if tasks is not None:
        if tasks < 1:
            raise ValueError("tasks must be >= 1")
        if len(accountings) == 1:
            accountings = accountings * tasks
        elif len(accountings) != tasks:
            raise ValueError(f"got {len(accountings)} plans but tasks={tasks}")
    shared = backbone_ref_size if any(not a.owns_backbone for a in accountings) else 0
    total = shared + sum(a.tunable_size for a in accountings)
    return total / backbone_ref_size


# -- toy pretraining -----------------------------------------------------------------


def pretrain_expert(domain, config, cfg, num_samples=512, val_fraction=0.25):
    """Train a fresh backbone end-to-end on one synthetic domain.

    Returns (backbone tagged with the domain, validation EvalResult).
    """
    if config.num_classes != domain.num_classes:
        raise ValueError(
            f"config.num_classes {config.num_classes} != domain classes {domain.num_classes}"
        )
    manifest, generator = synth_dataset(domain, num_samples=num_samples)
    X, y = materialize(manifest, generator)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(y))
    n_val = max(1, int(val_fraction * len(y)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_data = ArrayData(X[train_idx], y[train_idx], name="pretrain")
    val_data = ArrayData(X[val_idx], y[val_idx], name="val")

    bb = Backbone.init(config, seed=cfg.seed, domain_tag=domain.domain_tag)
    train(bb, train_data, cfg)
    result = evaluate(bb, val_data, split_name="val")
    return bb, result
