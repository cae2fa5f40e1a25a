"""Optimisers, loss, metrics and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import backward, cross_entropy
from .model import IVModel, model_forward, partition_params

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "miou")
METRICS_SCHEMA = "# schema=ivtune-metrics/1"


class FreezeViolation(RuntimeError):
    """A gradient or update was offered for a frozen parameter."""


def loss_fn(logits, labels):
    """Mean token-wise softmax cross-entropy."""
    return cross_entropy(logits, labels)


class Optimizer:
    """SGD, Adam (coupled L2) or AdamW (decoupled decay) over a fixed trainable set."""

    KINDS = ("sgd", "adam", "adamw")

    def __init__(self, params, kind="sgd", lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.params = {}
        for p in params:
            if p.trainable:
                self.params[p.name] = p
        self.t = 0
        self.m = {}
        self.v = {}
        if kind != "sgd":
            self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
            self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads):
        extra = set(grads) - set(self.params)
        if extra:
            raise FreezeViolation(f"gradients offered for non-trainable parameters: {sorted(extra)[:5]}")
        self.t += 1
        lr, wd = self.lr, self.weight_decay
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            x = p.data
            if self.kind == "sgd":
                x -= lr * (g + wd * x)
                continue
            if self.kind == "adam":
                g = g + wd * x
            else:
                x -= lr * wd * x
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            x -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        out = {"t": np.array([float(self.t)])}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        for n in self.m:
            self.m[n] = np.array(state[f"m/{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(state[f"v/{n}"], dtype=self.v[n].dtype)

    def hyperparams(self):
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay,
                "betas": list(self.betas), "eps": self.eps}


def optimizer_step(grads, state, params=None):
    """Functional alias for :meth:`Optimizer.step`."""
    state.step(grads)
    return state.params


# -- metrics ----------------------------------------------------------------

def confusion_matrix(pred, labels, num_classes):
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if pred.size and (pred.max() >= num_classes or labels.max() >= num_classes):
        raise ValueError("class index exceeds num_classes")
    return np.bincount(labels * num_classes + pred, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def accuracy_miou(pred, labels, num_classes):
    """Patch accuracy and mean IoU; classes absent from prediction and truth are skipped."""
    cm = confusion_matrix(pred, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    miou = float(np.mean(tp[present] / denom[present])) if present.any() else float("nan")
    acc = float(tp.sum() / cm.sum()) if cm.sum() else float("nan")
    return acc, miou


@dataclass
class Metrics:
    loss: float
    accuracy: float
    miou: float


@dataclass
class Recipe:
    optimizer: str = "sgd"
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0


@dataclass
class TrainResult:
    model: IVModel
    optimizer: Optimizer
    log: list = field(default_factory=list)


def evaluate(model, split, batch_size=64):
    """Metrics of ``model`` (eval mode) on a dataset split."""
    K = model.config.num_classes
    was_training = model.training
    model.eval()
    total_loss, preds = 0.0, []
    n = len(split)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        vis, ir, labels = split.batch(idx)
        if labels.size and labels.max() >= K:
            raise ValueError(f"labels exceed the model's {K} classes")
        logits = model_forward(vis, ir, model)
        total_loss += float(loss_fn(logits, labels).data) * len(idx)
        preds.append(logits.data.argmax(axis=-1))
    model.train(was_training)
    pred = np.concatenate(preds)
    acc, miou = accuracy_miou(pred, split.labels, K)
    return Metrics(total_loss / n, acc, miou)


def train_step(model, optimizer, vis, ir, labels):
    logits = model_forward(vis, ir, model)
    loss = loss_fn(logits, labels)
    grads = backward(loss)
    optimizer.step(grads)
    return float(loss.data), logits.data.argmax(axis=-1)


def make_optimizer(model, recipe):
    trainable, _ = partition_params(model)
    return Optimizer(trainable.values(), recipe.optimizer, recipe.lr, recipe.weight_decay)


def train(config, splits, recipe=None, model=None, optimizer=None, max_steps=None):
    """Train on ``splits["train"]``; evaluate on ``splits["val"]`` after each epoch.

    Deterministic for a given config seed and recipe seed. Returns a
    :class:`TrainResult` whose ``log`` holds one dict per (epoch, split).
    """
    recipe = recipe or Recipe()
    model = model or IVModel(config)
    optimizer = optimizer or make_optimizer(model, recipe)
    train_split = splits["train"]
    if len(train_split) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([recipe.seed, 7])
    K = model.config.num_classes
    rows = []
    steps = 0
    for epoch in range(1, recipe.epochs + 1):
        model.train()
        order = rng.permutation(len(train_split))
        losses, preds, labs = [], [], []
        for start in range(0, len(order), recipe.batch_size):
            idx = np.sort(order[start:start + recipe.batch_size])
            vis, ir, labels = train_split.batch(idx)
            loss, pred = train_step(model, optimizer, vis, ir, labels)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            losses.append(loss * len(idx))
            preds.append(pred)
            labs.append(labels)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        acc, miou = accuracy_miou(np.concatenate(preds), np.concatenate(labs), K)
        n_seen = sum(len(p) for p in preds)
        rows.append({"epoch": epoch, "split": "train", "loss": sum(losses) / n_seen,
                     "accuracy": acc, "miou": miou})
        if "val" in splits and len(splits["val"]):
            m = evaluate(model, splits["val"])
            rows.append({"epoch": epoch, "split": "val", **asdict(m)})
        log.info("epoch %d: %s", epoch, rows[-1])
        if max_steps is not None and steps >= max_steps:
            break
    model.eval()
    return TrainResult(model, optimizer, rows)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_SCHEMA + "\n")
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if k in ("loss", "accuracy", "miou") else v)
                             for k, v in row.items()})


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


