"""Loss, optimizers, F1 evaluation and the early-stopping training loop."""

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import BUCKETS, length_bucket, make_batches
from .errors import ConfigurationError, ContractError, TrainingError
from .models import save_model

log = logging.getLogger(__name__)


def bce_loss(scores, labels):
    """Mean negative log-likelihood of binary ``labels`` under ``scores``.

    When ``scores`` came straight out of a sigmoid the loss is evaluated on
    the logits (softplus form), which stays finite for saturated scores.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = y.size
    if scores.op == "sigmoid" and scores.parents:
        x = scores.parents[0]
        xv = x.value.reshape(-1)
        # softplus(x) - y * x, computed without overflow
        val = np.maximum(xv, 0) + np.log1p(np.exp(-np.abs(xv))) - y * xv
        p = scores.value.reshape(-1)
        shape = x.shape
        return ad._make(np.array([val.mean()]), (x,),
                        lambda g: (((p - y) * g[0] / n).reshape(shape),), "bce_logits")
    s = scores.value.reshape(-1)
    val = -(y * np.log(s) + (1 - y) * np.log1p(-s))
    shape = scores.shape
    return ad._make(np.array([val.mean()]), (scores,),
                    lambda g: (((s - y) / (s * (1 - s)) * g[0] / n).reshape(shape),), "bce")


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_and_warn: bool = False
    sort_by_length: bool = False
    target_f1: float = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Optimizer:
    """sgd / momentum / adam over a name -> Parameter mapping."""

    def __init__(self, config):
        self.config = config
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        cfg = self.config
        grads = {}
        for name, p in params.items():
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                if not cfg.clip_and_warn:
                    raise TrainingError(f"non-finite gradient for parameter {name}")
                warnings.warn(f"non-finite gradient for {name} replaced by zeros")
                g = np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)
            grads[name] = g
        if cfg.clip_norm:
            grads = clip_global_norm(grads, cfg.clip_norm)
        self.t += 1
        for name, p in params.items():
            optimizer_step(self, name, p, grads[name])


def clip_global_norm(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def optimizer_step(state, name, param, grad):
    """Update one parameter in place."""
    cfg = state.config
    if cfg.optimizer == "sgd":
        param.value = param.value - cfg.lr * grad
    elif cfg.optimizer == "momentum":
        v = cfg.momentum * state.v.get(name, 0.0) + grad
        state.v[name] = v
        param.value = param.value - cfg.lr * v
    else:
        m = cfg.beta1 * state.m.get(name, 0.0) + (1 - cfg.beta1) * grad
        v = cfg.beta2 * state.v.get(name, 0.0) + (1 - cfg.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - cfg.beta1 ** state.t)
        v_hat = v / (1 - cfg.beta2 ** state.t)
        param.value = param.value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# evaluation


def binary_metrics(labels, predictions):
    """Precision / recall / F1 with question (1) as the positive class; 0/0 -> 0."""
    y = np.asarray(labels).astype(int)
    p = np.asarray(predictions).astype(int)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"f1": f1, "precision": precision, "recall": recall,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn, "n": int(y.size)}


@dataclass
class EvalReport:
    f1: float
    precision: float
    recall: float
    counts: dict
    buckets: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    threshold: float = 0.5

    def to_dict(self):
        return asdict(self)

    def summary(self):
        lines = [f"F1 {self.f1:.4f}  precision {self.precision:.4f}  recall {self.recall:.4f}  "
                 f"(n={self.counts['n']}, tp={self.counts['tp']}, fp={self.counts['fp']}, "
                 f"fn={self.counts['fn']})"]
        for b in BUCKETS:
            if b in self.buckets:
                m = self.buckets[b]
                lines.append(f"  {b:<12} F1 {m['f1']:.4f}  (n={m['n']})")
        return "\n".join(lines)


def score_examples(model, examples, batch_size=64, vocab=None):
    """id -> score for every example, in infer mode."""
    cfg = model.config
    vocab = vocab if vocab is not None else model.vocab
    if cfg.uses_text and vocab is None:
        raise ConfigurationError("text model has no vocabulary attached")
    out = {}
    for batch in make_batches(examples, batch_size, vocab if cfg.uses_text else None,
                              audio=cfg.uses_audio):
        scores = model.forward(batch, "infer").value
        out.update(zip(batch.ids, scores.tolist()))
    return out


def evaluate_f1(model, examples, threshold=0.5, batch_size=64):
    if not examples:
        raise ContractError("evaluate_f1 needs at least one example")
    scores = score_examples(model, examples, batch_size)
    labels = np.array([ex.label for ex in examples])
    preds = np.array([scores[ex.id] >= threshold for ex in examples])
    overall = binary_metrics(labels, preds)
    buckets = {}
    names = np.array([length_bucket(ex) for ex in examples])
    for b in BUCKETS:
        sel = names == b
        if sel.any():
            buckets[b] = binary_metrics(labels[sel], preds[sel])
    counts = {k: overall[k] for k in ("tp", "fp", "fn", "tn", "n")}
    return EvalReport(overall["f1"], overall["precision"], overall["recall"], counts, buckets,
                      scores, threshold)


# ---------------------------------------------------------------------------
# training loop


class EarlyStopping:
    """Track validation F1; strict improvement resets the counter (ties keep the earliest)."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, value):
        """Record ``value`` for 1-based ``epoch``; returns True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = None
    best_valid_f1: float = None
    model_path: str = None

    @property
    def losses(self):
        return [e["train_loss"] for e in self.epochs]

    @property
    def valid_f1(self):
        return [e["valid_f1"] for e in self.epochs]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                fh.write(json.dumps(dict(e, kind="epoch")) + "\n")
            fh.write(json.dumps({"kind": "summary", "best_epoch": self.best_epoch,
                                 "best_valid_f1": self.best_valid_f1,
                                 "model_path": self.model_path}) + "\n")


def _snapshot(model):
    return ({k: p.value.copy() for k, p in model.parameters().items()},
            {k: v.copy() for k, v in model.state().items()})


def _restore(model, snap):
    values, state = snap
    for k, p in model.parameters().items():
        p.value = values[k].copy()
    model.load_state(state)


def fit(model, splits, config=None, model_path=None, log_path=None):
    """Train ``model`` on ``splits.train``, selecting the epoch with best validation F1.

    The model must carry its vocabulary when it reads text. Returns a
    TrainLog; the model is left holding the best snapshot.
    """
    config = config or TrainConfig()
    mcfg = model.config
    vocab = model.vocab if mcfg.uses_text else None
    if mcfg.uses_text and vocab is None:
        raise ConfigurationError("attach a vocabulary to the model before training")
    opt = Optimizer(config)
    stopper = EarlyStopping(config.patience)
    params = model.parameters()
    trainlog = TrainLog()
    best = None
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(splits.train, config.batch_size, vocab,
                               shuffle_seed=config.seed + epoch,
                               sort_by_length=config.sort_by_length, audio=mcfg.uses_audio)
        total, count = 0.0, 0
        for b, batch in enumerate(batches):
            model.zero_grad()
            loss = bce_loss(model.forward(batch, "train"), batch.labels)
            value = loss.value.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step(params)
            total += value * len(batch)
            count += len(batch)
        valid_f1 = evaluate_f1(model, splits.valid).f1
        trainlog.epochs.append({"epoch": epoch, "train_loss": total / count,
                                "valid_f1": valid_f1, "seconds": time.perf_counter() - t0})
        log.debug("epoch %d loss %.5f valid F1 %.4f", epoch, total / count, valid_f1)
        improved = valid_f1 > stopper.best
        stop = stopper.update(epoch, valid_f1)
        if improved:
            best = _snapshot(model)
        if config.target_f1 is not None and valid_f1 >= config.target_f1:
            break
        if stop:
            break
    model.zero_grad()
    _restore(model, best)
    trainlog.best_epoch = stopper.best_epoch
    trainlog.best_valid_f1 = stopper.best
    if model_path is not None:
        save_model(model, model_path)
        trainlog.model_path = str(model_path)
    if log_path is not None:
        trainlog.write(log_path)
    return trainlog
