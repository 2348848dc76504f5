"""Optimizer, gradient clipping and the epoch loop.

Defaults follow the training recipe used for the modified ResNet:
Adam with learning rate 0.001, gradients clipped at 0.1, weight decay
1e-4 and binary cross entropy.
"""

import contextlib
import csv
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .autograd import backward, forward_record
from .errors import InvalidInputError, InvalidSpecError, NonFiniteError
from .losses import bce_grad, bce_loss
from .metrics import confusion_matrix
from .tensor import make_rng
from .zoo import classify

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    grad_clip: float = 0.1
    clip_mode: str = "value"  # "value" clamps each element, "norm" rescales by global L2 norm
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    thread_count: int = 0  # 0 leaves the BLAS default alone

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise InvalidSpecError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.grad_clip > 0:
            raise InvalidSpecError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.clip_mode not in ("value", "norm"):
            raise InvalidSpecError(f"clip_mode must be 'value' or 'norm', got {self.clip_mode!r}")
        if self.weight_decay < 0:
            raise InvalidSpecError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise InvalidSpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidSpecError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidSpecError("adam betas must lie in [0, 1)")
        if self.thread_count < 0:
            raise InvalidSpecError(f"thread_count must be >= 0, got {self.thread_count}")

    @classmethod
    def from_mapping(cls, values):
        """Build from string values (config file or CLI), ignoring unknown keys."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type is bool or isinstance(f.default, bool):
                if str(raw).lower() in ("1", "true", "yes", "on"):
                    kwargs[f.name] = True
                elif str(raw).lower() in ("0", "false", "no", "off"):
                    kwargs[f.name] = False
                else:
                    raise InvalidSpecError(f"{f.name}: expected a boolean, got {raw!r}")
            else:
                try:
                    kwargs[f.name] = type(f.default)(raw)
                except ValueError:
                    raise InvalidSpecError(f"{f.name}: cannot parse {raw!r}") from None
        return cls(**kwargs)

    def to_text(self):
        return "".join(f"train.{f.name}={getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state, cfg):
    """One Adam update, in place on ``params`` and ``state``.

    Weight decay is coupled (added to the gradient before the moments)
    unless ``cfg.decoupled_weight_decay`` is set.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k}")
    state.t += 1
    t = state.t
    b1, b2, lr, wd = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.weight_decay
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if wd and not cfg.decoupled_weight_decay:
            g = g + wd * p
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and cfg.decoupled_weight_decay:
            p *= 1.0 - lr * wd
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


def clip_gradients(grads, threshold=0.1, mode="value"):
    """Clamp every gradient element into ``[-threshold, threshold]``.

    ``mode="norm"`` instead rescales all gradients together so their
    global L2 norm is at most ``threshold``.
    """
    if not threshold > 0:
        raise InvalidSpecError(f"clip threshold must be > 0, got {threshold}")
    if mode == "value":
        return {k: np.clip(g, -threshold, threshold) for k, g in grads.items()}
    if mode == "norm":
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, threshold / norm) if norm > 0 else 1.0
        return {k: g * scale for k, g in grads.items()}
    raise InvalidSpecError(f"unknown clip mode {mode!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float = float("nan")


@dataclass
class EvalResult:
    loss: float
    prob: np.ndarray
    pred: np.ndarray
    labels: np.ndarray
    counts: object

    @property
    def accuracy(self):
        return float(np.mean(self.pred == self.labels))


def batch_slices(n, batch_size, rng=None, drop_last=False):
    """Index arrays for one pass over ``n`` samples, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def _as_arrays(dataset):
    x, y = dataset
    x = np.asarray(x)
    y = np.asarray(y).reshape(-1)
    if len(x) == 0:
        raise InvalidInputError("dataset is empty")
    if len(x) != len(y):
        raise InvalidInputError(f"{len(x)} images but {len(y)} labels")
    return x, y


def evaluate(model, dataset, batch_size=32):
    """Eval-mode pass: mean BCE over all samples, probabilities, predictions, counts."""
    x, y = _as_arrays(dataset)
    total = 0.0
    probs = []
    for idx in batch_slices(len(x), batch_size):
        prob, _ = forward_record(model, x[idx], mode="eval")
        total += bce_loss(prob, y[idx]) * len(idx)
        probs.append(prob)
    prob = np.concatenate(probs)
    pred = classify(prob)
    labels = y.astype(np.int64)
    return EvalResult(total / len(x), prob, pred, labels, confusion_matrix(pred, labels))


def thread_limit(count):
    if not count:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def write_epoch_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss"))
        for r in records:
            w.writerow((r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}"))


def train_step(model, params, x, y, state, cfg, rng):
    """Forward, BCE, backward, clip, Adam. Returns the batch loss."""
    prob, tape = forward_record(model, x, mode="train", rng=rng)
    loss = bce_loss(prob, y)
    if not np.isfinite(loss):
        return loss
    grads = backward(tape, bce_grad(prob, y))
    grads = clip_gradients(grads, cfg.grad_clip, cfg.clip_mode)
    adam_step(params, grads, state, cfg)
    return loss


def fit(model, train_set, val_set, cfg, csv_path=None, state=None, callback=None):
    """Train ``model`` in place for ``cfg.epochs`` epochs.

    Each epoch shuffles the training set with a seeded generator, takes
    one optimizer step per batch, then evaluates the validation set in
    eval mode. The epoch CSV (when ``csv_path`` is given) is rewritten after
    every epoch. Returns ``(records, model, adam_state)``.
    """
    x, y = _as_arrays(train_set)
    vx, vy = _as_arrays(val_set)
    params = model.named_parameters()
    state = state or AdamState.for_params(params)
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng, dropout_rng = make_rng(shuffle_seq), make_rng(dropout_seq)
    records = []
    if csv_path is not None:
        write_epoch_csv(csv_path, records)
    with thread_limit(cfg.thread_count):
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            total = 0.0
            for b, idx in enumerate(batch_slices(len(x), cfg.batch_size, shuffle_rng)):
                loss = train_step(model, params, x[idx], y[idx], state, cfg, dropout_rng)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch {b}")
                total += loss * len(idx)
            model.eval()
            ev = evaluate(model, (vx, vy), cfg.batch_size)
            if not np.isfinite(ev.loss):
                raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
            rec = EpochRecord(epoch, total / len(x), ev.loss, ev.accuracy)
            records.append(rec)
            log.info("epoch %d train_loss %.6f val_loss %.6f val_acc %.4f",
                     epoch, rec.train_loss, rec.val_loss, rec.val_accuracy)
            if csv_path is not None:
                write_epoch_csv(csv_path, records)
            if callback is not None:
                callback(rec)
    return records, model, state
