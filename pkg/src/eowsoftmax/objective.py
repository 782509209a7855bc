"""Training objectives and the SGD loop.

``eow`` minimises cross-entropy of the true label under the K+1-way softmax
plus ``lam`` times the mean of ``-log h[K+1]`` at latents drawn by the
Langevin sampler from a frozen copy of the parameters. ``vanilla`` and
``label_smoothing`` are K-way baselines that ignore the extra logit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import calibration
from . import diffcore as dc
from .energy import PersistentBuffer, SamplingDiverged, SgldConfig, sample
from .model import EowClassifier, log_softmax, predict_from_logits

logger = logging.getLogger(__name__)

LOSS_KINDS = ("eow", "vanilla", "label_smoothing")


class TrainingDiverged(FloatingPointError):
    """Parameters became non-finite."""


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 50
    lr_decay: float = 0.1
    lr_milestones: tuple = (0.5, 0.75)
    loss_kind: str = "eow"
    smoothing: float = 0.1
    sgld: SgldConfig = field(default_factory=SgldConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if not 0 <= self.smoothing <= 1:
            raise ValueError("smoothing must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(round(m * self.epochs)) for m in self.lr_milestones)
        return self.lr * self.lr_decay**drops


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    ce: float
    energy: float = 0.0


def _check_labels(model, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError("label out of range")
    return labels


def eow_loss(model: EowClassifier, inputs, labels, sampled_z=None, lam: float = 0.1, stage: int = 2) -> LossResult:
    """K+1-way cross-entropy on data plus ``lam * mean(-log h[K+1])`` at ``sampled_z``.

    ``sampled_z`` enters as a constant, so no gradient reaches the sampler.
    """
    labels = _check_labels(model, labels)
    tape = dc.Tape()
    params = model.bind(tape)
    logp = dc.log_softmax(model.trace(params, inputs, 0))
    ce = dc.negate(dc.mean(dc.take_rows(logp, labels)))
    loss = ce
    energy = 0.0
    if lam > 0 and sampled_z is not None:
        logq = dc.log_softmax(model.trace(params, np.asarray(sampled_z, dtype=np.float64), stage))
        e = dc.negate(dc.mean(dc.column(logq, model.num_classes)))
        energy = float(e.value)
        loss = dc.add(ce, dc.mul(e, float(lam)))
    grads = dc.grad(tape, loss, params)
    return LossResult(float(loss.value), model.flat_grad(grads), float(ce.value), energy)


def vanilla_loss(model: EowClassifier, inputs, labels) -> LossResult:
    """K-way cross-entropy on the first K logits."""
    return label_smoothing_loss(model, inputs, labels, 0.0)


def label_smoothing_loss(model: EowClassifier, inputs, labels, smoothing: float = 0.1) -> LossResult:
    """K-way cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    labels = _check_labels(model, labels)
    tape = dc.Tape()
    params = model.bind(tape)
    logits = model.trace(params, inputs, 0)
    logp = dc.log_softmax(dc.slice_cols(logits, 0, model.num_classes))
    ce = dc.negate(dc.mean(dc.take_rows(logp, labels)))
    loss = ce
    if smoothing > 0:
        # mean over all B*K entries == batch mean of the per-row class average
        uniform = dc.negate(dc.mean(logp))
        loss = dc.add(dc.mul(ce, 1.0 - smoothing), dc.mul(uniform, float(smoothing)))
    grads = dc.grad(tape, loss, params)
    return LossResult(float(loss.value), model.flat_grad(grads), float(ce.value))


def eow_loss_value(model: EowClassifier, inputs, labels, sampled_z=None, lam: float = 0.1, stage: int = 2) -> float:
    """Value of :func:`eow_loss` computed with plain numpy (no tape)."""
    labels = _check_labels(model, labels)
    logp = log_softmax(model.logits(inputs))
    value = -np.mean(logp[np.arange(len(labels)), labels])
    if lam > 0 and sampled_z is not None:
        logq = log_softmax(model.head_from_stage(sampled_z, stage))
        value += lam * -np.mean(logq[:, model.num_classes])
    return float(value)


def label_smoothing_loss_value(model: EowClassifier, inputs, labels, smoothing: float = 0.0) -> float:
    """Value of :func:`label_smoothing_loss` (``smoothing=0`` is the vanilla loss) with plain numpy."""
    labels = _check_labels(model, labels)
    logp = log_softmax(model.logits(inputs)[:, : model.num_classes])
    target = np.full(logp.shape, smoothing / model.num_classes)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return float(-np.mean((target * logp).sum(axis=1)))


@dataclass
class SgdState:
    velocity: np.ndarray
    skipped: int = 0


def sgd_step(theta: np.ndarray, grad: np.ndarray, state: SgdState, lr: float, momentum: float,
             weight_decay: float) -> bool:
    """In-place heavy-ball update with coupled weight decay.

    ``v <- momentum * v + grad + weight_decay * theta``; ``theta <- theta - lr * v``.
    A non-finite gradient leaves everything untouched and returns False.
    """
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        logger.warning("skipping SGD step: non-finite gradient")
        return False
    v = state.velocity
    v *= momentum
    v += grad
    if weight_decay:
        v += weight_decay * theta
    theta -= lr * v
    return True


def compute_loss(model, config: TrainConfig, xb, yb, z) -> LossResult:
    if config.loss_kind == "eow":
        return eow_loss(model, xb, yb, z, config.lam, config.sgld.stage)
    if config.loss_kind == "vanilla":
        return vanilla_loss(model, xb, yb)
    return label_smoothing_loss(model, xb, yb, config.smoothing)


METRIC_COLUMNS = ["epoch", "lr", "loss", "ce_term", "energy_term", "train_acc", "eval_acc", "eval_ece",
                  "eval_nll", "skipped_rounds"]


def fit(model: EowClassifier, dataset, config: TrainConfig, rng, eval_set=None, metrics_path=None,
        sgld_log=None, backend=None):
    """Train a copy of ``model``; returns ``(trained_model, history)``.

    Each iteration draws a minibatch, (for ``eow``) samples latents from the
    current parameters, computes the loss gradient and takes one SGD step.
    ``history`` holds one dict per epoch with the columns of
    :data:`METRIC_COLUMNS`; ``metrics_path`` additionally receives them as CSV.
    A diverged Langevin round skips its iteration.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit on an empty dataset")
    model = model.copy()
    model.confidence = "open" if config.loss_kind == "eow" else "closed"
    x_all, y_all = dataset.inputs, dataset.labels
    n = len(y_all)
    state = SgdState(np.zeros(model.size))
    buffer = None
    if config.loss_kind == "eow" and config.sgld.init_mode == "persistent":
        buffer = PersistentBuffer(config.sgld.stage, config.sgld.buffer_size)

    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    history = []
    round_id = 0
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = rng.permutation(n)
            sums = np.zeros(3)
            steps = 0
            skipped = 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                xb, yb = x_all[idx], y_all[idx]
                z = None
                if config.loss_kind == "eow" and config.lam > 0:
                    try:
                        z, diag = sample(model, xb, config.sgld, rng, buffer, backend, round_id)
                    except SamplingDiverged as exc:
                        skipped += 1
                        logger.warning("epoch %d: %s; iteration skipped", epoch, exc)
                        if sgld_log is not None and exc.diagnostics is not None:
                            sgld_log.write(exc.diagnostics)
                        round_id += 1
                        continue
                    if sgld_log is not None:
                        sgld_log.write(diag)
                    round_id += 1
                try:
                    res = compute_loss(model, config, xb, yb, z)
                except dc.NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
                if sgd_step(model.theta, res.grad, state, lr, config.momentum, config.weight_decay):
                    sums += (res.loss, res.ce, res.energy)
                    steps += 1
            if not np.all(np.isfinite(model.theta)):
                raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
            row = _epoch_row(model, epoch, lr, sums / max(steps, 1), skipped, x_all, y_all, eval_set)
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, history


def _epoch_row(model, epoch, lr, means, skipped, x, y, eval_set):
    with np.errstate(over="ignore", invalid="ignore"):
        logits = model.logits(x)
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(f"logits became non-finite in epoch {epoch}")
    label, _, _ = predict_from_logits(logits, model.confidence)
    row = {
        "epoch": epoch + 1,
        "lr": lr,
        "loss": float(means[0]),
        "ce_term": float(means[1]),
        "energy_term": float(means[2]),
        "train_acc": float(np.mean(label == y)),
        "eval_acc": math.nan,
        "eval_ece": math.nan,
        "eval_nll": math.nan,
        "skipped_rounds": skipped,
    }
    if eval_set is not None:
        ev = calibration.evaluate(model, eval_set.inputs, eval_set.labels)
        row.update(eval_acc=ev.accuracy, eval_ece=ev.ece.ece, eval_nll=ev.nll_true.value)
    return row


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
