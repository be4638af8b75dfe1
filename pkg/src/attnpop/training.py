"""Loss, optimizer, training loop, evaluation metrics, and random search.

The loss is the numerically stable binary cross-entropy on logits; the
optimizer is bias-corrected Adam.  Training shuffles with its own seeded
generator, averages gradients over each mini-batch, early-stops on
validation accuracy, and hands back the parameters of the best epoch, so
a (config, seed) pair pins down the whole run.
"""

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import backend
from .errors import ShapeError
from .model import ModelConfig, PopularityModel, model_predict
from .tensor import (GradTape, Op, Parameter, Tensor, apply_op, concat,
                     scale, sum_all)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class _BceLoss(Op):
    """Binary cross-entropy on the logit.

    The max/abs arrangement never exponentiates a positive argument, so
    the loss stays finite for any finite logit.  d loss / d logit is
    sigmoid(logit) - label.
    """
    name = "bce"

    def forward(self, s, *, label):
        return np.maximum(s, 0.0) - s * label + np.log1p(np.exp(-np.abs(s)))

    def backward(self, grad, out, s, *, label):
        return (grad * (backend.kernels.sigmoid_fwd(
            np.ascontiguousarray(s)) - label),)


_BCE = _BceLoss()


def bce_loss(logit: Tensor, label) -> Tensor:
    """Stable cross-entropy of a logit against a 0/1 label."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return apply_op(_BCE, logit, label=float(label))


@dataclass(frozen=True)
class Example:
    """One record ready for the model: inputs, label, popularity signal."""
    label: int
    normalized_viewcount: float = 0.0
    frames: Optional[tuple] = None
    words: Optional[tuple] = None


@dataclass(frozen=True)
class ExampleSet:
    train: tuple = ()
    val: tuple = ()
    test: tuple = ()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params):
        self.step = 0
        self.m = {p.name: np.zeros(p.value.shape) for p in params
                  if p.trainable}
        self.v = {p.name: np.zeros(p.value.shape) for p in params
                  if p.trainable}


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    """One bias-corrected update in place; frozen parameters untouched."""
    state.step += 1
    correct1 = 1.0 - ADAM_BETA1 ** state.step
    correct2 = 1.0 - ADAM_BETA2 ** state.step
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=float)
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {p.name} has shape {g.shape}, "
                             f"parameter has {p.value.shape}")
        m = state.m[p.name] = ADAM_BETA1 * state.m[p.name] \
            + (1.0 - ADAM_BETA1) * g
        v = state.v[p.name] = ADAM_BETA2 * state.v[p.name] \
            + (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPSILON)
        p.value = Tensor._wrap(p.value.data - update)


def _forward(model, example, training=False, stream=0):
    # examples may carry both modalities; feed only what the model takes
    frames = example.frames if model.video is not None else None
    words = example.words if model.text is not None else None
    return model_predict(model, frames=frames, words=words,
                         training=training, mask_stream=stream)


def batch_loss(model, examples, training=False, first_stream=0):
    """Mean cross-entropy over a batch, built on the caller's tape."""
    losses = [bce_loss(_forward(model, ex, training, first_stream + i)
                       .logit_node, ex.label)
              for i, ex in enumerate(examples)]
    return scale(sum_all(concat(losses)), 1.0 / len(losses))


@dataclass(frozen=True)
class TrainResult:
    """Per-epoch history plus which epoch's parameters were kept."""
    history: tuple
    best_epoch: int
    best_val_accuracy: float


def train(model: PopularityModel, dataset: ExampleSet,
          config: TrainConfig) -> TrainResult:
    """Mini-batch Adam with early stopping on validation accuracy.

    The model is updated in place and ends up holding the parameters of
    its best validation epoch.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    if not dataset.val:
        raise ValueError("validation split is empty")
    train_set = list(dataset.train)
    n = len(train_set)
    rng = np.random.default_rng(config.seed)
    state = AdamState(model.parameters())
    params = model.trainable_parameters()

    history = []
    best_epoch = -1
    best_accuracy = -1.0
    best_params = None
    stale = 0
    stream = 1  # stream 0 is reserved for ad-hoc forward calls
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[start:start
                                                 + config.batch_size]]
            with GradTape() as tape:
                mean = batch_loss(model, batch, training=True,
                                  first_stream=stream)
            stream += len(batch)
            grads = tape.gradients(mean, params)
            adam_step(state, params, grads, config.learning_rate)
            total += mean.item() * len(batch)
        accuracy = evaluate(model, dataset.val).accuracy
        history.append({"train_loss": total / n, "val_accuracy": accuracy})
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_epoch = epoch
            best_params = {p.name: p.value for p in model.parameters()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p in model.parameters():
        p.value = best_params[p.name]
    return TrainResult(tuple(history), best_epoch, best_accuracy)


def _average_ranks(values):
    """1-based ranks; tied values share the average of their positions."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Rank correlation: average ranks for ties, then Pearson on ranks."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx2 = float(dx @ dx)
    sy2 = float(dy @ dy)
    if sx2 == 0.0 or sy2 == 0.0:
        warnings.warn("rank correlation of a constant vector is undefined; "
                      "reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    # one square root of the product: identical rank vectors then divide
    # to exactly 1.0, so strictly monotone pairs report exactly +/-1
    return float(dx @ dy) / math.sqrt(sx2 * sy2)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    spearman: float
    n: int


def evaluate(model: PopularityModel, examples) -> EvalReport:
    """Accuracy at the 0.5 threshold plus rank correlation of the
    predicted probability against the normalized viewcount."""
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    probabilities = [_forward(model, ex).probability for ex in examples]
    hits = sum(int((p > 0.5) == bool(ex.label))
               for p, ex in zip(probabilities, examples))
    if len(examples) >= 2:
        rho = spearman_rho(probabilities,
                           [ex.normalized_viewcount for ex in examples])
    else:
        rho = 0.0
    return EvalReport(hits / len(examples), rho, len(examples))


@dataclass(frozen=True)
class SearchSpace:
    """Inclusive ranges; learning_rate is sampled log-uniformly."""
    embed_dim: tuple = (16, 64)
    lstm_hidden: tuple = (8, 32)
    attention_hidden: tuple = (8, 32)
    fusion_dim: tuple = (8, 32)
    dropout: tuple = (0.0, 0.5)
    learning_rate: tuple = (1e-4, 1e-2)

    def __post_init__(self):
        for name in ("embed_dim", "lstm_hidden", "attention_hidden",
                     "fusion_dim", "dropout", "learning_rate"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        if self.learning_rate[0] <= 0:
            raise ValueError("learning_rate range must be positive")
        if not 0 <= self.dropout[0] <= self.dropout[1] < 1:
            raise ValueError("dropout range must sit inside [0, 1)")


@dataclass(frozen=True)
class TrialResult:
    trial: int
    model_config: ModelConfig
    train_config: TrainConfig
    report: EvalReport


def sample_trial(space: SearchSpace, base_config: ModelConfig,
                 train_config: TrainConfig, seed, trial: int):
    """Draw one (model config, train config) pair; reproducible from
    (space, seed, trial) alone."""
    rng = np.random.default_rng((int(seed), int(trial)))
    rate = float(rng.uniform(*space.dropout))
    model_config = replace(
        base_config,
        embed_dim=int(rng.integers(space.embed_dim[0],
                                   space.embed_dim[1] + 1)),
        lstm_hidden=int(rng.integers(space.lstm_hidden[0],
                                     space.lstm_hidden[1] + 1)),
        attention_hidden=int(rng.integers(space.attention_hidden[0],
                                          space.attention_hidden[1] + 1)),
        fusion_hidden=int(rng.integers(space.fusion_dim[0],
                                       space.fusion_dim[1] + 1)),
        dropout_frames=rate, dropout_lstm=rate, dropout_fusion=rate)
    lo, hi = space.learning_rate
    lr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return model_config, replace(train_config, learning_rate=lr)


def random_search(space: SearchSpace, trials: int, dataset: ExampleSet,
                  base_config: ModelConfig,
                  train_config: Optional[TrainConfig] = None,
                  seed=0) -> list:
    """Train `trials` sampled configs; rank by validation accuracy with
    validation rank correlation as the tiebreak."""
    if trials < 1:
        raise ValueError("need at least one trial")
    train_config = train_config or TrainConfig()
    results = []
    for trial in range(trials):
        model_config, trial_config = sample_trial(
            space, base_config, train_config, seed, trial)
        model = PopularityModel.create(model_config)
        train(model, dataset, trial_config)
        report = evaluate(model, dataset.val)
        results.append(TrialResult(trial, model_config, trial_config, report))
    return sorted(results, key=lambda r: (-r.report.accuracy,
                                          -r.report.spearman, r.trial))
